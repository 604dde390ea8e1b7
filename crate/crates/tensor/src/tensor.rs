//! Dense row-major `f64` tensors.

use std::fmt;

/// A dense, row-major, owned `f64` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Wraps `data` with the given shape.
    ///
    /// Panics when the element count does not match the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} needs {numel} elements, got {}",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Returns `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += other`, same shape.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Circularly shifts a rank-4 tensor along its last (width) axis:
    /// output column `(j + shift) mod W` takes input column `j`.
    pub fn roll_width(&self, shift: isize) -> Self {
        let (b, c, h, w) = self.dims4();
        let mut out = Self::zeros(&self.shape);
        for plane in 0..b * c * h {
            let row = &self.data[plane * w..(plane + 1) * w];
            let dst = &mut out.data[plane * w..(plane + 1) * w];
            for (j, &v) in row.iter().enumerate() {
                let k = (j as isize + shift).rem_euclid(w as isize) as usize;
                dst[k] = v;
            }
        }
        out
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// Output shape of broadcasting two same-rank shapes (each dim equal, or 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(
                x == y || x == 1 || y == 1,
                "shapes {a:?} and {b:?} do not broadcast"
            );
            x.max(y)
        })
        .collect()
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// shape `src_shape` that broadcasts to it.
pub(crate) fn broadcast_index_map(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src_shape[d] == 1 { 0 } else { stride };
        stride *= src_shape[d];
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}
