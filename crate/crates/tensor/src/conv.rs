//! im2col/GEMM convolution kernels (NCHW layout).

/// Geometry of a 2D convolution.
///
/// Height is always zero-padded. Width is zero-padded, or wrapped around
/// (circular padding) when `wrap_width` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub wrap_width: bool,
}

impl Conv2dSpec {
    /// Stride 1, no padding, no dilation.
    pub const fn valid() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            wrap_width: false,
        }
    }

    /// Shape-preserving stride-1 convolution for an odd `kh x kw` kernel with
    /// the given dilation.
    pub const fn same(kh: usize, kw: usize, dilation: usize, wrap_width: bool) -> Self {
        Self {
            stride: (1, 1),
            padding: (dilation * (kh / 2), dilation * (kw / 2)),
            dilation: (dilation, dilation),
            wrap_width,
        }
    }

    /// Non-overlapping strided convolution whose kernel equals its stride.
    pub const fn strided(sh: usize, sw: usize) -> Self {
        Self {
            stride: (sh, sw),
            padding: (0, 0),
            dilation: (1, 1),
            wrap_width: false,
        }
    }

    /// Output `(height, width)` for an input of `(h, w)` and a `(kh, kw)` kernel.
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let span_h = self.dilation.0 * (kh - 1) + 1;
        let span_w = self.dilation.1 * (kw - 1) + 1;
        assert!(
            h + 2 * self.padding.0 >= span_h && w + 2 * self.padding.1 >= span_w,
            "kernel {kh}x{kw} (spec {self:?}) larger than padded input {h}x{w}"
        );
        (
            (h + 2 * self.padding.0 - span_h) / self.stride.0 + 1,
            (w + 2 * self.padding.1 - span_w) / self.stride.1 + 1,
        )
    }
}

/// `C = A * B + beta * C` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * a_strides.0 + k.saturating_sub(1) * a_strides.1 || k == 0);
    assert!(b.len() > k.saturating_sub(1) * b_strides.0 + (n - 1) * b_strides.1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per-(kernel tap, output coordinate) source coordinate along one axis,
/// or `None` when the tap lands in zero padding.
fn tap_table(
    input: usize,
    output: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    wrap: bool,
) -> Vec<Option<usize>> {
    let mut table = Vec::with_capacity(kernel * output);
    for k in 0..kernel {
        for o in 0..output {
            let pos = (o * stride + k * dilation) as isize - pad as isize;
            table.push(if wrap {
                Some(pos.rem_euclid(input as isize) as usize)
            } else if pos >= 0 && (pos as usize) < input {
                Some(pos as usize)
            } else {
                None
            });
        }
    }
    table
}

pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
}

impl ConvGeometry {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, spec: &Conv2dSpec) -> Self {
        let (ho, wo) = spec.output_size(h, w, kh, kw);
        Self {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            rows: tap_table(h, ho, kh, spec.stride.0, spec.padding.0, spec.dilation.0, false),
            cols: tap_table(w, wo, kw, spec.stride.1, spec.padding.1, spec.dilation.1, spec.wrap_width),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image (`cin x h x w`) into a `patch_len x out_pixels` matrix.
    pub fn im2col(&self, image: &[f64], col: &mut [f64]) {
        let p = self.out_pixels();
        for ci in 0..self.cin {
            let plane = &image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    let dst = &mut col[row..row + p];
                    for oh in 0..self.ho {
                        let out_row = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        match self.rows[ki * self.ho + oh] {
                            None => out_row.fill(0.0),
                            Some(ih) => {
                                let src = &plane[ih * self.w..(ih + 1) * self.w];
                                let taps = &self.cols[kj * self.wo..(kj + 1) * self.wo];
                                for (o, tap) in out_row.iter_mut().zip(taps) {
                                    *o = tap.map_or(0.0, |iw| src[iw]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds `col` back into `image`.
    pub fn col2im(&self, col: &[f64], image: &mut [f64]) {
        let p = self.out_pixels();
        for ci in 0..self.cin {
            let plane = &mut image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * p;
                    let src = &col[row..row + p];
                    for oh in 0..self.ho {
                        let Some(ih) = self.rows[ki * self.ho + oh] else {
                            continue;
                        };
                        let dst = &mut plane[ih * self.w..(ih + 1) * self.w];
                        let taps = &self.cols[kj * self.wo..(kj + 1) * self.wo];
                        for (v, tap) in src[oh * self.wo..(oh + 1) * self.wo].iter().zip(taps) {
                            if let Some(iw) = tap {
                                dst[*iw] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x`: `(b, cin, h, w)`, `weight`: `(cout, cin, kh, kw)`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    xshape: (usize, usize, usize, usize),
    weight: &[f64],
    wshape: (usize, usize, usize, usize),
    bias: Option<&[f64]>,
    spec: &Conv2dSpec,
) -> (Vec<f64>, (usize, usize)) {
    let (b, cin, h, w) = xshape;
    let (cout, wcin, kh, kw) = wshape;
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
    let geo = ConvGeometry::new(cin, h, w, kh, kw, spec);
    let (k, p) = (geo.patch_len(), geo.out_pixels());
    let mut out = vec![0.0; b * cout * p];
    let mut col = vec![0.0; k * p];
    for bi in 0..b {
        geo.im2col(&x[bi * cin * h * w..(bi + 1) * cin * h * w], &mut col);
        let dst = &mut out[bi * cout * p..(bi + 1) * cout * p];
        gemm(cout, k, p, weight, (k, 1), &col, (p, 1), 0.0, dst);
        if let Some(bias) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    (out, (geo.ho, geo.wo))
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    xshape: (usize, usize, usize, usize),
    weight: &[f64],
    wshape: (usize, usize, usize, usize),
    spec: &Conv2dSpec,
    dy: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (b, cin, h, w) = xshape;
    let (cout, _, kh, kw) = wshape;
    let geo = ConvGeometry::new(cin, h, w, kh, kw, spec);
    let (k, p) = (geo.patch_len(), geo.out_pixels());
    let mut dx = need.0.then(|| vec![0.0; x.len()]);
    let mut dw = need.1.then(|| vec![0.0; weight.len()]);
    let db = need.2.then(|| {
        let mut db = vec![0.0; cout];
        for bi in 0..b {
            for (co, row) in dy[bi * cout * p..(bi + 1) * cout * p].chunks(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        db
    });
    let mut col = vec![0.0; k * p];
    for bi in 0..b {
        let dy_b = &dy[bi * cout * p..(bi + 1) * cout * p];
        if let Some(dw) = dw.as_mut() {
            geo.im2col(&x[bi * cin * h * w..(bi + 1) * cin * h * w], &mut col);
            // dW (cout x k) += dY (cout x p) * col^T (p x k)
            gemm(cout, p, k, dy_b, (p, 1), &col, (1, p), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol (k x p) = W^T (k x cout) * dY (cout x p)
            gemm(k, cout, p, weight, (1, k), dy_b, (p, 1), 0.0, &mut col);
            geo.col2im(&col, &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution without padding. `weight`: `(cin, cout, kh, kw)`;
/// output size `((h - 1) * sh + kh, (w - 1) * sw + kw)`.
pub(crate) fn conv_transpose2d_forward(
    x: &[f64],
    xshape: (usize, usize, usize, usize),
    weight: &[f64],
    wshape: (usize, usize, usize, usize),
    bias: Option<&[f64]>,
    stride: (usize, usize),
) -> (Vec<f64>, (usize, usize)) {
    let (b, cin, h, w) = xshape;
    let (wcin, cout, kh, kw) = wshape;
    assert_eq!(cin, wcin, "conv_transpose2d: input has {cin} channels, weight expects {wcin}");
    let (ho, wo) = ((h - 1) * stride.0 + kh, (w - 1) * stride.1 + kw);
    let (kk, pin, pout) = (cout * kh * kw, h * w, ho * wo);
    let mut out = vec![0.0; b * cout * pout];
    let mut cols = vec![0.0; kk * pin];
    for bi in 0..b {
        // cols (kk x pin) = W^T (kk x cin) * X (cin x pin)
        gemm(kk, cin, pin, weight, (1, kk), &x[bi * cin * pin..(bi + 1) * cin * pin], (pin, 1), 0.0, &mut cols);
        let dst = &mut out[bi * cout * pout..(bi + 1) * cout * pout];
        for co in 0..cout {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &cols[((co * kh + ki) * kw + kj) * pin..][..pin];
                    for ih in 0..h {
                        let orow = (ih * stride.0 + ki) * wo;
                        for iw in 0..w {
                            dst[co * pout + orow + iw * stride.1 + kj] += row[ih * w + iw];
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                dst[co * pout..(co + 1) * pout].iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    (out, (ho, wo))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    xshape: (usize, usize, usize, usize),
    weight: &[f64],
    wshape: (usize, usize, usize, usize),
    stride: (usize, usize),
    dy: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (b, cin, h, w) = xshape;
    let (_, cout, kh, kw) = wshape;
    let (ho, wo) = ((h - 1) * stride.0 + kh, (w - 1) * stride.1 + kw);
    let (kk, pin, pout) = (cout * kh * kw, h * w, ho * wo);
    let mut dx = need.0.then(|| vec![0.0; x.len()]);
    let mut dw = need.1.then(|| vec![0.0; weight.len()]);
    let db = need.2.then(|| {
        let mut db = vec![0.0; cout];
        for bi in 0..b {
            for co in 0..cout {
                db[co] += dy[(bi * cout + co) * pout..][..pout].iter().sum::<f64>();
            }
        }
        db
    });
    let mut dcols = vec![0.0; kk * pin];
    for bi in 0..b {
        let dy_b = &dy[bi * cout * pout..(bi + 1) * cout * pout];
        for co in 0..cout {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &mut dcols[((co * kh + ki) * kw + kj) * pin..][..pin];
                    for ih in 0..h {
                        let orow = (ih * stride.0 + ki) * wo;
                        for iw in 0..w {
                            row[ih * w + iw] = dy_b[co * pout + orow + iw * stride.1 + kj];
                        }
                    }
                }
            }
        }
        let x_b = &x[bi * cin * pin..(bi + 1) * cin * pin];
        if let Some(dx) = dx.as_mut() {
            // dX (cin x pin) = W (cin x kk) * dcols (kk x pin)
            gemm(cin, kk, pin, weight, (kk, 1), &dcols, (pin, 1), 0.0, &mut dx[bi * cin * pin..(bi + 1) * cin * pin]);
        }
        if let Some(dw) = dw.as_mut() {
            // dW (cin x kk) += X (cin x pin) * dcols^T (pin x kk)
            gemm(cin, pin, kk, x_b, (pin, 1), &dcols, (1, pin), 1.0, dw);
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as a reference.
    fn naive_conv(
        x: &[f64],
        (b, cin, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        (cout, _, kh, kw): (usize, usize, usize, usize),
        spec: &Conv2dSpec,
    ) -> Vec<f64> {
        let (ho, wo) = spec.output_size(h, w, kh, kw);
        let mut out = vec![0.0; b * cout * ho * wo];
        for bi in 0..b {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * spec.stride.0 + ki * spec.dilation.0) as isize
                                        - spec.padding.0 as isize;
                                    let mut iw = (ow * spec.stride.1 + kj * spec.dilation.1) as isize
                                        - spec.padding.1 as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    if spec.wrap_width {
                                        iw = iw.rem_euclid(w as isize);
                                    } else if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * cin + ci) * h + ih as usize) * w + iw as usize]
                                        * wt[((co * cin + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((bi * cout + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 113) as f64 / 113.0 - 0.5) * scale).collect()
    }

    #[test]
    fn gemm_matches_naive_with_circular_and_dilation() {
        for spec in [
            Conv2dSpec::same(3, 3, 1, true),
            Conv2dSpec::same(3, 3, 2, true),
            Conv2dSpec::same(3, 3, 1, false),
            Conv2dSpec::strided(2, 4),
        ] {
            let xs = (2, 3, 4, 8);
            let (kh, kw) = if spec.stride.0 == 2 { (2, 4) } else { (3, 3) };
            let ws = (5, 3, kh, kw);
            let x = ramp(2 * 3 * 4 * 8, 2.0);
            let wt = ramp(5 * 3 * kh * kw, 1.0);
            let (fast, _) = conv2d_forward(&x, xs, &wt, ws, None, &spec);
            let slow = naive_conv(&x, xs, &wt, ws, &spec);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{spec:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_strided_conv() {
        // <conv(x), y> == <x, conv^T(y)> for a shared kernel with k == stride.
        let spec = Conv2dSpec::strided(2, 4);
        let (cin, cout) = (3, 2);
        let x = ramp(cin * 4 * 8, 1.0);
        let wt = ramp(cout * cin * 2 * 4, 1.0);
        let (y, (ho, wo)) = conv2d_forward(&x, (1, cin, 4, 8), &wt, (cout, cin, 2, 4), None, &spec);
        let z = ramp(y.len(), 3.0);
        // Transposed conv weight layout is (in, out, kh, kw) = (cout, cin, 2, 4),
        // which is exactly the forward weight's memory layout.
        let (xt, _) = conv_transpose2d_forward(&z, (1, cout, ho, wo), &wt, (cout, cin, 2, 4), None, (2, 4));
        let lhs: f64 = y.iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&xt).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
