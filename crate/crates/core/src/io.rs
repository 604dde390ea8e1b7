//! Prediction export formats.
//!
//! Tensor dumps are a short text header followed by raw little-endian f64:
//!
//! ```text
//! RCTENSOR 1
//! dtype f64le
//! shape 16 64
//! normalization range/max_range, invalid=-1; max_range=20
//! end_header
//! <16*64*8 bytes>
//! ```

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{Grid, PointCloud};

pub const TENSOR_MAGIC: &str = "RCTENSOR";
pub const TENSOR_VERSION: u32 = 1;

/// ASCII PLY with one `x y z` vertex per point.
pub fn ply_string(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(64 + cloud.len() * 48);
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    )
    .unwrap();
    for p in &cloud.points {
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    out
}

/// Parses the subset written by [`ply_string`].
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(Error::Format("missing `ply` signature".into()));
    }
    let mut count = None;
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|e| Error::Format(format!("vertex count: {e}")))?);
        }
    }
    let count = count.ok_or_else(|| Error::Format("PLY header has no vertex element".into()))?;
    let mut points = Vec::with_capacity(count);
    for line in lines.take(count) {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("PLY vertex `{line}`: {e}")))?;
        if v.len() != 3 {
            return Err(Error::Format(format!("PLY vertex `{line}` does not have 3 coordinates")));
        }
        points.push([v[0], v[1], v[2]]);
    }
    if points.len() != count {
        return Err(Error::Format(format!("PLY declares {count} vertices, found {}", points.len())));
    }
    Ok(PointCloud::new(points))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorHeader {
    pub version: u32,
    pub shape: Vec<usize>,
    pub normalization: String,
}

pub fn tensor_dump(grid: &Grid, normalization: &str) -> Vec<u8> {
    let header = format!(
        "{TENSOR_MAGIC} {TENSOR_VERSION}\ndtype f64le\nshape {} {}\nnormalization {}\nend_header\n",
        grid.height,
        grid.width,
        normalization.replace('\n', " ")
    );
    let mut out = header.into_bytes();
    for v in &grid.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_tensor_dump(bytes: &[u8]) -> Result<(TensorHeader, Grid)> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("tensor dump has no end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Format("tensor header is not UTF-8".into()))?;
    let mut version = None;
    let mut shape = None;
    let mut normalization = String::new();
    for (i, line) in header.lines().enumerate() {
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        match (i, k) {
            (0, TENSOR_MAGIC) => {
                version = Some(v.parse::<u32>().map_err(|e| Error::Format(format!("tensor version: {e}")))?)
            }
            (0, _) => return Err(Error::Format("not a tensor dump (bad magic)".into())),
            (_, "dtype") if v != "f64le" => return Err(Error::Format(format!("unsupported dtype `{v}`"))),
            (_, "shape") => {
                let dims: Vec<usize> = v
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Format(format!("tensor shape: {e}")))?;
                shape = Some(dims);
            }
            (_, "normalization") => normalization = v.to_string(),
            _ => {}
        }
    }
    let version = version.ok_or_else(|| Error::Format("empty tensor header".into()))?;
    if version != TENSOR_VERSION {
        return Err(Error::Incompatible {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let shape = shape.ok_or_else(|| Error::Format("tensor header has no shape".into()))?;
    let [height, width] = shape[..] else {
        return Err(Error::Format(format!("expected a 2-D tensor, got shape {shape:?}")));
    };
    let payload = &bytes[end + END.len()..];
    if payload.len() != height * width * 8 {
        return Err(Error::Format(format!(
            "tensor payload has {} bytes, shape needs {}",
            payload.len(),
            height * width * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        TensorHeader {
            version,
            shape,
            normalization,
        },
        Grid { height, width, data },
    ))
}
