use std::path::Path;

use image::GrayImage;
use rangecast::geometry::RangeImage;

use crate::CliError;

/// Near returns are bright, far ones dark, invalid pixels black.
fn shade(img: &RangeImage, v: usize, u: usize, max_range: f64) -> u8 {
    match img.get(v, u) {
        Some(r) => (55.0 + 200.0 * (1.0 - (r / max_range).clamp(0.0, 1.0))).round() as u8,
        None => 0,
    }
}

/// Prediction on top, ground truth below, separated by a one-pixel line.
pub fn comparison(pred: &RangeImage, truth: &RangeImage, max_range: f64) -> GrayImage {
    let (h, w) = (truth.height as u32, truth.width as u32);
    GrayImage::from_fn(w, 2 * h + 1, |x, y| {
        let u = x as usize;
        let px = if y < h {
            shade(pred, y as usize, u, max_range)
        } else if y == h {
            128
        } else {
            shade(truth, (y - h - 1) as usize, u, max_range)
        };
        image::Luma([px])
    })
}

pub fn save(img: &GrayImage, path: &Path) -> Result<(), CliError> {
    img.save(path)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}
