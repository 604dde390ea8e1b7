//! Point clouds, the virtual LiDAR image plane, and point-set distances.
//!
//! Pixel convention: column `u = floor(W/2 * (1 - yaw/pi))`, row
//! `v = floor(H * (1 - (pitch - fov_down) / (fov_up - fov_down)))`, both
//! clamped to the image. Row 0 looks up, column 0 looks backwards (yaw = pi)
//! and columns sweep clockwise seen from above.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdtree::KdTree;

/// Sentinel stored in range grids at invalid pixels.
pub const INVALID_RANGE: f64 = -1.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Optional per-point intensity in `[0, 1]`, same length as `points`.
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Data(format!("point {i} has non-finite coordinates")));
        }
        if let Some(int) = &self.intensity {
            if int.len() != self.points.len() {
                return Err(Error::Data(format!(
                    "{} intensities for {} points",
                    int.len(),
                    self.points.len()
                )));
            }
        }
        Ok(())
    }
}

/// Intrinsics of a spinning LiDAR's virtual image plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    /// Upper edge of the vertical field of view, degrees.
    pub fov_up: f64,
    /// Lower edge of the vertical field of view, degrees (negative).
    pub fov_down: f64,
    pub height: usize,
    pub width: usize,
    /// Meters.
    pub max_range: f64,
}

impl SensorModel {
    /// 64-beam KITTI-like sensor rendered at 64 x 2048.
    pub fn kitti() -> Self {
        Self {
            fov_up: 3.0,
            fov_down: -25.0,
            height: 64,
            width: 2048,
            max_range: 85.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("sensor.{key}"), msg));
        if !(self.fov_up.is_finite() && self.fov_up > 0.0) {
            return bad("fov_up", format!("must be > 0 degrees, got {}", self.fov_up));
        }
        if !(self.fov_down.is_finite() && self.fov_down < 0.0) {
            return bad("fov_down", format!("must be < 0 degrees, got {}", self.fov_down));
        }
        if self.fov_up > 90.0 || self.fov_down < -90.0 {
            return bad("fov_up", "field of view must lie within [-90, 90] degrees".into());
        }
        if self.height < 2 {
            return bad("height", format!("must be >= 2, got {}", self.height));
        }
        if self.width < 2 {
            return bad("width", format!("must be >= 2, got {}", self.width));
        }
        if !(self.max_range.is_finite() && self.max_range > 0.0) {
            return bad("max_range", format!("must be > 0, got {}", self.max_range));
        }
        Ok(())
    }

    fn fov_rad(&self) -> (f64, f64) {
        (self.fov_up.to_radians(), self.fov_down.to_radians())
    }

    /// `(pitch, yaw)` in radians of the center of pixel `(v, u)`.
    pub fn pixel_center_angles(&self, v: usize, u: usize) -> (f64, f64) {
        let (up, down) = self.fov_rad();
        let pitch = down + (1.0 - (v as f64 + 0.5) / self.height as f64) * (up - down);
        let yaw = PI * (1.0 - 2.0 * (u as f64 + 0.5) / self.width as f64);
        (pitch, yaw)
    }

    /// Unit direction of the ray through the center of pixel `(v, u)`.
    pub fn pixel_ray(&self, v: usize, u: usize) -> [f64; 3] {
        let (pitch, yaw) = self.pixel_center_angles(v, u);
        [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin()]
    }

    /// Pixel and range of a point, or `None` when it is outside the sensor's
    /// field of view or range.
    pub fn locate(&self, p: &[f64; 3]) -> Option<(usize, usize, f64)> {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if r <= 0.0 || r > self.max_range {
            return None;
        }
        let (up, down) = self.fov_rad();
        let pitch = (p[2] / r).clamp(-1.0, 1.0).asin();
        if pitch < down || pitch > up {
            return None;
        }
        let yaw = p[1].atan2(p[0]);
        let u = (self.width as f64 * 0.5 * (1.0 - yaw / PI)).floor();
        let v = (self.height as f64 * (1.0 - (pitch - down) / (up - down))).floor();
        let u = (u.max(0.0) as usize).min(self.width - 1);
        let v = (v.max(0.0) as usize).min(self.height - 1);
        Some((v, u, r))
    }
}

/// A row-major `height x width` grid of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "grid of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, v: usize, u: usize) -> f64 {
        self.data[v * self.width + u]
    }
}

/// Range grid plus validity mask; invalid pixels hold [`INVALID_RANGE`].
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    pub height: usize,
    pub width: usize,
    pub range: Vec<f64>,
    pub valid: Vec<bool>,
}

impl RangeImage {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            range: vec![INVALID_RANGE; height * width],
            valid: vec![false; height * width],
        }
    }

    pub fn get(&self, v: usize, u: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then_some(self.range[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Checks the image invariants against a sensor's maximum range.
    pub fn validate(&self, max_range: f64) -> Result<()> {
        let n = self.height * self.width;
        if self.range.len() != n || self.valid.len() != n {
            return Err(Error::Data(format!("range image buffers do not match {}x{}", self.height, self.width)));
        }
        for (i, (&r, &ok)) in self.range.iter().zip(&self.valid).enumerate() {
            let fine = if ok { r > 0.0 && r <= max_range } else { r == INVALID_RANGE };
            if !fine {
                return Err(Error::Data(format!("pixel {i}: range {r} inconsistent with valid={ok}")));
            }
        }
        Ok(())
    }

    /// Range grid with the invalid sentinel.
    pub fn range_grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.range.clone(),
        }
    }
}

/// Renders a point cloud onto the sensor's image plane. On pixel collisions
/// the nearest return wins.
pub fn spherical_project(cloud: &PointCloud, sensor: &SensorModel) -> Result<RangeImage> {
    sensor.validate()?;
    let mut img = RangeImage::empty(sensor.height, sensor.width);
    for (i, p) in cloud.points.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::Data(format!("point {i} has non-finite coordinates {p:?}")));
        }
        let Some((v, u, r)) = sensor.locate(p) else {
            continue;
        };
        let k = v * sensor.width + u;
        if !img.valid[k] || r < img.range[k] {
            img.valid[k] = true;
            img.range[k] = r;
        }
    }
    Ok(img)
}

/// One point per valid pixel, placed along the pixel-center ray.
pub fn unproject(img: &RangeImage, sensor: &SensorModel) -> PointCloud {
    let mut points = Vec::with_capacity(img.valid_count());
    for v in 0..img.height {
        for u in 0..img.width {
            if let Some(r) = img.get(v, u) {
                let d = sensor.pixel_ray(v, u);
                points.push([r * d[0], r * d[1], r * d[2]]);
            }
        }
    }
    PointCloud::new(points)
}

/// Keeps pixels whose mask probability is strictly above 0.5 and whose range
/// lies in `(0, max_range]`.
pub fn apply_mask(range: &Grid, mask_prob: &Grid, max_range: f64) -> Result<RangeImage> {
    if (range.height, range.width) != (mask_prob.height, mask_prob.width) {
        return Err(Error::Data(format!(
            "range grid {}x{} vs mask grid {}x{}",
            range.height, range.width, mask_prob.height, mask_prob.width
        )));
    }
    let mut img = RangeImage::empty(range.height, range.width);
    for (i, (&r, &p)) in range.data.iter().zip(&mask_prob.data).enumerate() {
        if p > 0.5 && r > 0.0 && r <= max_range {
            img.valid[i] = true;
            img.range[i] = r;
        }
    }
    Ok(img)
}

/// Nearest-neighbour correspondences underlying a Chamfer distance.
#[derive(Clone, Debug)]
pub struct ChamferMatch {
    /// Symmetric mean of squared nearest-neighbour distances.
    pub value: f64,
    /// For each point of `a`: index of its nearest point in `b`.
    pub a_to_b: Vec<usize>,
    /// For each point of `b`: index of its nearest point in `a`.
    pub b_to_a: Vec<usize>,
}

pub fn chamfer_match(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<ChamferMatch> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain(format!(
            "Chamfer distance needs two nonempty clouds (got {} and {} points)",
            a.len(),
            b.len()
        )));
    }
    let one_way = |from: &[[f64; 3]], to: &[[f64; 3]]| {
        let tree = KdTree::build(to);
        let mut sum = 0.0;
        let idx = from
            .iter()
            .map(|p| {
                let (j, d) = tree.nearest(p).expect("nonempty tree");
                sum += d;
                j
            })
            .collect::<Vec<_>>();
        (sum / from.len() as f64, idx)
    };
    let (ab, a_to_b) = one_way(a, b);
    let (ba, b_to_a) = one_way(b, a);
    Ok(ChamferMatch {
        value: ab + ba,
        a_to_b,
        b_to_a,
    })
}

/// Mean over `a` of the squared distance to the nearest point of `b`, plus
/// the same from `b` to `a`. Units: meters squared.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(chamfer_match(&a.points, &b.points)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sensor() -> SensorModel {
        SensorModel {
            fov_up: 15.0,
            fov_down: -15.0,
            height: 16,
            width: 64,
            max_range: 100.0,
        }
    }

    #[test]
    fn forward_point_lands_in_center_pixel() {
        let img = spherical_project(&PointCloud::new(vec![[10.0, 0.0, 0.0]]), &sensor()).unwrap();
        assert_eq!(img.get(8, 32), Some(10.0));
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn empty_cloud_gives_invalid_image() {
        let img = spherical_project(&PointCloud::default(), &sensor()).unwrap();
        assert_eq!(img.valid_count(), 0);
        assert!(img.range.iter().all(|&r| r == INVALID_RANGE));
    }

    #[test]
    fn nearest_return_wins() {
        let cloud = PointCloud::new(vec![[9.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let img = spherical_project(&cloud, &sensor()).unwrap();
        assert_eq!(img.get(8, 32), Some(5.0));
    }

    #[test]
    fn drops_out_of_range_and_fov() {
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [101.0, 0.0, 0.0],
            [10.0, 0.0, 10.0], // 45 degrees up
        ]);
        assert_eq!(spherical_project(&cloud, &sensor()).unwrap().valid_count(), 0);
    }

    #[test]
    fn non_finite_point_is_reported_by_index() {
        let cloud = PointCloud::new(vec![[1.0, 0.0, 0.0], [f64::NAN, 0.0, 0.0]]);
        let err = spherical_project(&cloud, &sensor()).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("point 1")), "{err}");
    }

    #[test]
    fn invalid_sensor_is_config_error() {
        let mut s = sensor();
        s.fov_down = 5.0;
        let err = spherical_project(&PointCloud::default(), &s).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "sensor.fov_down"));
    }

    #[test]
    fn unproject_single_pixel() {
        let s = sensor();
        let mut img = RangeImage::empty(16, 64);
        img.valid[8 * 64 + 32] = true;
        img.range[8 * 64 + 32] = 10.0;
        let cloud = unproject(&img, &s);
        // Center of row 8 is -0.9375 deg, center of column 32 is -pi/64.
        let pitch = (-0.9375f64).to_radians();
        let yaw = -PI / 64.0;
        let expect = [10.0 * pitch.cos() * yaw.cos(), 10.0 * pitch.cos() * yaw.sin(), 10.0 * pitch.sin()];
        assert_eq!(cloud.len(), 1);
        for k in 0..3 {
            assert!((cloud.points[0][k] - expect[k]).abs() < 1e-6);
        }
        assert!(unproject(&RangeImage::empty(16, 64), &s).is_empty());
    }

    #[test]
    fn mask_threshold_is_strict() {
        let ranges = Grid::filled(2, 2, 5.0);
        let mut probs = Grid::filled(2, 2, 1.0);
        let all = apply_mask(&ranges, &probs, 100.0).unwrap();
        assert_eq!(all.valid_count(), 4);
        assert!(all.range.iter().all(|&r| r == 5.0));
        probs.data[1] = 0.5;
        let img = apply_mask(&ranges, &probs, 100.0).unwrap();
        assert_eq!(img.get(0, 1), None);
        assert_eq!(img.range[1], INVALID_RANGE);
        assert_eq!(apply_mask(&ranges, &Grid::filled(2, 2, 0.0), 100.0).unwrap().valid_count(), 0);
    }

    #[test]
    fn mask_rejects_out_of_range_predictions() {
        let ranges = Grid::new(1, 3, vec![-0.2, 0.0, 150.0]).unwrap();
        let img = apply_mask(&ranges, &Grid::filled(1, 3, 0.9), 100.0).unwrap();
        assert_eq!(img.valid_count(), 0);
        img.validate(100.0).unwrap();
    }

    #[test]
    fn mask_shape_mismatch() {
        assert!(matches!(
            apply_mask(&Grid::filled(2, 2, 1.0), &Grid::filled(2, 3, 1.0), 10.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn chamfer_examples() {
        let a = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let b = PointCloud::new(vec![[2.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 8.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert!(matches!(chamfer_distance(&a, &PointCloud::default()), Err(Error::Domain(_))));
    }
}
