//! Scan ingestion, synthetic sequences and (past, future) windowing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{spherical_project, Grid, PointCloud, RangeImage, SensorModel, INVALID_RANGE};

/// Bytes per point in a KITTI velodyne scan: four little-endian `f32`s.
pub const KITTI_POINT_BYTES: usize = 16;

/// Parses a KITTI velodyne `.bin` scan (x, y, z, intensity as `f32` LE).
pub fn read_kitti_scan(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(KITTI_POINT_BYTES) {
        return Err(Error::Format(format!(
            "scan length {} is not a multiple of {KITTI_POINT_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / KITTI_POINT_BYTES;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, chunk) in bytes.chunks_exact(KITTI_POINT_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        let (x, y, z, w) = (f(0), f(1), f(2), f(3));
        if ![x, y, z, w].iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("point {i} has non-finite values")));
        }
        points.push([x, y, z]);
        intensity.push(w);
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

/// Encodes a cloud in the KITTI velodyne layout (missing intensity = 0).
pub fn write_kitti_scan(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * KITTI_POINT_BYTES);
    for (i, p) in cloud.points.iter().enumerate() {
        let w = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for c in [p[0], p[1], p[2], w] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

/// `.bin` files of a directory in lexicographic (= temporal) order.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn read_scan_file(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_kitti_scan(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Time-ordered scans sharing one sensor.
#[derive(Clone, Debug)]
pub struct ScanSequence {
    pub id: String,
    pub sensor: SensorModel,
    pub scans: Vec<PointCloud>,
}

impl ScanSequence {
    /// Reads every `.bin` scan of `dir`.
    pub fn read_dir(id: impl Into<String>, dir: &Path, sensor: SensorModel) -> Result<Self> {
        let scans = list_scans(dir)?
            .iter()
            .map(|p| read_scan_file(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id: id.into(),
            sensor,
            scans,
        })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn project(&self) -> Result<Vec<RangeImage>> {
        self.scans.iter().map(|s| spherical_project(s, &self.sensor)).collect()
    }
}

// ---- synthetic scenes -------------------------------------------------------

/// Axis-aligned box translating at constant velocity (meters, meters/frame).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
    pub velocity: [f64; 3],
}

impl SceneBox {
    fn at(&self, frame: usize) -> ([f64; 3], [f64; 3]) {
        let t = frame as f64;
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..3 {
            let c = self.center[k] + self.velocity[k] * t;
            lo[k] = c - self.half_extent[k];
            hi[k] = c + self.half_extent[k];
        }
        (lo, hi)
    }
}

/// Scene description: an optional ground plane plus explicit and random
/// boxes. Random boxes are drawn from the sequence seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Height of the ground plane relative to the sensor (negative = below).
    pub ground_z: Option<f64>,
    pub boxes: Vec<SceneBox>,
    pub random_boxes: usize,
    /// Upper bound of random box speed, meters per frame.
    pub max_speed: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            ground_z: Some(-1.73),
            boxes: Vec::new(),
            random_boxes: 6,
            max_speed: 0.5,
        }
    }
}

impl SceneSpec {
    fn materialize(&self, seed: u64, sensor: &SensorModel) -> Vec<SceneBox> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ground = self.ground_z.unwrap_or(-1.73);
        let mut boxes = self.boxes.clone();
        let far = (0.5 * sensor.max_range).max(6.0);
        for _ in 0..self.random_boxes {
            let dist = rng.gen_range(4.0..far);
            let azimuth = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let half = [rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5), rng.gen_range(0.6..1.5)];
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let speed = if self.max_speed > 0.0 {
                rng.gen_range(0.0..self.max_speed)
            } else {
                0.0
            };
            boxes.push(SceneBox {
                center: [dist * azimuth.cos(), dist * azimuth.sin(), ground + half[2]],
                half_extent: half,
                velocity: [speed * heading.cos(), speed * heading.sin(), 0.0],
            });
        }
        boxes
    }
}

/// Entry distance of a ray from the origin into an axis-aligned box.
fn ray_box(dir: &[f64; 3], lo: &[f64; 3], hi: &[f64; 3]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-300 {
            if 0.0 < lo[k] || 0.0 > hi[k] {
                return None;
            }
            continue;
        }
        let a = lo[k] / dir[k];
        let b = hi[k] / dir[k];
        t_near = t_near.max(a.min(b));
        t_far = t_far.min(a.max(b));
    }
    (t_near <= t_far && t_near > 0.0).then_some(t_near)
}

/// Casts every pixel-center ray of the sensor against the scene.
fn render_frame(sensor: &SensorModel, ground_z: Option<f64>, boxes: &[([f64; 3], [f64; 3])]) -> PointCloud {
    let mut points = Vec::new();
    for v in 0..sensor.height {
        for u in 0..sensor.width {
            let d = sensor.pixel_ray(v, u);
            let mut best = f64::INFINITY;
            if let Some(gz) = ground_z {
                if d[2] < 0.0 && gz < 0.0 {
                    best = gz / d[2];
                }
            }
            for (lo, hi) in boxes {
                if let Some(t) = ray_box(&d, lo, hi) {
                    best = best.min(t);
                }
            }
            // Stay clear of the range cut so re-projection keeps every hit.
            if best.is_finite() && best < sensor.max_range * (1.0 - 1e-9) {
                points.push([best * d[0], best * d[1], best * d[2]]);
            }
        }
    }
    PointCloud::new(points)
}

/// Deterministic synthetic sequence: each frame is the exact sampling of the
/// scene along the sensor's pixel-center rays.
pub fn synth_sequence(seed: u64, frames: usize, sensor: &SensorModel, scene: &SceneSpec) -> Result<ScanSequence> {
    sensor.validate()?;
    if frames == 0 {
        return Err(Error::config("synth.frames", "must be >= 1"));
    }
    let boxes = scene.materialize(seed, sensor);
    let scans: Vec<PointCloud> = (0..frames)
        .map(|f| {
            let placed: Vec<_> = boxes.iter().map(|b| b.at(f)).collect();
            render_frame(sensor, scene.ground_z, &placed)
        })
        .collect();
    if scans[0].is_empty() {
        return Err(Error::config("synth", "scene has no geometry inside the sensor's field of view"));
    }
    Ok(ScanSequence {
        id: format!("synth-{seed}"),
        sensor: *sensor,
        scans,
    })
}

// ---- normalization and windowing -------------------------------------------

/// Range normalization at the network input: valid ranges are divided by
/// `max_range`, invalid pixels keep the -1 sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub max_range: f64,
}

impl NormalizationSpec {
    pub const SCHEME: &'static str = "range/max_range, invalid=-1";

    pub fn new(max_range: f64) -> Result<Self> {
        if !(max_range.is_finite() && max_range > 0.0) {
            return Err(Error::config("sensor.max_range", format!("must be > 0, got {max_range}")));
        }
        Ok(Self { max_range })
    }

    pub fn normalize(&self, img: &RangeImage) -> Grid {
        let data = img
            .range
            .iter()
            .zip(&img.valid)
            .map(|(&r, &ok)| if ok { r / self.max_range } else { INVALID_RANGE })
            .collect();
        Grid {
            height: img.height,
            width: img.width,
            data,
        }
    }

    /// Inverse of [`Self::normalize`]; negative entries stay invalid.
    pub fn denormalize(&self, grid: &Grid) -> RangeImage {
        let mut img = RangeImage::empty(grid.height, grid.width);
        for (i, &x) in grid.data.iter().enumerate() {
            if x > 0.0 {
                img.valid[i] = true;
                img.range[i] = x * self.max_range;
            }
        }
        img
    }
}

/// `M` normalized past frames and `N` ground-truth future frames (meters).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub sequence: String,
    /// Index of the first past frame within its sequence.
    pub start: usize,
    pub past: Vec<Grid>,
    pub future: Vec<RangeImage>,
}

impl SequenceSample {
    pub fn past_frames(&self) -> usize {
        self.past.len()
    }

    pub fn future_frames(&self) -> usize {
        self.future.len()
    }
}

/// Sliding windows over projected frames.
pub struct Windows {
    sequence: String,
    images: Vec<RangeImage>,
    norm: NormalizationSpec,
    past: usize,
    future: usize,
    stride: usize,
    next: usize,
}

impl Iterator for Windows {
    type Item = SequenceSample;

    fn next(&mut self) -> Option<SequenceSample> {
        let start = self.next;
        if self.past + self.future == 0 || start + self.past + self.future > self.images.len() {
            return None;
        }
        self.next += self.stride;
        let past = self.images[start..start + self.past]
            .iter()
            .map(|img| self.norm.normalize(img))
            .collect();
        let future = self.images[start + self.past..start + self.past + self.future].to_vec();
        Some(SequenceSample {
            sequence: self.sequence.clone(),
            start,
            past,
            future,
        })
    }
}

/// Windows of `past` + `future` consecutive frames every `stride` frames.
/// Sequences shorter than one window yield nothing.
pub fn window(seq: &ScanSequence, past: usize, future: usize, stride: usize, norm: NormalizationSpec) -> Result<Windows> {
    if stride == 0 {
        return Err(Error::config("data.stride", "must be >= 1"));
    }
    Ok(Windows {
        sequence: seq.id.clone(),
        images: seq.project()?,
        norm,
        past,
        future,
        stride,
        next: 0,
    })
}

/// Reads KITTI-style poses: one row-major 3x4 matrix per line. Returns the
/// translation of each pose projected onto the ground plane (x, z of the
/// camera frame).
pub fn read_poses(text: &str) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("pose line {}: {e}", line_no + 1)))?;
        if vals.len() != 12 {
            return Err(Error::Format(format!("pose line {}: expected 12 values, got {}", line_no + 1, vals.len())));
        }
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("pose line {} has non-finite values", line_no + 1)));
        }
        out.push([vals[3], vals[11]]);
    }
    Ok(out)
}
