//! Evaluation tables and the pose-disparity metric.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NormalizationSpec, SequenceSample};
use crate::error::{Error, Result};
use crate::geometry::{unproject, Grid, SensorModel};
use crate::losses::{step_chamfer, ChamferSettings};
use crate::network::{Network, PredictionOutput};
use crate::nn::ParamStore;

/// Anything that maps a window's past frames to a forecast.
pub trait Predictor {
    fn predict(&self, sample: &SequenceSample) -> Result<PredictionOutput>;
}

pub struct NetworkPredictor<'a> {
    pub net: &'a Network,
    pub weights: &'a ParamStore,
}

impl Predictor for NetworkPredictor<'_> {
    fn predict(&self, sample: &SequenceSample) -> Result<PredictionOutput> {
        self.net.predict(self.weights, &sample.past)
    }
}

fn certain_mask(range: &Grid) -> Grid {
    Grid {
        height: range.height,
        width: range.width,
        data: range.data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
    }
}

/// Repeats the last past frame for every future step.
pub struct IdentityBaseline {
    pub future_frames: usize,
}

impl Predictor for IdentityBaseline {
    fn predict(&self, sample: &SequenceSample) -> Result<PredictionOutput> {
        let last = sample
            .past
            .last()
            .ok_or_else(|| Error::Data("sample has no past frames".into()))?;
        Ok(PredictionOutput {
            ranges: vec![last.clone(); self.future_frames],
            mask_probs: vec![certain_mask(last); self.future_frames],
        })
    }
}

/// Returns the ground truth; a sanity reference for the evaluation code.
pub struct OracleBaseline {
    pub norm: NormalizationSpec,
}

impl Predictor for OracleBaseline {
    fn predict(&self, sample: &SequenceSample) -> Result<PredictionOutput> {
        let ranges: Vec<Grid> = sample.future.iter().map(|f| self.norm.normalize(f)).collect();
        let mask_probs = ranges.iter().map(certain_mask).collect();
        Ok(PredictionOutput { ranges, mask_probs })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Both clouds randomly subsampled to at most `cap` points.
    Sampled { cap: usize },
    FullScale,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Sampled { .. } => "sampled",
            Variant::FullScale => "full-scale",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub sample_cap: Option<usize>,
    pub samples: usize,
    pub prediction_steps: usize,
    /// Meters; mean over valid ground-truth pixels.
    pub range_loss_valid: Vec<f64>,
    /// Meters; error summed over valid pixels divided by all pixels.
    pub range_loss_all: Vec<f64>,
    /// Square meters.
    pub chamfer: Vec<f64>,
    /// Samples whose prediction was empty at each step (scored `max_range^2`).
    pub empty_predictions: Vec<usize>,
    pub mean_range_loss_valid: f64,
    pub mean_range_loss_all: f64,
    pub mean_chamfer: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs `predictor` over `samples` and aggregates per prediction step.
pub fn evaluate(
    predictor: &dyn Predictor,
    samples: &[SequenceSample],
    sensor: &SensorModel,
    variant: Variant,
    seed: u64,
) -> Result<EvalReport> {
    let first = samples.first().ok_or_else(|| Error::Data("evaluation set is empty".into()))?;
    let n = first.future_frames();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = ChamferSettings {
        cap: match variant {
            Variant::Sampled { cap } => Some(cap),
            Variant::FullScale => None,
        },
        seed,
    };
    let mut valid_sum = vec![0.0; n];
    let mut all_sum = vec![0.0; n];
    let mut chamfer_sum = vec![0.0; n];
    let mut empty = vec![0; n];
    for sample in samples {
        if sample.future_frames() != n {
            return Err(Error::Data("samples disagree on the number of future frames".into()));
        }
        let pred = predictor.predict(sample)?;
        if pred.ranges.len() != n || pred.mask_probs.len() != n {
            return Err(Error::Data(format!("predictor returned {} steps, expected {n}", pred.ranges.len())));
        }
        for k in 0..n {
            let gt = &sample.future[k];
            let (mut abs, mut count) = (0.0, 0usize);
            for ((&p, &r), &ok) in pred.ranges[k].data.iter().zip(&gt.range).zip(&gt.valid) {
                if ok {
                    abs += (p * sensor.max_range - r).abs();
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Domain(format!(
                    "sample {}@{} has no valid pixel at step {}",
                    sample.sequence,
                    sample.start,
                    k + 1
                )));
            }
            valid_sum[k] += abs / count as f64;
            all_sum[k] += abs / gt.range.len() as f64;
            let cloud = unproject(gt, sensor);
            let step = step_chamfer(&pred.ranges[k], &pred.mask_probs[k], &cloud, sensor, settings, &mut rng)?;
            if step.empty_prediction {
                empty[k] += 1;
            }
            chamfer_sum[k] += step.value;
        }
    }
    let count = samples.len() as f64;
    let avg = |v: Vec<f64>| v.into_iter().map(|x| x / count).collect::<Vec<_>>();
    let (range_loss_valid, range_loss_all, chamfer) = (avg(valid_sum), avg(all_sum), avg(chamfer_sum));
    Ok(EvalReport {
        variant: variant.label().to_string(),
        sample_cap: settings.cap,
        samples: samples.len(),
        prediction_steps: n,
        mean_range_loss_valid: mean(&range_loss_valid),
        mean_range_loss_all: mean(&range_loss_all),
        mean_chamfer: mean(&chamfer),
        range_loss_valid,
        range_loss_all,
        chamfer,
        empty_predictions: empty,
    })
}

impl EvalReport {
    /// Text table: one row per prediction step, then the mean.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let cap = self.sample_cap.map_or(String::new(), |c| format!(", cap {c} points"));
        writeln!(out, "variant: {} ({} samples{cap})", self.variant, self.samples).unwrap();
        writeln!(
            out,
            "{:<16}{:>22}{:>22}{:>16}{:>8}",
            "Prediction Step", "Range loss [m] valid", "Range loss [m] all", "Chamfer [m^2]", "empty"
        )
        .unwrap();
        for k in 0..self.prediction_steps {
            writeln!(
                out,
                "{:<16}{:>22.6}{:>22.6}{:>16.6}{:>8}",
                k + 1,
                self.range_loss_valid[k],
                self.range_loss_all[k],
                self.chamfer[k],
                self.empty_predictions[k]
            )
            .unwrap();
        }
        writeln!(
            out,
            "{:<16}{:>22.6}{:>22.6}{:>16.6}{:>8}",
            "Mean",
            self.mean_range_loss_valid,
            self.mean_range_loss_all,
            self.mean_chamfer,
            self.empty_predictions.iter().sum::<usize>()
        )
        .unwrap();
        out
    }

    /// `key=value` lines, one per table cell.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        let v = &self.variant;
        for k in 0..self.prediction_steps {
            let s = k + 1;
            writeln!(out, "{v}.step{s}.range_loss_valid_m={}", self.range_loss_valid[k]).unwrap();
            writeln!(out, "{v}.step{s}.range_loss_all_m={}", self.range_loss_all[k]).unwrap();
            writeln!(out, "{v}.step{s}.chamfer_m2={}", self.chamfer[k]).unwrap();
            writeln!(out, "{v}.step{s}.empty_predictions={}", self.empty_predictions[k]).unwrap();
        }
        writeln!(out, "{v}.mean.range_loss_valid_m={}", self.mean_range_loss_valid).unwrap();
        writeln!(out, "{v}.mean.range_loss_all_m={}", self.mean_range_loss_all).unwrap();
        writeln!(out, "{v}.mean.chamfer_m2={}", self.mean_chamfer).unwrap();
        writeln!(out, "{v}.samples={}", self.samples).unwrap();
        out
    }
}

/// Planar poses, one per time step, meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(poses: Vec<[f64; 2]>) -> Result<Self> {
        if poses.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("trajectory has non-finite poses".into()));
        }
        Ok(Self { poses })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Squared distance per step, square meters.
    pub per_step: Vec<f64>,
    pub mean: f64,
}

pub fn pose_error(pred: &Trajectory, gt: &Trajectory) -> Result<PoseError> {
    if pred.poses.len() != gt.poses.len() {
        return Err(Error::Data(format!(
            "trajectories differ in length: {} vs {}",
            pred.poses.len(),
            gt.poses.len()
        )));
    }
    if pred.poses.is_empty() {
        return Err(Error::Data("empty trajectories".into()));
    }
    let per_step: Vec<f64> = pred
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .collect();
    Ok(PoseError {
        mean: mean(&per_step),
        per_step,
    })
}
