//! Training objectives.
//!
//! Every loss has a plain evaluation on grids and a graph form used during
//! training; both share the same value code so they cannot drift apart.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rangecast_tensor::{sigmoid, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_mask, chamfer_match, unproject, Grid, PointCloud, RangeImage, SensorModel};
use crate::network::{ForwardOutput, PredictionOutput};

/// Probability clamp inside the cross-entropy.
pub const MASK_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Normalized range units.
    pub range_loss: f64,
    /// Nats.
    pub mask_loss: f64,
    /// Square meters.
    pub chamfer_loss: f64,
    pub total: f64,
    pub alpha_c: f64,
}

impl LossBreakdown {
    fn new(range_loss: f64, mask_loss: f64, chamfer_loss: f64, alpha_c: f64) -> Self {
        Self {
            range_loss,
            mask_loss,
            chamfer_loss,
            total: range_loss + mask_loss + alpha_c * chamfer_loss,
            alpha_c,
        }
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!("{what}: {a} predictions vs {b} targets")));
    }
    Ok(())
}

/// Mean absolute error over valid target pixels, with its gradient.
pub fn range_loss_and_grad(pred: &[f64], target: &[f64], valid: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_len("range loss", pred.len(), target.len())?;
    check_len("range loss", pred.len(), valid.len())?;
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Domain("range loss has no valid target pixel".into()));
    }
    let n = count as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .zip(valid)
        .map(|((&p, &t), &ok)| {
            if !ok {
                return 0.0;
            }
            sum += (p - t).abs();
            if p > t {
                1.0 / n
            } else if p < t {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

pub fn range_loss(pred: &[f64], target: &[f64], valid: &[bool]) -> Result<f64> {
    Ok(range_loss_and_grad(pred, target, valid)?.0)
}

/// Binary cross-entropy of clamped probabilities, averaged over all pixels.
pub fn mask_loss(prob: &[f64], target: &[bool]) -> Result<f64> {
    check_len("mask loss", prob.len(), target.len())?;
    if prob.is_empty() {
        return Err(Error::Domain("mask loss of an empty grid".into()));
    }
    let sum: f64 = prob
        .iter()
        .zip(target)
        .map(|(&p, &m)| {
            let p = p.clamp(MASK_EPS, 1.0 - MASK_EPS);
            if m {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / prob.len() as f64)
}

/// Cross-entropy from logits, with the gradient w.r.t. the logits.
pub fn mask_loss_and_logit_grad(logit: &[f64], target: &[bool]) -> Result<(f64, Vec<f64>)> {
    let prob: Vec<f64> = logit.iter().map(|&z| sigmoid(z)).collect();
    let value = mask_loss(&prob, target)?;
    let n = prob.len() as f64;
    let grad = prob
        .iter()
        .zip(target)
        .map(|(&p, &m)| {
            if p <= MASK_EPS || p >= 1.0 - MASK_EPS {
                0.0
            } else {
                (p - if m { 1.0 } else { 0.0 }) / n
            }
        })
        .collect();
    Ok((value, grad))
}

/// Chamfer evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct ChamferSettings {
    /// Random subsample of both clouds to at most this many points.
    pub cap: Option<usize>,
    pub seed: u64,
}


/// Result of one step's Chamfer evaluation.
#[derive(Clone, Debug)]
pub struct StepChamfer {
    pub value: f64,
    /// The prediction had no valid point; `value` is the penalty.
    pub empty_prediction: bool,
    /// d value / d normalized range, per pixel of the step.
    pub grad: Vec<f64>,
}

fn subsample(points: &[[f64; 3]], cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cap {
        Some(k) if k < points.len() => {
            let mut idx = sample(rng, points.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..points.len()).collect(),
    }
}

/// Chamfer distance between the masked, back-projected prediction of one
/// step (range in normalized units, mask as probabilities) and a target
/// cloud. An empty prediction scores `max_range^2` with zero gradient.
pub fn step_chamfer(
    range: &Grid,
    mask_prob: &Grid,
    target: &PointCloud,
    sensor: &SensorModel,
    settings: ChamferSettings,
    rng: &mut ChaCha8Rng,
) -> Result<StepChamfer> {
    if target.is_empty() {
        return Err(Error::Domain("Chamfer target cloud is empty".into()));
    }
    let max_range = sensor.max_range;
    let meters = Grid {
        height: range.height,
        width: range.width,
        data: range.data.iter().map(|&x| x * max_range).collect(),
    };
    let img = apply_mask(&meters, mask_prob, max_range)?;
    let mut grad = vec![0.0; range.data.len()];
    let pixels: Vec<usize> = (0..img.valid.len()).filter(|&i| img.valid[i]).collect();
    if pixels.is_empty() {
        return Ok(StepChamfer {
            value: max_range * max_range,
            empty_prediction: true,
            grad,
        });
    }
    let cloud = unproject(&img, sensor);
    let pick_pred = subsample(&cloud.points, settings.cap, rng);
    let pick_gt = subsample(&target.points, settings.cap, rng);
    let a: Vec<[f64; 3]> = pick_pred.iter().map(|&i| cloud.points[i]).collect();
    let b: Vec<[f64; 3]> = pick_gt.iter().map(|&i| target.points[i]).collect();
    let m = chamfer_match(&a, &b)?;

    // dC/dp for each predicted point, then chain through p = r * dir.
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut dp = vec![[0.0; 3]; a.len()];
    for (i, &j) in m.a_to_b.iter().enumerate() {
        for k in 0..3 {
            dp[i][k] += 2.0 * (a[i][k] - b[j][k]) / na;
        }
    }
    for (j, &i) in m.b_to_a.iter().enumerate() {
        for k in 0..3 {
            dp[i][k] += 2.0 * (a[i][k] - b[j][k]) / nb;
        }
    }
    for (slot, &ci) in pick_pred.iter().enumerate() {
        let pixel = pixels[ci];
        let dir = sensor.pixel_ray(pixel / range.width, pixel % range.width);
        let dot: f64 = (0..3).map(|k| dp[slot][k] * dir[k]).sum();
        grad[pixel] = max_range * dot;
    }
    Ok(StepChamfer {
        value: m.value,
        empty_prediction: false,
        grad,
    })
}

/// Mean Chamfer distance over the prediction steps.
pub fn chamfer_loss(pred: &PredictionOutput, targets: &[PointCloud], sensor: &SensorModel) -> Result<f64> {
    check_len("Chamfer loss", pred.ranges.len(), targets.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sum = 0.0;
    for ((r, m), t) in pred.ranges.iter().zip(&pred.mask_probs).zip(targets) {
        sum += step_chamfer(r, m, t, sensor, ChamferSettings::default(), &mut rng)?.value;
    }
    Ok(sum / targets.len() as f64)
}

/// Loss breakdown of one prediction against its ground-truth future frames
/// (meters).
pub fn combined_loss(
    pred: &PredictionOutput,
    future: &[RangeImage],
    sensor: &SensorModel,
    alpha_c: f64,
) -> Result<LossBreakdown> {
    check_len("combined loss", pred.ranges.len(), future.len())?;
    let targets = Targets::from_frames(future.iter(), sensor)?;
    let range: Vec<f64> = pred.ranges.iter().flat_map(|g| g.data.iter().copied()).collect();
    let prob: Vec<f64> = pred.mask_probs.iter().flat_map(|g| g.data.iter().copied()).collect();
    let lr = range_loss(&range, &targets.range, &targets.valid)?;
    let lm = mask_loss(&prob, &targets.valid)?;
    let lc = if alpha_c == 0.0 {
        0.0
    } else {
        chamfer_loss(pred, &targets.clouds, sensor)?
    };
    Ok(LossBreakdown::new(lr, lm, lc, alpha_c))
}

/// Ground truth flattened to match a network output batch.
#[derive(Clone, Debug)]
pub struct Targets {
    /// Normalized target ranges (0 where invalid).
    pub range: Vec<f64>,
    pub valid: Vec<bool>,
    /// One cloud per output image.
    pub clouds: Vec<PointCloud>,
    pub height: usize,
    pub width: usize,
}

impl Targets {
    /// Frames in the order of the output batch (step-major for network
    /// outputs).
    pub fn from_frames<'a>(frames: impl Iterator<Item = &'a RangeImage>, sensor: &SensorModel) -> Result<Self> {
        let mut t = Targets {
            range: Vec::new(),
            valid: Vec::new(),
            clouds: Vec::new(),
            height: sensor.height,
            width: sensor.width,
        };
        for img in frames {
            if (img.height, img.width) != (sensor.height, sensor.width) {
                return Err(Error::Data(format!(
                    "target frame {}x{} does not match sensor {}x{}",
                    img.height, img.width, sensor.height, sensor.width
                )));
            }
            t.range.extend(
                img.range
                    .iter()
                    .zip(&img.valid)
                    .map(|(&r, &ok)| if ok { r / sensor.max_range } else { 0.0 }),
            );
            t.valid.extend_from_slice(&img.valid);
            t.clouds.push(unproject(img, sensor));
        }
        Ok(t)
    }

    pub fn frames(&self) -> usize {
        self.clouds.len()
    }
}

/// Differentiable loss on a forward pass.
pub fn training_loss(
    out: &ForwardOutput,
    targets: &Targets,
    sensor: &SensorModel,
    alpha_c: f64,
    settings: ChamferSettings,
) -> Result<(Var, LossBreakdown)> {
    let range = out.range.value().data();
    let logit = out.mask_logit.value().data();
    let (lr, gr) = range_loss_and_grad(range, &targets.range, &targets.valid)?;
    let (lm, gm) = mask_loss_and_logit_grad(logit, &targets.valid)?;
    let shape = out.range.shape().to_vec();
    let mut total = out
        .range
        .scalar_fn(lr, Tensor::new(&shape, gr))
        .add(&out.mask_logit.scalar_fn(lm, Tensor::new(&shape, gm)));
    let mut lc = 0.0;
    if alpha_c != 0.0 {
        let (value, grad) = batched_chamfer(range, logit, targets, sensor, settings)?;
        lc = value;
        total = total.add(&out.range.scalar_fn(value, Tensor::new(&shape, grad)).scale(alpha_c));
    }
    let breakdown = LossBreakdown::new(lr, lm, lc, alpha_c);
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric { stage: "loss".into() });
    }
    Ok((total, breakdown))
}

fn batched_chamfer(
    range: &[f64],
    logit: &[f64],
    targets: &Targets,
    sensor: &SensorModel,
    settings: ChamferSettings,
) -> Result<(f64, Vec<f64>)> {
    let hw = targets.height * targets.width;
    let frames = targets.frames();
    check_len("Chamfer loss", range.len(), frames * hw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut grad = Vec::with_capacity(range.len());
    let mut sum = 0.0;
    for f in 0..frames {
        let r = Grid {
            height: targets.height,
            width: targets.width,
            data: range[f * hw..(f + 1) * hw].to_vec(),
        };
        let m = Grid {
            height: targets.height,
            width: targets.width,
            data: logit[f * hw..(f + 1) * hw].iter().map(|&z| sigmoid(z)).collect(),
        };
        let step = step_chamfer(&r, &m, &targets.clouds[f], sensor, settings, &mut rng)?;
        sum += step.value;
        grad.extend(step.grad.iter().map(|g| g / frames as f64));
    }
    Ok((sum / frames as f64, grad))
}
