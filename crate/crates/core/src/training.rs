//! Two-phase optimization loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rangecast_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::geometry::SensorModel;
use crate::losses::{range_loss, training_loss, ChamferSettings, LossBreakdown, Targets};
use crate::network::{batch_inputs, Network};
use crate::nn::{Mode, ParamStore, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epochs with the Chamfer term disabled.
    pub epochs_phase1: usize,
    /// Epochs with the Chamfer term weighted by 1.
    pub epochs_phase2: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Save a periodic checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Stop after this many optimization steps in total.
    pub max_steps: Option<usize>,
    /// Random subsample of both clouds in the Chamfer term.
    pub chamfer_cap: Option<usize>,
}

impl TrainConfig {
    pub fn full_size() -> Self {
        Self {
            epochs_phase1: 50,
            epochs_phase2: 10,
            learning_rate: 3e-4,
            lr_decay: 0.99,
            batch_size: 2,
            seed: 0,
            checkpoint_every: 1,
            grad_clip: None,
            max_steps: None,
            chamfer_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("train.lr_decay", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.epochs_phase1 + self.epochs_phase2 == 0 {
            return Err(Error::config("train.epochs_phase1", "at least one epoch is required"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config("train.grad_clip", "must be > 0"));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("train.max_steps", "must be >= 1"));
        }
        if self.chamfer_cap == Some(0) {
            return Err(Error::config("train.chamfer_cap", "must be >= 1"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_phase1 + self.epochs_phase2
    }

    /// Learning rate in effect during (0-based) epoch `k`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }

    /// Chamfer weight during epoch `k`.
    pub fn alpha_at(&self, epoch: usize) -> f64 {
        if epoch < self.epochs_phase1 {
            0.0
        } else {
            1.0
        }
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub steps: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - Self::BETA1.powi(t);
        let c2 = 1.0 - Self::BETA2.powi(t);
        for (name, g) in grads {
            let Some(p) = store.param_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * gi;
                *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Rescales gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha_c: f64,
    pub lr: f64,
    pub steps: usize,
    pub train_range_loss: f64,
    pub train_total: f64,
    pub val_range_loss: Option<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Epoch(EpochRecord),
    Abort {
        epoch: usize,
        step: usize,
        batch: usize,
        reason: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Periodic,
    Best,
    Last,
}

/// Receives the training log and checkpoints as they are produced.
pub trait TrainSink {
    fn record(&mut self, record: &LogRecord) -> Result<()>;
    fn checkpoint(&mut self, kind: CheckpointKind, ckpt: &Checkpoint) -> Result<()>;
}

/// Keeps everything in memory.
#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<LogRecord>,
    pub checkpoints: Vec<(CheckpointKind, usize)>,
}

impl TrainSink for MemorySink {
    fn record(&mut self, record: &LogRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, kind: CheckpointKind, ckpt: &Checkpoint) -> Result<()> {
        self.checkpoints.push((kind, ckpt.epoch));
        Ok(())
    }
}

/// Writes one JSON object per line.
pub fn write_record(out: &mut dyn Write, record: &LogRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Abort {
    pub epoch: usize,
    pub step: usize,
    pub batch: usize,
    pub reason: String,
}

pub struct TrainOutcome {
    /// State after the last successful step.
    pub last: Checkpoint,
    /// Lowest validation range loss (training range loss without a
    /// validation split).
    pub best: Checkpoint,
    pub abort: Option<Abort>,
}

struct StepOutput {
    loss: LossBreakdown,
    grads: BTreeMap<String, Tensor>,
    bn: Vec<crate::nn::BnUpdate>,
}

fn train_step(
    net: &Network,
    store: &ParamStore,
    sensor: &SensorModel,
    batch: &[&SequenceSample],
    alpha_c: f64,
    settings: ChamferSettings,
) -> Result<StepOutput> {
    let s = Session::new(store, Mode::Train, true);
    let past: Vec<&[crate::geometry::Grid]> = batch.iter().map(|b| b.past.as_slice()).collect();
    let out = net.forward(&s, &batch_inputs(&past)?)?;
    let n = net.config().future_frames;
    let frames = (0..n).flat_map(|k| batch.iter().map(move |b| &b.future[k]));
    let targets = Targets::from_frames(frames, sensor)?;
    let (total, loss) = training_loss(&out, &targets, sensor, alpha_c, settings)?;
    let g = total.backward();
    let mut grads = BTreeMap::new();
    for (name, var) in s.bound() {
        if let Some(t) = g.get(&var) {
            if !t.all_finite() {
                return Err(Error::Numeric {
                    stage: format!("gradient of {name}"),
                });
            }
            grads.insert(name, t.clone());
        }
    }
    Ok(StepOutput {
        loss,
        grads,
        bn: s.take_bn_updates(),
    })
}

/// Mean range loss (normalized units, valid-pixel denominator) of the
/// network on `samples` in inference mode.
pub fn mean_range_loss(net: &Network, store: &ParamStore, sensor: &SensorModel, samples: &[SequenceSample]) -> Result<f64> {
    let mut sum = 0.0;
    for sample in samples {
        let pred = net.predict(store, &sample.past)?;
        let targets = Targets::from_frames(sample.future.iter(), sensor)?;
        let range: Vec<f64> = pred.ranges.iter().flat_map(|g| g.data.iter().copied()).collect();
        sum += range_loss(&range, &targets.range, &targets.valid)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Runs the schedule from `resume` (or a fresh seeded initialization)
/// until all epochs or `max_steps` are done.
pub fn train(
    net: &Network,
    sensor: &SensorModel,
    config: &TrainConfig,
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    resume: Option<Checkpoint>,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (mut store, mut adam, mut epoch, mut step, mut history) = match resume {
        Some(c) => {
            c.weights_for(net)?;
            (c.weights, c.optimizer.unwrap_or_default(), c.epoch, c.step, c.history)
        }
        None => (net.init(config.seed), AdamState::default(), 0, 0, Vec::new()),
    };
    let snapshot = |store: &ParamStore, adam: &AdamState, epoch, step, history: &Vec<EpochRecord>| Checkpoint {
        model: net.config().clone(),
        sensor: *sensor,
        train: config.clone(),
        epoch,
        step,
        history: history.clone(),
        weights: store.clone(),
        optimizer: Some(adam.clone()),
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    let max_steps = config.max_steps.unwrap_or(usize::MAX);

    while epoch < config.total_epochs() && step < max_steps {
        let lr = config.lr_at(epoch);
        let alpha_c = config.alpha_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);

        let (mut range_sum, mut total_sum, mut steps_this_epoch) = (0.0, 0.0, 0);
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            if step >= max_steps {
                break;
            }
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let settings = ChamferSettings {
                cap: config.chamfer_cap,
                seed: config.seed.wrapping_add(step as u64),
            };
            let out = match train_step(net, &store, sensor, &batch, alpha_c, settings) {
                Ok(o) => o,
                Err(Error::Numeric { stage }) => {
                    let abort = Abort {
                        epoch,
                        step,
                        batch: batch_index,
                        reason: format!("non-finite values in {stage}"),
                    };
                    sink.record(&LogRecord::Abort {
                        epoch,
                        step,
                        batch: batch_index,
                        reason: abort.reason.clone(),
                    })?;
                    let last = snapshot(&store, &adam, epoch, step, &history);
                    sink.checkpoint(CheckpointKind::Last, &last)?;
                    let best = best.map(|b| b.1).unwrap_or_else(|| last.clone());
                    return Ok(TrainOutcome {
                        last,
                        best,
                        abort: Some(abort),
                    });
                }
                Err(e) => return Err(e),
            };
            let mut grads = out.grads;
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            adam.update(&mut store, &grads, lr);
            store.apply_bn_updates(&out.bn);
            step += 1;
            steps_this_epoch += 1;
            range_sum += out.loss.range_loss;
            total_sum += out.loss.total;
            sink.record(&LogRecord::Step {
                epoch,
                step,
                lr,
                loss: out.loss,
            })?;
        }

        let val = if val_set.is_empty() {
            None
        } else {
            Some(mean_range_loss(net, &store, sensor, val_set)?)
        };
        let denom = steps_this_epoch.max(1) as f64;
        let record = EpochRecord {
            epoch,
            alpha_c,
            lr,
            steps: steps_this_epoch,
            train_range_loss: range_sum / denom,
            train_total: total_sum / denom,
            val_range_loss: val,
        };
        sink.record(&LogRecord::Epoch(record.clone()))?;
        history.push(record.clone());
        epoch += 1;

        let score = val.unwrap_or(record.train_range_loss);
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            let ckpt = snapshot(&store, &adam, epoch, step, &history);
            sink.checkpoint(CheckpointKind::Best, &ckpt)?;
            best = Some((score, ckpt));
        }
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            sink.checkpoint(CheckpointKind::Periodic, &snapshot(&store, &adam, epoch, step, &history))?;
        }
    }

    let last = snapshot(&store, &adam, epoch, step, &history);
    sink.checkpoint(CheckpointKind::Last, &last)?;
    let best = best.map(|b| b.1).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { last, best, abort: None })
}
