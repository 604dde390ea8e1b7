use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rangecast::checkpoint::Checkpoint;
use rangecast::config::{Purpose, RunConfig};
use rangecast::data::{list_scans, read_scan_file, synth_sequence, window, write_kitti_scan, NormalizationSpec, ScanSequence, SequenceSample};
use rangecast::geometry::{apply_mask, spherical_project, unproject, Grid, RangeImage, SensorModel};
use rangecast::io::{ply_string, tensor_dump};
use rangecast::metrics::{evaluate, IdentityBaseline, NetworkPredictor, OracleBaseline, Predictor, Variant};
use rangecast::network::{parameter_count, ModelConfig, Network, PredictionOutput};
use rangecast::training::{self, write_record, CheckpointKind, LogRecord, TrainSink};
use serde_json::json;

use crate::outdir::{self, DirLock};
use crate::{figures, CliError};

/// Writes to stdout, ignoring a closed pipe (e.g. `| head`).
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

/// Failures while producing outputs are runtime aborts, not input errors.
fn during_run(e: rangecast::Error) -> CliError {
    match e {
        rangecast::Error::Io { .. } => CliError::runtime(e.to_string()),
        other => other.into(),
    }
}

fn load_config(path: &Path, purpose: Purpose) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::load(path)?;
    cfg.validate(purpose)?;
    Ok(cfg)
}

fn load_windows(
    key: &str,
    dirs: &[PathBuf],
    sensor: &SensorModel,
    model: &ModelConfig,
    stride: usize,
) -> Result<Vec<SequenceSample>, CliError> {
    let norm = NormalizationSpec::new(sensor.max_range)?;
    let mut out = Vec::new();
    for dir in dirs {
        let id = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let seq = ScanSequence::read_dir(id, dir, *sensor)?;
        out.extend(window(&seq, model.past_frames, model.future_frames, stride, norm)?);
    }
    if out.is_empty() && !dirs.is_empty() {
        return Err(CliError::input(format!(
            "configuration error at `{key}`: no sequence holds {} consecutive scans",
            model.past_frames + model.future_frames
        )));
    }
    Ok(out)
}

pub fn synth(config: &Path) -> Result<(), CliError> {
    let cfg = load_config(config, Purpose::Synth)?;
    let sequences = (0..cfg.synth.sequences as u64)
        .map(|k| synth_sequence(cfg.seed.wrapping_add(k), cfg.synth.frames, &cfg.sensor, &cfg.synth.scene))
        .collect::<rangecast::Result<Vec<_>>>()?;
    let lock = DirLock::acquire(&cfg.synth.dir)?;
    for (k, seq) in sequences.iter().enumerate() {
        let dir = lock.subdir(&format!("seq_{k:02}"))?;
        for (i, scan) in seq.scans.iter().enumerate() {
            outdir::write(&dir.join(format!("{i:06}.bin")), write_kitti_scan(scan))?;
        }
    }
    emit(&format!(
        "wrote {} sequences of {} scans to {}\n",
        sequences.len(),
        cfg.synth.frames,
        cfg.synth.dir.display()
    ));
    Ok(())
}

struct FileSink {
    log: BufWriter<File>,
    checkpoints: PathBuf,
}

impl TrainSink for FileSink {
    fn record(&mut self, record: &LogRecord) -> rangecast::Result<()> {
        let io = |e| rangecast::Error::io("logs/train.jsonl", e);
        write_record(&mut self.log, record).map_err(io)?;
        self.log.flush().map_err(io)?;
        if let LogRecord::Epoch(e) = record {
            let val = e.val_range_loss.map_or(String::from("-"), |v| format!("{v:.5}"));
            eprintln!(
                "epoch {:>4}  alpha_c {}  lr {:.3e}  range {:.5}  total {:.5}  val {val}",
                e.epoch + 1,
                e.alpha_c,
                e.lr,
                e.train_range_loss,
                e.train_total
            );
        }
        Ok(())
    }

    fn checkpoint(&mut self, kind: CheckpointKind, ckpt: &Checkpoint) -> rangecast::Result<()> {
        let name = match kind {
            CheckpointKind::Periodic => format!("epoch_{:04}.ckpt", ckpt.epoch),
            CheckpointKind::Best => "best.ckpt".into(),
            CheckpointKind::Last => "last.ckpt".into(),
        };
        ckpt.save(&self.checkpoints.join(name))
    }
}

pub fn train(config: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config, Purpose::Train)?;
    let net = Network::new(cfg.model.clone())?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    if let Some(c) = &resume {
        c.weights_for(&net)?;
        if c.sensor != cfg.sensor {
            return Err(CliError::input("configuration error at `sensor`: differs from the resumed checkpoint"));
        }
    }
    let s = cfg.data.stride;
    let train_set = load_windows("data.train", &cfg.data.train, &cfg.sensor, &cfg.model, s)?;
    let val_set = load_windows("data.val", &cfg.data.val, &cfg.sensor, &cfg.model, s)?;

    let lock = DirLock::acquire(&cfg.output_dir)?;
    let checkpoints = lock.subdir(outdir::CHECKPOINTS)?;
    let logs = lock.subdir(outdir::LOGS)?;
    outdir::write(&logs.join("config.txt"), cfg.to_text())?;
    let log_path = logs.join("train.jsonl");
    let log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| CliError::runtime(format!("opening {}: {e}", log_path.display())))?;
    let mut sink = FileSink {
        log: BufWriter::new(log),
        checkpoints,
    };
    eprintln!(
        "training on {} windows ({} validation), {} parameters",
        train_set.len(),
        val_set.len(),
        parameter_count(&cfg.model)?
    );
    let outcome =
        training::train(&net, &cfg.sensor, &cfg.train, &train_set, &val_set, resume, &mut sink).map_err(during_run)?;
    if let Some(abort) = outcome.abort {
        return Err(CliError::runtime(format!(
            "training aborted at epoch {} step {} (batch {}): {}; last good state in {}",
            abort.epoch,
            abort.step,
            abort.batch,
            abort.reason,
            cfg.output_dir.join(outdir::CHECKPOINTS).join("last.ckpt").display()
        )));
    }
    let last = outcome.last.history.last();
    emit(&format!(
        "finished {} epochs / {} steps; final train range loss {}; checkpoints in {}\n",
        outcome.last.epoch,
        outcome.last.step,
        last.map_or(String::from("-"), |e| format!("{:.6}", e.train_range_loss)),
        cfg.output_dir.join(outdir::CHECKPOINTS).display()
    ));
    Ok(())
}

fn masked(range: &Grid, mask: &Grid, max_range: f64) -> rangecast::Result<RangeImage> {
    let meters = Grid {
        height: range.height,
        width: range.width,
        data: range.data.iter().map(|r| r * max_range).collect(),
    };
    apply_mask(&meters, mask, max_range)
}

pub fn predict(checkpoint: &Path, input: &Path, output: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = Network::new(ckpt.model.clone())?;
    let weights = ckpt.weights_for(&net)?;
    let m = ckpt.model.past_frames;
    let files = list_scans(input)?;
    if files.len() < m {
        return Err(CliError::input(format!(
            "{} holds {} scans, the model needs {m}",
            input.display(),
            files.len()
        )));
    }
    let norm = NormalizationSpec::new(ckpt.sensor.max_range)?;
    let past = files[files.len() - m..]
        .iter()
        .map(|p| Ok(norm.normalize(&spherical_project(&read_scan_file(p)?, &ckpt.sensor)?)))
        .collect::<rangecast::Result<Vec<_>>>()?;
    let pred = net.predict(weights, &past)?;

    let lock = DirLock::acquire(output)?;
    let dir = lock.subdir(outdir::PREDICTIONS)?;
    let scheme = format!("{}; max_range={}", NormalizationSpec::SCHEME, ckpt.sensor.max_range);
    for (k, (range, mask)) in pred.ranges.iter().zip(&pred.mask_probs).enumerate() {
        let step = k + 1;
        outdir::write(&dir.join(format!("step_{step:02}.range.rct")), tensor_dump(range, &scheme))?;
        outdir::write(&dir.join(format!("step_{step:02}.mask.rct")), tensor_dump(mask, "probability"))?;
        let cloud = unproject(&masked(range, mask, ckpt.sensor.max_range)?, &ckpt.sensor);
        outdir::write(&dir.join(format!("step_{step:02}.ply")), ply_string(&cloud))?;
        emit(&format!("step {step}: {} points\n", cloud.len()));
    }
    Ok(())
}

pub enum EvalSource {
    Checkpoint(PathBuf),
    Identity,
    Oracle,
}

pub fn eval(config: &Path, source: EvalSource) -> Result<(), CliError> {
    let cfg = load_config(config, Purpose::Eval)?;
    let ckpt = match &source {
        EvalSource::Checkpoint(p) => Some(Checkpoint::load(p)?),
        _ => None,
    };
    let (model, sensor) = match &ckpt {
        Some(c) => (c.model.clone(), c.sensor),
        None => (cfg.model.clone(), cfg.sensor),
    };
    let samples = load_windows("data.test", &cfg.data.test, &sensor, &model, cfg.data.stride)?;
    let net = Network::new(model.clone())?;
    let (label, predictor): (&str, Box<dyn Predictor + '_>) = match &ckpt {
        Some(c) => (
            "network",
            Box::new(NetworkPredictor {
                net: &net,
                weights: c.weights_for(&net)?,
            }),
        ),
        None => match source {
            EvalSource::Oracle => (
                "oracle",
                Box::new(OracleBaseline {
                    norm: NormalizationSpec::new(sensor.max_range)?,
                }),
            ),
            _ => (
                "identity",
                Box::new(IdentityBaseline {
                    future_frames: model.future_frames,
                }),
            ),
        },
    };

    let sampled = evaluate(
        predictor.as_ref(),
        &samples,
        &sensor,
        Variant::Sampled {
            cap: cfg.eval.sample_cap,
        },
        cfg.seed,
    )?;
    let full = evaluate(predictor.as_ref(), &samples, &sensor, Variant::FullScale, cfg.seed)?;
    let shown: Vec<(usize, PredictionOutput)> = samples
        .iter()
        .take(cfg.eval.figure_samples)
        .enumerate()
        .map(|(i, s)| Ok((i, predictor.predict(s)?)))
        .collect::<rangecast::Result<_>>()?;

    let lock = DirLock::acquire(&cfg.output_dir)?;
    let reports = lock.subdir(outdir::REPORTS)?;
    let tables = format!("source: {label}\n\n{}\n{}", sampled.to_table(), full.to_table());
    outdir::write(&reports.join(format!("eval_{label}.txt")), &tables)?;
    outdir::write(
        &reports.join(format!("eval_{label}.records")),
        format!("{}{}", sampled.to_records(), full.to_records()),
    )?;
    let doc = json!({ "source": label, "sampled": sampled, "full_scale": full });
    outdir::write(
        &reports.join(format!("eval_{label}.json")),
        serde_json::to_vec_pretty(&doc).expect("report serializes"),
    )?;
    let figs = lock.subdir(outdir::FIGURES)?;
    for (i, pred) in &shown {
        for (k, truth) in samples[*i].future.iter().enumerate() {
            let img = masked(&pred.ranges[k], &pred.mask_probs[k], sensor.max_range)?;
            let fig = figures::comparison(&img, truth, sensor.max_range);
            figures::save(&fig, &figs.join(format!("{label}_sample{i:03}_step{}.png", k + 1)))?;
        }
    }
    emit(&tables);
    Ok(())
}

pub fn inspect(checkpoint: &Path) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let doc = json!({
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "model": ckpt.model,
        "sensor": ckpt.sensor,
        "train": ckpt.train,
        "parameters": ckpt.weights.num_params(),
        "optimizer_steps": ckpt.optimizer.as_ref().map(|o| o.steps),
        "history": ckpt.history,
    });
    emit(&format!("{}\n", serde_json::to_string_pretty(&doc).expect("manifest serializes")));
    Ok(())
}
