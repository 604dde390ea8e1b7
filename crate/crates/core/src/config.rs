//! Run configuration: a flat `key = value` text format.
//!
//! ```text
//! # comment
//! sensor.height = 16
//! model.attention = channel-only
//! data.train = data/seq_00, data/seq_01
//! ```
//!
//! Every key may also be set through the environment as
//! `RANGECAST__SECTION__KEY` (e.g. `RANGECAST__TRAIN__LEARNING_RATE`,
//! `RANGECAST__SEED`); the environment wins over the file. Relative paths
//! are resolved against the directory holding the config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::geometry::SensorModel;
use crate::network::{ModelConfig, TemporalMode};
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "RANGECAST__";

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "global seed: weight init, shuffling, synthetic scenes, Chamfer subsampling"),
    ("output.dir", "run directory (checkpoints/, logs/, predictions/, reports/, figures/)"),
    ("sensor.fov_up", "upper vertical field-of-view edge, degrees"),
    ("sensor.fov_down", "lower vertical field-of-view edge, degrees (negative)"),
    ("sensor.height", "range image rows"),
    ("sensor.width", "range image columns"),
    ("sensor.max_range", "maximum range, meters"),
    ("model.past_frames", "input frames M"),
    ("model.future_frames", "predicted frames N"),
    ("model.levels", "pyramid depth L"),
    ("model.base_channels", "channels at level 0"),
    ("model.attention", "full | channel-only | spatial-only | none"),
    ("model.temporal", "comma list, one per level 1..=L: conv-lstm | 3d-cnn | last-frame"),
    ("model.reduction", "attention channel reduction ratio"),
    ("model.dilation", "attention spatial branch dilation"),
    ("model.lstm_layers", "stacked Conv-LSTM layers"),
    ("train.epochs_phase1", "epochs with the Chamfer weight 0"),
    ("train.epochs_phase2", "epochs with the Chamfer weight 1"),
    ("train.learning_rate", "initial learning rate"),
    ("train.lr_decay", "per-epoch multiplicative decay"),
    ("train.batch_size", "windows per step"),
    ("train.checkpoint_every", "periodic checkpoint interval in epochs, 0 = off"),
    ("train.grad_clip", "global gradient-norm clip, `none` = off"),
    ("train.max_steps", "hard step budget, `none` = off"),
    ("train.chamfer_cap", "points per cloud in the Chamfer term, `none` = all"),
    ("data.train", "comma list of training scan directories"),
    ("data.val", "comma list of validation scan directories"),
    ("data.test", "comma list of evaluation scan directories"),
    ("data.stride", "frames between consecutive windows"),
    ("eval.sample_cap", "points per cloud in the sampled evaluation variant"),
    ("eval.figure_samples", "windows rendered as figures by eval"),
    ("synth.dir", "where `synth` writes its sequences"),
    ("synth.sequences", "number of synthetic sequences"),
    ("synth.frames", "frames per synthetic sequence"),
    ("synth.random_boxes", "random boxes per scene"),
    ("synth.max_speed", "random box speed bound, meters per frame"),
    ("synth.ground_z", "ground plane height, `none` = no ground"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub sample_cap: usize,
    pub figure_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub dir: PathBuf,
    pub sequences: usize,
    pub frames: usize,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub sensor: SensorModel,
    /// `height`/`width` always mirror the sensor.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

/// What a command is about to do; decides which paths must exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Synth,
    Train,
    Eval,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sensor = SensorModel::kitti();
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            sensor,
            model: ModelConfig {
                height: sensor.height,
                width: sensor.width,
                ..ModelConfig::full_size()
            },
            train: TrainConfig::full_size(),
            data: DataConfig {
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
                stride: 1,
            },
            eval: EvalConfig {
                sample_cap: 65536,
                figure_samples: 1,
            },
            synth: SynthConfig {
                dir: PathBuf::from("data"),
                sequences: 2,
                frames: 30,
                scene: SceneSpec::default(),
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn paths(base: &Path, value: &str) -> Vec<PathBuf> {
    list(value).map(|p| base.join(p)).collect()
}

/// Splits `text` into key/value pairs, rejecting malformed lines and
/// duplicate keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")));
        };
        let key = k.trim().to_string();
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(key, "given more than once"));
        }
    }
    Ok(out)
}

/// Maps `RANGECAST__TRAIN__LEARNING_RATE` to `train.learning_rate`.
pub fn env_key(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    Some(rest.split("__").map(str::to_ascii_lowercase).collect::<Vec<_>>().join("."))
}

impl RunConfig {
    /// Builds a configuration from file text plus environment pairs, with
    /// relative paths resolved against `base`.
    pub fn from_sources(text: &str, env: impl IntoIterator<Item = (String, String)>, base: &Path) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for (var, value) in env {
            if let Some(key) = env_key(&var) {
                pairs.insert(key, value);
            }
        }
        let mut cfg = Self::default();
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.synth.dir = base.join(&cfg.synth.dir);
        let mut temporal = None;
        for (key, value) in &pairs {
            cfg.set(key, value, base, &mut temporal)?;
        }
        cfg.model.height = cfg.sensor.height;
        cfg.model.width = cfg.sensor.width;
        cfg.model.temporal = match temporal {
            Some(t) => t,
            None => ModelConfig::canonical_temporal(cfg.model.levels),
        };
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads `path` and the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_sources(&text, std::env::vars(), base)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path, temporal: &mut Option<Vec<TemporalMode>>) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output.dir" => self.output_dir = base.join(v),
            "sensor.fov_up" => self.sensor.fov_up = parse(key, v)?,
            "sensor.fov_down" => self.sensor.fov_down = parse(key, v)?,
            "sensor.height" => self.sensor.height = parse(key, v)?,
            "sensor.width" => self.sensor.width = parse(key, v)?,
            "sensor.max_range" => self.sensor.max_range = parse(key, v)?,
            "model.past_frames" => self.model.past_frames = parse(key, v)?,
            "model.future_frames" => self.model.future_frames = parse(key, v)?,
            "model.levels" => self.model.levels = parse(key, v)?,
            "model.base_channels" => self.model.base_channels = parse(key, v)?,
            "model.attention" => self.model.attention = v.parse()?,
            "model.temporal" => *temporal = Some(list(v).map(str::parse).collect::<Result<_>>()?),
            "model.reduction" => self.model.reduction = parse(key, v)?,
            "model.dilation" => self.model.dilation = parse(key, v)?,
            "model.lstm_layers" => self.model.lstm_layers = parse(key, v)?,
            "train.epochs_phase1" => self.train.epochs_phase1 = parse(key, v)?,
            "train.epochs_phase2" => self.train.epochs_phase2 = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.lr_decay" => self.train.lr_decay = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = optional(key, v)?,
            "train.max_steps" => self.train.max_steps = optional(key, v)?,
            "train.chamfer_cap" => self.train.chamfer_cap = optional(key, v)?,
            "data.train" => self.data.train = paths(base, v),
            "data.val" => self.data.val = paths(base, v),
            "data.test" => self.data.test = paths(base, v),
            "data.stride" => self.data.stride = parse(key, v)?,
            "eval.sample_cap" => self.eval.sample_cap = parse(key, v)?,
            "eval.figure_samples" => self.eval.figure_samples = parse(key, v)?,
            "synth.dir" => self.synth.dir = base.join(v),
            "synth.sequences" => self.synth.sequences = parse(key, v)?,
            "synth.frames" => self.synth.frames = parse(key, v)?,
            "synth.random_boxes" => self.synth.scene.random_boxes = parse(key, v)?,
            "synth.max_speed" => self.synth.scene.max_speed = parse(key, v)?,
            "synth.ground_z" => self.synth.scene.ground_z = optional(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Checks every invariant `purpose` relies on, including that the
    /// input directories exist. Touches nothing on disk.
    pub fn validate(&self, purpose: Purpose) -> Result<()> {
        self.sensor.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output.dir", "must not be empty"));
        }
        if purpose == Purpose::Synth {
            if self.synth.sequences == 0 {
                return Err(Error::config("synth.sequences", "must be >= 1"));
            }
            if self.synth.frames == 0 {
                return Err(Error::config("synth.frames", "must be >= 1"));
            }
            if !(self.synth.scene.max_speed.is_finite() && self.synth.scene.max_speed >= 0.0) {
                return Err(Error::config("synth.max_speed", "must be a finite value >= 0"));
            }
            return Ok(());
        }
        self.model.validate()?;
        if self.data.stride == 0 {
            return Err(Error::config("data.stride", "must be >= 1"));
        }
        let required: &[(&str, &Vec<PathBuf>)] = match purpose {
            Purpose::Train => {
                self.train.validate()?;
                &[("data.train", &self.data.train), ("data.val", &self.data.val)]
            }
            Purpose::Eval => {
                if self.eval.sample_cap == 0 {
                    return Err(Error::config("eval.sample_cap", "must be >= 1"));
                }
                &[("data.test", &self.data.test)]
            }
            Purpose::Synth => unreachable!(),
        };
        for (i, (key, dirs)) in required.iter().enumerate() {
            // The validation split is optional; the primary one is not.
            if i == 0 && dirs.is_empty() {
                return Err(Error::config(*key, "at least one scan directory is required"));
            }
            if let Some(missing) = dirs.iter().find(|d| !d.is_dir()) {
                return Err(Error::config(*key, format!("{} is not a directory", missing.display())));
            }
        }
        Ok(())
    }

    /// Effective configuration in the input format (paths as resolved).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let join = |p: &[PathBuf]| p.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ");
        put("seed", self.seed.to_string());
        put("output.dir", self.output_dir.display().to_string());
        put("sensor.fov_up", self.sensor.fov_up.to_string());
        put("sensor.fov_down", self.sensor.fov_down.to_string());
        put("sensor.height", self.sensor.height.to_string());
        put("sensor.width", self.sensor.width.to_string());
        put("sensor.max_range", self.sensor.max_range.to_string());
        let m = &self.model;
        put("model.past_frames", m.past_frames.to_string());
        put("model.future_frames", m.future_frames.to_string());
        put("model.levels", m.levels.to_string());
        put("model.base_channels", m.base_channels.to_string());
        put("model.attention", m.attention.to_string());
        put(
            "model.temporal",
            m.temporal.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "),
        );
        put("model.reduction", m.reduction.to_string());
        put("model.dilation", m.dilation.to_string());
        put("model.lstm_layers", m.lstm_layers.to_string());
        let t = &self.train;
        put("train.epochs_phase1", t.epochs_phase1.to_string());
        put("train.epochs_phase2", t.epochs_phase2.to_string());
        put("train.learning_rate", t.learning_rate.to_string());
        put("train.lr_decay", t.lr_decay.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.checkpoint_every", t.checkpoint_every.to_string());
        put("train.grad_clip", opt(t.grad_clip.map(|v| v.to_string())));
        put("train.max_steps", opt(t.max_steps.map(|v| v.to_string())));
        put("train.chamfer_cap", opt(t.chamfer_cap.map(|v| v.to_string())));
        put("data.train", join(&self.data.train));
        put("data.val", join(&self.data.val));
        put("data.test", join(&self.data.test));
        put("data.stride", self.data.stride.to_string());
        put("eval.sample_cap", self.eval.sample_cap.to_string());
        put("eval.figure_samples", self.eval.figure_samples.to_string());
        put("synth.dir", self.synth.dir.display().to_string());
        put("synth.sequences", self.synth.sequences.to_string());
        put("synth.frames", self.synth.frames.to_string());
        put("synth.random_boxes", self.synth.scene.random_boxes.to_string());
        put("synth.max_speed", self.synth.scene.max_speed.to_string());
        put("synth.ground_z", opt(self.synth.scene.ground_z.map(|v| v.to_string())));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AttentionMode;

    fn from(text: &str, env: &[(&str, &str)]) -> Result<RunConfig> {
        let env = env.iter().map(|(k, v)| (k.to_string(), v.to_string()));
        RunConfig::from_sources(text, env, Path::new("/base"))
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = from("", &[]).unwrap();
        assert_eq!(c.train, TrainConfig::full_size());
        assert_eq!((c.model.height, c.model.width), (64, 2048));
        assert_eq!(c.model.past_frames, 5);
    }

    #[test]
    fn file_values_and_comments() {
        let c = from(
            "# toy\nsensor.height = 16\nsensor.width=64\nmodel.levels = 2\nmodel.attention = spatial-only\n\
             model.temporal = last-frame, conv-lstm\ntrain.grad_clip = 5\ntrain.max_steps = none\n\
             data.train = a, /abs/b\nsynth.ground_z = none\n",
            &[],
        )
        .unwrap();
        assert_eq!((c.model.height, c.model.width), (16, 64));
        assert_eq!(c.model.attention, AttentionMode::SpatialOnly);
        assert_eq!(c.model.temporal, vec![TemporalMode::LastFrame, TemporalMode::ConvLstm]);
        assert_eq!(c.train.grad_clip, Some(5.0));
        assert_eq!(c.data.train, vec![PathBuf::from("/base/a"), PathBuf::from("/abs/b")]);
        assert_eq!(c.synth.scene.ground_z, None);
    }

    #[test]
    fn level_count_picks_the_canonical_temporal_layout() {
        let c = from("model.levels = 3", &[]).unwrap();
        assert_eq!(c.model.temporal, ModelConfig::canonical_temporal(3));
    }

    #[test]
    fn environment_overrides_file() {
        let c = from(
            "train.learning_rate = 0.1\nseed = 1",
            &[("RANGECAST__TRAIN__LEARNING_RATE", "0.5"), ("RANGECAST__SEED", "9"), ("HOME", "/x")],
        )
        .unwrap();
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!((c.seed, c.train.seed), (9, 9));
        assert_eq!(env_key("RANGECAST__SENSOR__FOV_UP").as_deref(), Some("sensor.fov_up"));
        assert_eq!(env_key("PATH"), None);
    }

    #[test]
    fn errors_name_the_key() {
        let key_of = |r: Result<RunConfig>| match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key_of(from("sensor.bogus = 1", &[])), "sensor.bogus");
        assert_eq!(key_of(from("sensor.height = tall", &[])), "sensor.height");
        assert_eq!(key_of(from("seed = 1\nseed = 2", &[])), "seed");
        assert_eq!(key_of(from("just words", &[])), "line 1");
        assert_eq!(key_of(from("", &[("RANGECAST__MODEL__NOPE", "1")])), "model.nope");
    }

    #[test]
    fn validation_checks_paths_without_touching_disk() {
        let dir = tempfile::tempdir().unwrap();
        let text = "sensor.height = 16\nsensor.width = 64\nmodel.levels = 2\ndata.train = present\ndata.val = missing\n";
        std::fs::create_dir(dir.path().join("present")).unwrap();
        let c = RunConfig::from_sources(text, [], dir.path()).unwrap();
        match c.validate(Purpose::Train) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "data.val"),
            other => panic!("{other:?}"),
        }
        match c.validate(Purpose::Eval) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "data.test"),
            other => panic!("{other:?}"),
        }
        c.validate(Purpose::Synth).unwrap();
        let bad = RunConfig::from_sources("sensor.width = 60\nmodel.levels = 2\nsensor.height = 16", [], dir.path()).unwrap();
        assert!(matches!(bad.validate(Purpose::Eval), Err(Error::Config { key, .. }) if key == "sensor.width"));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn text_form_round_trips() {
        let c = from("sensor.height = 16\nmodel.levels = 2\ntrain.chamfer_cap = 100\ndata.val = v", &[]).unwrap();
        let again = RunConfig::from_sources(&c.to_text(), [], Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let c = RunConfig::default();
        let text = c.to_text();
        let written: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let documented: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        assert_eq!(written, documented);
    }
}
