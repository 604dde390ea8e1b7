//! Full forecaster: shared encoder, per-level temporal blocks, decoder.

use std::fmt;
use std::str::FromStr;

use rangecast_tensor::{sigmoid, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Grid;
use crate::nn::{
    ensure_finite, split_batch, Attention, AttentionMode, Cnn3d, ConvDecoder, ConvLstm, Encoder, LstmState, Mode,
    ParamSpec, ParamStore, Registry, Session,
};

/// How a pyramid level carries information from the past window to the
/// future steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalMode {
    /// Encoder/decoder Conv-LSTM pair with attention context.
    ConvLstm,
    /// Single spatio-temporal convolution emitting all future steps.
    Cnn3d,
    /// The last past frame's features, repeated for every future step.
    LastFrame,
}

impl fmt::Display for TemporalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ConvLstm => "conv-lstm",
            Self::Cnn3d => "3d-cnn",
            Self::LastFrame => "last-frame",
        })
    }
}

impl FromStr for TemporalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "conv-lstm" => Ok(Self::ConvLstm),
            "3d-cnn" => Ok(Self::Cnn3d),
            "last-frame" => Ok(Self::LastFrame),
            other => Err(Error::config(
                "model.temporal",
                format!("unknown mode `{other}` (conv-lstm, 3d-cnn, last-frame)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub past_frames: usize,
    pub future_frames: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub height: usize,
    pub width: usize,
    pub attention: AttentionMode,
    /// One entry per level `1..=levels`.
    pub temporal: Vec<TemporalMode>,
    pub reduction: usize,
    pub dilation: usize,
    pub lstm_layers: usize,
}

impl ModelConfig {
    /// Conv-LSTM on every level but the deepest, which uses the 3D-CNN.
    pub fn canonical_temporal(levels: usize) -> Vec<TemporalMode> {
        let mut t = vec![TemporalMode::ConvLstm; levels.saturating_sub(1)];
        t.push(TemporalMode::Cnn3d);
        t
    }

    /// Full-size configuration for 64-beam scans.
    pub fn full_size() -> Self {
        Self {
            past_frames: 5,
            future_frames: 5,
            levels: 4,
            base_channels: 16,
            height: 64,
            width: 2048,
            attention: AttentionMode::Full,
            temporal: Self::canonical_temporal(4),
            reduction: 16,
            dilation: 4,
            lstm_layers: 3,
        }
    }

    /// Desk-scale configuration.
    pub fn toy() -> Self {
        Self {
            past_frames: 3,
            future_frames: 3,
            levels: 2,
            base_channels: 8,
            height: 16,
            width: 64,
            temporal: Self::canonical_temporal(2),
            ..Self::full_size()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.past_frames", self.past_frames),
            ("model.future_frames", self.future_frames),
            ("model.base_channels", self.base_channels),
            ("model.reduction", self.reduction),
            ("model.dilation", self.dilation),
            ("model.lstm_layers", self.lstm_layers),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if !(2..=8).contains(&self.levels) {
            return Err(Error::config("model.levels", format!("must be in 2..=8, got {}", self.levels)));
        }
        if self.height == 0 || !self.height.is_multiple_of(1 << self.levels) {
            return Err(Error::config(
                "sensor.height",
                format!("{} is not a positive multiple of 2^{}", self.height, self.levels),
            ));
        }
        if self.width == 0 || !self.width.is_multiple_of(1 << (2 * self.levels)) {
            return Err(Error::config(
                "sensor.width",
                format!("{} is not a positive multiple of 4^{}", self.width, self.levels),
            ));
        }
        if self.temporal.len() != self.levels {
            return Err(Error::config(
                "model.temporal",
                format!("needs {} entries (one per level), got {}", self.levels, self.temporal.len()),
            ));
        }
        Ok(())
    }
}

enum LevelBlock {
    Lstm {
        encoder: ConvLstm,
        decoder: ConvLstm,
        attention: Attention,
    },
    Cnn3d(Cnn3d),
    LastFrame,
}

/// Raw network outputs batched step-major: rows `n*B..(n+1)*B` hold future
/// step `n`.
pub struct ForwardOutput {
    /// `(N*B, 1, H, W)`, normalized range units.
    pub range: Var,
    /// `(N*B, 1, H, W)`, pre-sigmoid.
    pub mask_logit: Var,
}

/// Prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionOutput {
    /// `N` grids in normalized range units.
    pub ranges: Vec<Grid>,
    /// `N` grids of mask probabilities.
    pub mask_probs: Vec<Grid>,
}

pub struct Network {
    config: ModelConfig,
    encoder: Encoder,
    levels: Vec<LevelBlock>,
    decoder: ConvDecoder,
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.height, config.width, config.base_channels, config.levels)?;
        let levels = config
            .temporal
            .iter()
            .enumerate()
            .map(|(i, mode)| {
                let l = i + 1;
                let c = config.channels(l);
                match mode {
                    TemporalMode::ConvLstm => LevelBlock::Lstm {
                        encoder: ConvLstm::new(&format!("lstm_enc.l{l}"), c, config.lstm_layers),
                        decoder: ConvLstm::new(&format!("lstm_dec.l{l}"), c, config.lstm_layers),
                        attention: Attention::new(
                            &format!("attention.l{l}"),
                            c,
                            config.attention,
                            config.reduction,
                            config.dilation,
                        ),
                    },
                    TemporalMode::Cnn3d => {
                        LevelBlock::Cnn3d(Cnn3d::new(&format!("cnn3d.l{l}"), c, config.past_frames, config.future_frames))
                    }
                    TemporalMode::LastFrame => LevelBlock::LastFrame,
                }
            })
            .collect();
        let decoder = ConvDecoder::new(config.base_channels, config.levels);
        Ok(Self {
            config,
            encoder,
            levels,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Every weight and buffer, in a fixed declaration order.
    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut reg = Registry::default();
        self.encoder.register(&mut reg);
        for level in &self.levels {
            match level {
                LevelBlock::Lstm {
                    encoder,
                    decoder,
                    attention,
                } => {
                    encoder.register(&mut reg);
                    decoder.register(&mut reg);
                    attention.register(&mut reg);
                }
                LevelBlock::Cnn3d(b) => b.register(&mut reg),
                LevelBlock::LastFrame => {}
            }
        }
        self.decoder.register(&mut reg);
        reg.into_specs()
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        ParamStore::initialize(&self.specs(), seed)
    }

    /// `past[t]` is frame `t` of the window, `(B, 1, H, W)`, oldest first.
    pub fn forward(&self, s: &Session, past: &[Var]) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if past.len() != cfg.past_frames {
            return Err(Error::config(
                "model.past_frames",
                format!("expected {} input frames, got {}", cfg.past_frames, past.len()),
            ));
        }
        let batch = past[0].shape()[0];
        for p in past {
            if p.shape() != [batch, 1, cfg.height, cfg.width] {
                return Err(Error::config(
                    "model",
                    format!("input frame {:?} does not match [{batch}, 1, {}, {}]", p.shape(), cfg.height, cfg.width),
                ));
            }
        }

        let pyramid = self.encoder.forward(s, &Var::concat(past, 0));
        ensure_finite(pyramid.last().expect("levels >= 1"), "encoder")?;

        let mut decoder_inputs = Vec::with_capacity(cfg.levels);
        for (i, block) in self.levels.iter().enumerate() {
            let l = i + 1;
            let feats = split_batch(&pyramid[l], cfg.past_frames);
            let steps = match block {
                LevelBlock::Lstm {
                    encoder,
                    decoder,
                    attention,
                } => self.lstm_level(s, l, &feats, encoder, decoder, attention)?,
                LevelBlock::Cnn3d(b) => b.forward(s, &feats)?,
                LevelBlock::LastFrame => vec![feats[cfg.past_frames - 1].clone(); cfg.future_frames],
            };
            let joined = Var::concat(&steps, 0);
            ensure_finite(&joined, format!("level {l} temporal block"))?;
            decoder_inputs.push(joined);
        }

        let out = self.decoder.forward(s, &decoder_inputs)?;
        ensure_finite(&out, "decoder")?;
        Ok(ForwardOutput {
            range: out.narrow(1, 0, 1),
            mask_logit: out.narrow(1, 1, 1),
        })
    }

    fn lstm_level(
        &self,
        s: &Session,
        level: usize,
        feats: &[Var],
        encoder: &ConvLstm,
        decoder: &ConvLstm,
        attention: &Attention,
    ) -> Result<Vec<Var>> {
        let mut state = LstmState::zeros(encoder.layers(), feats[0].shape());
        let mut hidden = Vec::with_capacity(feats.len());
        for f in feats {
            let (h, next) = encoder.step(s, f, &state)?;
            hidden.push(h);
            state = next;
        }
        let keys = attention.keys(s, &hidden)?;
        let mut context = attention.context(s, &keys, hidden.last().expect("M >= 1"))?;
        let mut outputs = Vec::with_capacity(self.config.future_frames);
        for _ in 0..self.config.future_frames {
            let (out, next) = decoder.step(s, &context, &state)?;
            state = next;
            context = attention.context(s, &keys, &out)?;
            outputs.push(out);
        }
        ensure_finite(&context, format!("level {level} attention"))?;
        Ok(outputs)
    }

    /// Inference on one window of normalized frames.
    pub fn predict(&self, store: &ParamStore, past: &[Grid]) -> Result<PredictionOutput> {
        let s = Session::new(store, Mode::Eval, false);
        let frames = past.iter().map(grid_input).collect::<Result<Vec<_>>>()?;
        let out = self.forward(&s, &frames)?;
        let (h, w) = (self.config.height, self.config.width);
        let to_grids = |t: &Tensor, f: &dyn Fn(f64) -> f64| -> Vec<Grid> {
            t.data()
                .chunks(h * w)
                .map(|c| Grid {
                    height: h,
                    width: w,
                    data: c.iter().map(|&v| f(v)).collect(),
                })
                .collect()
        };
        Ok(PredictionOutput {
            ranges: to_grids(out.range.value(), &|v| v),
            mask_probs: to_grids(out.mask_logit.value(), &sigmoid),
        })
    }
}

/// A grid as a `(1, 1, H, W)` constant.
pub fn grid_input(g: &Grid) -> Result<Var> {
    if g.data.len() != g.height * g.width {
        return Err(Error::Data("grid size does not match its dimensions".into()));
    }
    Ok(Var::constant(Tensor::new(&[1, 1, g.height, g.width], g.data.clone())))
}

/// Frames `t` of several samples batched as `(B, 1, H, W)`, one tensor per
/// past time step.
pub fn batch_inputs(past: &[&[Grid]]) -> Result<Vec<Var>> {
    let m = past.first().map_or(0, |p| p.len());
    (0..m)
        .map(|t| {
            let g0 = &past[0][t];
            let mut data = Vec::with_capacity(past.len() * g0.data.len());
            for sample in past {
                let g = &sample[t];
                if (g.height, g.width) != (g0.height, g0.width) {
                    return Err(Error::Data("samples in a batch differ in image size".into()));
                }
                data.extend_from_slice(&g.data);
            }
            Ok(Var::constant(Tensor::new(&[past.len(), 1, g0.height, g0.width], data)))
        })
        .collect()
}

/// Number of learnable scalars.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    let net = Network::new(config.clone())?;
    Ok(net
        .specs()
        .iter()
        .filter(|s| s.slot == crate::nn::Slot::Param)
        .map(ParamSpec::numel)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_past(cfg: &ModelConfig, seed: u64) -> Vec<Grid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.past_frames)
            .map(|_| Grid {
                height: cfg.height,
                width: cfg.width,
                data: (0..cfg.height * cfg.width)
                    .map(|_| if rng.gen_bool(0.1) { -1.0 } else { rng.gen_range(0.0..1.0) })
                    .collect(),
            })
            .collect()
    }

    fn conv(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k + cout
    }

    #[test]
    fn toy_parameter_count_closed_form() {
        let cfg = ModelConfig::toy();
        let (c0, c1, c2, m, n) = (8, 16, 32, 3, 3);
        let encoder = conv(1, c0, 9)
            + conv(c0, c0, 9) + 2 * c0 + conv(c0, c1, 8)
            + conv(c1, c1, 9) + 2 * c1 + conv(c1, c2, 8);
        let lstm = 3 * conv(2 * c1, 4 * c1, 9);
        let hidden = (2 * c1 / 16).max(1);
        let attention = 2 * conv(c1, c1, 1)
            + conv(2 * c1, hidden, 1) + conv(hidden, c1, 1)
            + conv(2 * c1, hidden, 1) + 2 * conv(hidden, hidden, 9) + conv(hidden, 1, 1);
        let cnn3d = conv(c2 * m, c2 * n, 9);
        let decoder = (c2 * c2 * 8 + c2) + 2 * c2 + conv(c2 + c1, c1, 9)
            + (c1 * c1 * 8 + c1) + 2 * c1 + conv(c1, c0, 9)
            + conv(c0, 2, 9);
        let expected = encoder + 2 * lstm + attention + cnn3d + decoder;
        assert_eq!(parameter_count(&cfg).unwrap(), expected);
        assert_eq!(parameter_count(&cfg).unwrap(), parameter_count(&cfg).unwrap());
        let net = Network::new(cfg).unwrap();
        assert_eq!(net.init(0).num_params(), expected);
    }

    #[test]
    fn doubling_base_channels_roughly_quadruples() {
        let small = ModelConfig {
            base_channels: 8,
            ..ModelConfig::toy()
        };
        let big = ModelConfig {
            base_channels: 16,
            ..ModelConfig::toy()
        };
        let ratio = parameter_count(&big).unwrap() as f64 / parameter_count(&small).unwrap() as f64;
        assert!((3.5..4.1).contains(&ratio), "{ratio}");
    }

    #[test]
    fn toy_forward_shapes_and_bounds() {
        let cfg = ModelConfig::toy();
        let net = Network::new(cfg.clone()).unwrap();
        let store = net.init(1);
        let out = net.predict(&store, &random_past(&cfg, 2)).unwrap();
        assert_eq!(out.ranges.len(), 3);
        assert_eq!(out.mask_probs.len(), 3);
        for g in out.ranges.iter().chain(&out.mask_probs) {
            assert_eq!((g.height, g.width), (16, 64));
        }
        assert!(out.mask_probs.iter().flat_map(|g| &g.data).all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(out, net.predict(&store, &random_past(&cfg, 2)).unwrap());
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: &dyn Fn(&mut ModelConfig), key: &str| {
            let mut cfg = ModelConfig::toy();
            f(&mut cfg);
            match cfg.validate() {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{other:?}"),
            }
        };
        bad(&|c| c.past_frames = 0, "model.past_frames");
        bad(&|c| c.levels = 1, "model.levels");
        bad(&|c| c.height = 10, "sensor.height");
        bad(&|c| c.width = 40, "sensor.width");
        bad(&|c| c.temporal.pop().map(|_| ()).unwrap_or(()), "model.temporal");
    }

    #[test]
    fn wrong_input_count() {
        let cfg = ModelConfig::toy();
        let net = Network::new(cfg.clone()).unwrap();
        let store = net.init(1);
        let past = random_past(&cfg, 2);
        assert!(matches!(net.predict(&store, &past[..2]), Err(Error::Config { .. })));
    }

    #[test]
    fn ablation_layouts_run() {
        let layouts = [
            vec![TemporalMode::LastFrame, TemporalMode::Cnn3d],
            vec![TemporalMode::ConvLstm, TemporalMode::ConvLstm],
            vec![TemporalMode::Cnn3d, TemporalMode::Cnn3d],
        ];
        for temporal in layouts {
            for attention in AttentionMode::ALL {
                let cfg = ModelConfig {
                    temporal: temporal.clone(),
                    attention,
                    ..ModelConfig::toy()
                };
                let net = Network::new(cfg.clone()).unwrap();
                let out = net.predict(&net.init(0), &random_past(&cfg, 1)).unwrap();
                assert_eq!(out.ranges.len(), cfg.future_frames);
            }
        }
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in [TemporalMode::ConvLstm, TemporalMode::Cnn3d, TemporalMode::LastFrame] {
            assert_eq!(m.to_string().parse::<TemporalMode>().unwrap(), m);
        }
    }
}
