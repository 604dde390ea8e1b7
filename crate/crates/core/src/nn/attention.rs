use std::fmt;
use std::str::FromStr;

use rangecast_tensor::Var;
use serde::{Deserialize, Serialize};

use super::{Conv, Registry, Session};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    Full,
    ChannelOnly,
    SpatialOnly,
    /// Plain sum of the window's features.
    None,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [Self::Full, Self::ChannelOnly, Self::SpatialOnly, Self::None];

    fn channel(self) -> bool {
        matches!(self, Self::Full | Self::ChannelOnly)
    }

    fn spatial(self) -> bool {
        matches!(self, Self::Full | Self::SpatialOnly)
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::ChannelOnly => "channel-only",
            Self::SpatialOnly => "spatial-only",
            Self::None => "none",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::config("model.attention", format!("unknown mode `{s}` (full, channel-only, spatial-only, none)")))
    }
}

/// Keys of one attention call: the window's features batched as
/// `(M*B, C, H, W)` and their `W_f` projection, computed once and reused for
/// every query.
#[derive(Clone)]
pub struct AttentionKeys {
    feats: Var,
    projected: Option<Var>,
    steps: usize,
}

impl AttentionKeys {
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Context from a window of feature tensors and a query tensor.
///
/// The joint embedding `J = relu([W_f f, W_g g])` feeds a channel branch
/// (global pooling and a two-layer 1x1 MLP) and a spatial branch (1x1
/// reduction, two dilated 3x3 convs, 1x1 to one channel). The map is the
/// sigmoid of their product, and the context is the sum of the
/// map-weighted features.
pub struct Attention {
    mode: AttentionMode,
    channels: usize,
    w_f: Conv,
    w_g: Conv,
    fc1: Conv,
    fc2: Conv,
    reduce: Conv,
    dil1: Conv,
    dil2: Conv,
    out: Conv,
}

impl Attention {
    pub fn new(prefix: &str, channels: usize, mode: AttentionMode, reduction: usize, dilation: usize) -> Self {
        let joint = 2 * channels;
        let hidden = (joint / reduction.max(1)).max(1);
        let name = |s: &str| format!("{prefix}.{s}");
        Self {
            mode,
            channels,
            w_f: Conv::pointwise(name("w_f"), channels, channels),
            w_g: Conv::pointwise(name("w_g"), channels, channels),
            fc1: Conv::pointwise(name("channel.fc1"), joint, hidden),
            fc2: Conv::pointwise(name("channel.fc2"), hidden, channels),
            reduce: Conv::pointwise(name("spatial.reduce"), joint, hidden),
            dil1: Conv::same3(name("spatial.dil1"), hidden, hidden, dilation),
            dil2: Conv::same3(name("spatial.dil2"), hidden, hidden, dilation),
            out: Conv::pointwise(name("spatial.out"), hidden, 1),
        }
    }

    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    pub fn register(&self, reg: &mut Registry) {
        if self.mode == AttentionMode::None {
            return;
        }
        self.w_f.register(reg);
        self.w_g.register(reg);
        if self.mode.channel() {
            self.fc1.register(reg);
            self.fc2.register(reg);
        }
        if self.mode.spatial() {
            for c in [&self.reduce, &self.dil1, &self.dil2, &self.out] {
                c.register(reg);
            }
        }
    }

    pub fn keys(&self, s: &Session, feats: &[Var]) -> Result<AttentionKeys> {
        let first = feats
            .first()
            .ok_or_else(|| Error::config("model.past_frames", "attention needs at least one feature tensor"))?;
        if first.shape().get(1) != Some(&self.channels) {
            return Err(Error::config(
                "model",
                format!("attention expects {} channels, got shape {:?}", self.channels, first.shape()),
            ));
        }
        if let Some(bad) = feats.iter().find(|f| f.shape() != first.shape()) {
            return Err(Error::config(
                "model",
                format!("attention features disagree: {:?} vs {:?}", bad.shape(), first.shape()),
            ));
        }
        let cat = Var::concat(feats, 0);
        let projected = (self.mode != AttentionMode::None).then(|| self.w_f.forward(s, &cat));
        Ok(AttentionKeys {
            feats: cat,
            projected,
            steps: feats.len(),
        })
    }

    /// The attention map for every window step, batched like the keys;
    /// `None` in mode `none`.
    pub fn map(&self, s: &Session, keys: &AttentionKeys, query: &Var) -> Result<Option<Var>> {
        let b = keys.feats.shape()[0] / keys.steps;
        let mut expected = keys.feats.shape().to_vec();
        expected[0] = b;
        if query.shape() != expected.as_slice() {
            return Err(Error::config(
                "model",
                format!("attention query {:?} does not match features {:?}", query.shape(), expected),
            ));
        }
        let Some(projected) = &keys.projected else {
            return Ok(None);
        };
        let gq = self.w_g.forward(s, query);
        let g_rep = Var::concat(&vec![gq; keys.steps], 0);
        let joint = Var::concat(&[projected.clone(), g_rep], 1).relu();
        let mc = self.mode.channel().then(|| {
            let pooled = joint.global_avg_pool();
            self.fc2.forward(s, &self.fc1.forward(s, &pooled).relu())
        });
        let ms = self.mode.spatial().then(|| {
            let r = self.reduce.forward(s, &joint).relu();
            let r = self.dil1.forward(s, &r).relu();
            let r = self.dil2.forward(s, &r).relu();
            self.out.forward(s, &r)
        });
        let pre = match (mc, ms) {
            (Some(c), Some(sp)) => c.mul(&sp),
            (Some(c), None) => c,
            (None, Some(sp)) => sp,
            (None, None) => unreachable!("mode none has no projected keys"),
        };
        Ok(Some(pre.sigmoid()))
    }

    /// `sum_tau f_tau * map_tau` (or the plain sum in mode `none`).
    pub fn context(&self, s: &Session, keys: &AttentionKeys, query: &Var) -> Result<Var> {
        let weighted = match self.map(s, keys, query)? {
            Some(m) => keys.feats.mul(&m),
            None => keys.feats.clone(),
        };
        let b = weighted.shape()[0] / keys.steps;
        let mut acc = weighted.narrow(0, 0, b);
        for t in 1..keys.steps {
            acc = acc.add(&weighted.narrow(0, t * b, b));
        }
        Ok(acc)
    }
}
