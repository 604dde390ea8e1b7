use rangecast_tensor::Var;

use super::{BatchNorm, Conv, ConvT, Registry, Session, LEAKY_SLOPE};
use crate::error::{Error, Result};

struct UpBlock {
    level: usize,
    up: ConvT,
    bn: BatchNorm,
    fuse: Conv,
}

/// Mirror of the encoder. Starting from the deepest level, each block
/// upsamples, normalizes, concatenates the next shallower level's feature
/// and fuses back down to that level's width. A final 3x3 conv emits the
/// range and mask-logit channels.
pub struct ConvDecoder {
    base_channels: usize,
    blocks: Vec<UpBlock>,
    head: Conv,
}

impl ConvDecoder {
    pub fn new(base_channels: usize, levels: usize) -> Self {
        let blocks = (1..=levels)
            .rev()
            .map(|l| {
                let c = base_channels << l;
                let skip = if l > 1 { base_channels << (l - 1) } else { 0 };
                UpBlock {
                    level: l,
                    up: ConvT {
                        name: format!("decoder.l{l}.up"),
                        cin: c,
                        cout: c,
                        stride: (2, 4),
                    },
                    bn: BatchNorm {
                        name: format!("decoder.l{l}.bn"),
                        channels: c,
                    },
                    fuse: Conv::same3(format!("decoder.l{l}.fuse"), c + skip, base_channels << (l - 1), 1),
                }
            })
            .collect();
        Self {
            base_channels,
            blocks,
            head: Conv::same3("decoder.head", base_channels, 2, 1),
        }
    }

    pub fn register(&self, reg: &mut Registry) {
        for b in &self.blocks {
            b.up.register(reg);
            b.bn.register(reg);
            b.fuse.register(reg);
        }
        self.head.register(reg);
    }

    /// `levels[l - 1]` is the level-`l` input `(B, C_l, H_l, W_l)` for
    /// `l = 1..=L`. Returns `(B, 2, H, W)`: channel 0 is range, channel 1 the
    /// mask logit.
    pub fn forward(&self, s: &Session, levels: &[Var]) -> Result<Var> {
        if levels.len() != self.blocks.len() {
            return Err(Error::config(
                "model.levels",
                format!("decoder has {} levels, got {} inputs", self.blocks.len(), levels.len()),
            ));
        }
        for (i, v) in levels.iter().enumerate() {
            let c = self.base_channels << (i + 1);
            if v.shape().len() != 4 || v.shape()[1] != c {
                return Err(Error::config(
                    "model",
                    format!("decoder level {} input {:?} should have {c} channels", i + 1, v.shape()),
                ));
            }
        }
        let mut x = levels[levels.len() - 1].clone();
        for b in &self.blocks {
            let y = b.bn.forward(s, &b.up.forward(s, &x)).leaky_relu(LEAKY_SLOPE);
            let joined = if b.level > 1 {
                let skip = &levels[b.level - 2];
                if skip.shape()[0] != y.shape()[0] || skip.shape()[2..] != y.shape()[2..] {
                    return Err(Error::config(
                        "model",
                        format!("decoder skip {:?} does not match upsampled {:?}", skip.shape(), y.shape()),
                    ));
                }
                Var::concat(&[y, skip.clone()], 1)
            } else {
                y
            };
            x = b.fuse.forward(s, &joined);
        }
        Ok(self.head.forward(s, &x))
    }
}
