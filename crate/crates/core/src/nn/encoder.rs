use rangecast_tensor::{Conv2dSpec, Var};

use super::{BatchNorm, Conv, Registry, Session, LEAKY_SLOPE};
use crate::error::{Error, Result};

struct SubBlock {
    conv: Conv,
    bn: BatchNorm,
    down: Conv,
}

/// Shared per-frame encoder: a stem conv followed by `levels` sub-blocks,
/// each halving the height and quartering the width while doubling the
/// channel count.
pub struct Encoder {
    stem: Conv,
    blocks: Vec<SubBlock>,
}

impl Encoder {
    pub fn new(height: usize, width: usize, base_channels: usize, levels: usize) -> Result<Self> {
        if !height.is_multiple_of(1 << levels) {
            return Err(Error::config(
                "sensor.height",
                format!("{height} is not divisible by 2^{levels}"),
            ));
        }
        if !width.is_multiple_of(1 << (2 * levels)) {
            return Err(Error::config(
                "sensor.width",
                format!("{width} is not divisible by 4^{levels}"),
            ));
        }
        let stem = Conv::same3("encoder.stem", 1, base_channels, 1);
        let blocks = (1..=levels)
            .map(|l| {
                let cin = base_channels << (l - 1);
                SubBlock {
                    conv: Conv::same3(format!("encoder.l{l}.conv"), cin, cin, 1),
                    bn: BatchNorm {
                        name: format!("encoder.l{l}.bn"),
                        channels: cin,
                    },
                    down: Conv::new(format!("encoder.l{l}.down"), cin, 2 * cin, (2, 4), Conv2dSpec::strided(2, 4)),
                }
            })
            .collect();
        Ok(Self { stem, blocks })
    }

    pub fn register(&self, reg: &mut Registry) {
        self.stem.register(reg);
        for b in &self.blocks {
            b.conv.register(reg);
            b.bn.register(reg);
            b.down.register(reg);
        }
    }

    /// Feature pyramid for a batch of normalized range images `(B, 1, H, W)`:
    /// index 0 is the stem output, index `l` the output of sub-block `l`.
    pub fn forward(&self, s: &Session, x: &Var) -> Vec<Var> {
        let mut levels = Vec::with_capacity(self.blocks.len() + 1);
        let mut f = self.stem.forward(s, x);
        levels.push(f.clone());
        for b in &self.blocks {
            let y = b.bn.forward(s, &b.conv.forward(s, &f)).leaky_relu(LEAKY_SLOPE);
            f = b.down.forward(s, &y);
            levels.push(f.clone());
        }
        levels
    }
}
