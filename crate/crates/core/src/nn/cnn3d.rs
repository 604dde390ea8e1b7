use rangecast_tensor::Var;

use super::{Conv, Registry, Session};
use crate::error::{Error, Result};

/// Temporal branch for one pyramid level: a 3D convolution with kernel
/// `(M, 3, 3)` and no temporal padding, i.e. a 2D convolution over the
/// window stacked along channels, emitting `N` tensors of `C` channels.
pub struct Cnn3d {
    conv: Conv,
    channels: usize,
    past: usize,
    future: usize,
}

impl Cnn3d {
    pub fn new(prefix: &str, channels: usize, past: usize, future: usize) -> Self {
        Self {
            conv: Conv::same3(format!("{prefix}.conv"), channels * past, channels * future, 1),
            channels,
            past,
            future,
        }
    }

    pub fn register(&self, reg: &mut Registry) {
        self.conv.register(reg);
    }

    pub fn forward(&self, s: &Session, window: &[Var]) -> Result<Vec<Var>> {
        if window.len() != self.past {
            return Err(Error::config(
                "model.past_frames",
                format!("3D-CNN built for {} steps, got {}", self.past, window.len()),
            ));
        }
        let stacked = Var::stack_temporal(window);
        let out = self.conv.forward(s, &stacked);
        Ok((0..self.future)
            .map(|n| out.narrow(1, n * self.channels, self.channels))
            .collect())
    }
}
