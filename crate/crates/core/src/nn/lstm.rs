use rangecast_tensor::{Tensor, Var};

use super::{ensure_finite, Conv, Registry, Session};
use crate::error::{Error, Result};

/// Hidden and cell tensors of every layer, each `(B, C, H, W)`.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl LstmState {
    pub fn zeros(layers: usize, shape: &[usize]) -> Self {
        let z = Var::constant(Tensor::zeros(shape));
        Self {
            h: vec![z.clone(); layers],
            c: vec![z; layers],
        }
    }

    pub fn top(&self) -> &Var {
        self.h.last().expect("state has at least one layer")
    }
}

/// Stacked Conv-LSTM. Each layer computes its four gates with one 3x3
/// circular conv over `[input, h]`; channel blocks are ordered i, f, o, g.
pub struct ConvLstm {
    pub channels: usize,
    gates: Vec<Conv>,
}

impl ConvLstm {
    pub fn new(prefix: &str, channels: usize, layers: usize) -> Self {
        let gates = (0..layers)
            .map(|k| Conv::same3(format!("{prefix}.layer{k}.gates"), 2 * channels, 4 * channels, 1))
            .collect();
        Self { channels, gates }
    }

    pub fn layers(&self) -> usize {
        self.gates.len()
    }

    pub fn register(&self, reg: &mut Registry) {
        self.gates.iter().for_each(|g| g.register(reg));
    }

    /// One time step; returns the top-layer hidden state and the new state.
    pub fn step(&self, s: &Session, x: &Var, state: &LstmState) -> Result<(Var, LstmState)> {
        if state.h.len() != self.layers() {
            return Err(Error::config(
                "model.lstm_layers",
                format!("state has {} layers, cell has {}", state.h.len(), self.layers()),
            ));
        }
        if state.h[0].shape() != x.shape() {
            return Err(Error::config(
                "model",
                format!("Conv-LSTM input {:?} does not match state {:?}", x.shape(), state.h[0].shape()),
            ));
        }
        let c = self.channels;
        let mut input = x.clone();
        let mut next = LstmState {
            h: Vec::with_capacity(self.layers()),
            c: Vec::with_capacity(self.layers()),
        };
        for (k, conv) in self.gates.iter().enumerate() {
            let z = conv.forward(s, &Var::concat(&[input, state.h[k].clone()], 1));
            let i = z.narrow(1, 0, c).sigmoid();
            let f = z.narrow(1, c, c).sigmoid();
            let o = z.narrow(1, 2 * c, c).sigmoid();
            let g = z.narrow(1, 3 * c, c).tanh();
            let cell = f.mul(&state.c[k]).add(&i.mul(&g));
            let h = o.mul(&cell.tanh());
            ensure_finite(&cell, format!("{}.cell", conv.name))?;
            next.c.push(cell);
            next.h.push(h.clone());
            input = h;
        }
        Ok((input, next))
    }
}
