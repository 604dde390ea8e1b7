//! Differentiable building blocks.
//!
//! Blocks only describe structure (names, shapes, hyperparameters). Weights
//! live in a [`ParamStore`] keyed by canonical names of the form
//! `module.level.layer.param`, and a [`Session`] binds them to graph
//! variables for one forward pass.

mod attention;
mod cnn3d;
mod decoder;
mod encoder;
mod layers;
mod lstm;

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rangecast_tensor::{Tensor, Var};

use crate::error::{Error, Result};

pub use attention::{Attention, AttentionKeys, AttentionMode};
pub use cnn3d::Cnn3d;
pub use decoder::ConvDecoder;
pub use encoder::Encoder;
pub use layers::{BatchNorm, Conv, ConvT, LEAKY_SLOPE};
pub use lstm::{ConvLstm, LstmState};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Constant(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Learnable.
    Param,
    /// Non-learnable state (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub slot: Slot,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Collects parameter declarations from blocks.
#[derive(Default, Debug)]
pub struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    pub fn param(&mut self, name: String, shape: &[usize], init: Init) {
        self.push(name, shape, init, Slot::Param);
    }

    pub fn buffer(&mut self, name: String, shape: &[usize], init: Init) {
        self.push(name, shape, init, Slot::Buffer);
    }

    fn push(&mut self, name: String, shape: &[usize], init: Init, slot: Slot) {
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
            slot,
        });
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Named weights and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Draws every declared tensor from its initializer. Declaration order
    /// fixes the RNG stream, so the result depends only on specs and seed.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::default();
        for spec in specs {
            let t = match spec.init {
                Init::Uniform(b) => Tensor::from_fn(&spec.shape, |_| rng.gen_range(-b..=b)),
                Init::Constant(c) => Tensor::full(&spec.shape, c),
            };
            store.insert(spec.slot, spec.name.clone(), t);
        }
        store
    }

    pub fn insert(&mut self, slot: Slot, name: String, value: Tensor) {
        match slot {
            Slot::Param => self.params.insert(name, value),
            Slot::Buffer => self.buffers.insert(name, value),
        };
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Verifies that the store holds exactly the declared tensors.
    pub fn check(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let found = match spec.slot {
                Slot::Param => self.params.get(&spec.name),
                Slot::Buffer => self.buffers.get(&spec.name),
            };
            match found {
                None => return Err(Error::config(&spec.name, "missing from weights")),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::config(
                        &spec.name,
                        format!("shape {:?} does not match expected {:?}", t.shape(), spec.shape),
                    ))
                }
                Some(_) => {}
            }
        }
        let declared = specs.len();
        let held = self.params.len() + self.buffers.len();
        if held != declared {
            let extra = self
                .params
                .keys()
                .chain(self.buffers.keys())
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::config(extra, "not part of this model"));
        }
        Ok(())
    }

    /// Folds batch statistics into the running buffers (unbiased variance).
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let corr = if u.count > 1 {
                u.count as f64 / (u.count - 1) as f64
            } else {
                1.0
            };
            let mean = self.buffers.get_mut(&format!("{}.running_mean", u.name)).expect("bn buffer");
            for (m, &b) in mean.data_mut().iter_mut().zip(&u.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            let var = self.buffers.get_mut(&format!("{}.running_var", u.name)).expect("bn buffer");
            for (v, &b) in var.data_mut().iter_mut().zip(&u.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * corr;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm; running statistics are collected.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// Batch statistics observed by one batch-norm call in training mode.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// One forward pass over a parameter store.
pub struct Session<'a> {
    store: &'a ParamStore,
    mode: Mode,
    track_grad: bool,
    bound: RefCell<BTreeMap<String, Var>>,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'a> Session<'a> {
    /// `track_grad` makes every parameter a gradient leaf; without it the
    /// pass builds no graph.
    pub fn new(store: &'a ParamStore, mode: Mode, track_grad: bool) -> Self {
        Self {
            store,
            mode,
            track_grad,
            bound: RefCell::default(),
            bn_updates: RefCell::default(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The graph variable for a parameter; repeated lookups share one leaf.
    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return v.clone();
        }
        let t = self
            .store
            .param(name)
            .unwrap_or_else(|| panic!("parameter {name} not in store"))
            .clone();
        let v = if self.track_grad {
            Var::parameter(t)
        } else {
            Var::constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        v
    }

    pub fn buffer(&self, name: &str) -> &Tensor {
        self.store
            .buffer(name)
            .unwrap_or_else(|| panic!("buffer {name} not in store"))
    }

    pub(crate) fn record_bn(&self, update: BnUpdate) {
        self.bn_updates.borrow_mut().push(update);
    }

    /// Parameters touched so far, by name.
    pub fn bound(&self) -> BTreeMap<String, Var> {
        self.bound.borrow().clone()
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Fails with a numeric error naming `stage` when `v` holds NaN or infinity.
pub fn ensure_finite(v: &Var, stage: impl Into<String>) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { stage: stage.into() })
    }
}

/// `len` slices of `B` rows each from a tensor batched as `len * B`.
pub fn split_batch(v: &Var, len: usize) -> Vec<Var> {
    let b = v.shape()[0] / len;
    (0..len).map(|i| v.narrow(0, i * b, b)).collect()
}
