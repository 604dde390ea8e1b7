//! Analytic gradients of blocks, losses and the whole network against
//! central finite differences. Shared by the gradient tests and the
//! acceptance suite; every check returns a short summary or the first
//! violation.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rangecast::data::{synth_sequence, window, NormalizationSpec, SceneSpec};
use rangecast::geometry::{Grid, PointCloud, SensorModel};
use rangecast::losses::{
    mask_loss_and_logit_grad, range_loss_and_grad, step_chamfer, training_loss, ChamferSettings, Targets,
};
use rangecast::network::{batch_inputs, ModelConfig, Network};
use rangecast::nn::{Attention, AttentionMode, Cnn3d, ConvLstm, LstmState, Mode, ParamStore, Registry, Session};
use rangecast_tensor::{Tensor, Var};

pub type Check = Result<String, String>;

pub const STEP: f64 = 1e-5;
pub const BLOCK_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Projects a block output onto a fixed random probe.
fn probe_sum(out: &Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.mul(&Var::constant(random(&mut rng, out.shape()))).sum()
}

/// Checks every parameter element of `store` for the scalar built by `loss`;
/// returns the number of elements and the worst relative error.
fn check_params(store: &ParamStore, tol: f64, loss: impl Fn(&Session) -> Var) -> Result<(usize, f64), String> {
    let s = Session::new(store, Mode::Eval, true);
    let grads = loss(&s).backward();
    let bound = s.bound();
    let (mut checked, mut worst) = (0, 0.0f64);
    for (name, t) in store.params() {
        let analytic = bound
            .get(name)
            .map(|v| grads.get_or_zeros(v))
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.numel() {
            let eval = |delta: f64| {
                let mut st = store.clone();
                st.param_mut(name).unwrap().data_mut()[i] += delta;
                let s = Session::new(&st, Mode::Eval, false);
                loss(&s).value().item()
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let e = rel_err(a, numeric, 1e-7);
            if e >= tol {
                return Err(format!("{name}[{i}]: analytic {a} numeric {numeric} (rel {e:.2e})"));
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    Ok((checked, worst))
}

fn store_for(register: impl Fn(&mut Registry), seed: u64) -> ParamStore {
    let mut reg = Registry::default();
    register(&mut reg);
    ParamStore::initialize(&reg.into_specs(), seed)
}

fn summary(checked: usize, worst: f64) -> String {
    format!("{checked} weights, worst rel {worst:.1e}")
}

pub fn conv_lstm_weights() -> Check {
    let cell = ConvLstm::new("lstm", 2, 3);
    let store = store_for(|r| cell.register(r), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs: Vec<Tensor> = (0..2).map(|_| random(&mut rng, &[1, 2, 3, 4])).collect();
    let (n, worst) = check_params(&store, BLOCK_TOL, |s| {
        let mut state = LstmState::zeros(3, &[1, 2, 3, 4]);
        let mut out = None;
        for x in &xs {
            let (h, next) = cell.step(s, &Var::constant(x.clone()), &state).unwrap();
            state = next;
            out = Some(h.add(&state.c[1]));
        }
        probe_sum(&out.unwrap(), 3)
    })?;
    if n != store.num_params() {
        return Err(format!("checked {n} of {} weights", store.num_params()));
    }
    Ok(summary(n, worst))
}

pub fn attention_weights_every_mode() -> Check {
    let (mut total, mut worst) = (0, 0.0f64);
    for mode in [AttentionMode::Full, AttentionMode::ChannelOnly, AttentionMode::SpatialOnly] {
        let att = Attention::new("att", 4, mode, 2, 2);
        let store = store_for(|r| att.register(r), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[2, 4, 4, 8])).collect();
        let query = random(&mut rng, &[2, 4, 4, 8]);
        let (n, w) = check_params(&store, BLOCK_TOL, |s| {
            let f: Vec<Var> = feats.iter().cloned().map(Var::constant).collect();
            let keys = att.keys(s, &f).unwrap();
            probe_sum(&att.context(s, &keys, &Var::constant(query.clone())).unwrap(), 6)
        })
        .map_err(|e| format!("{mode}: {e}"))?;
        total += n;
        worst = worst.max(w);
    }
    Ok(summary(total, worst))
}

pub fn attention_inputs() -> Check {
    let att = Attention::new("att", 3, AttentionMode::Full, 2, 1);
    let store = store_for(|r| att.register(r), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[1, 3, 2, 4])).collect();
    let s = Session::new(&store, Mode::Eval, false);
    let run = |vars: &[Var]| {
        let keys = att.keys(&s, &vars[..2]).unwrap();
        probe_sum(&att.context(&s, &keys, &vars[2]).unwrap(), 9)
    };
    let vars: Vec<Var> = inputs.iter().cloned().map(Var::parameter).collect();
    let grads = run(&vars).backward();
    let (mut checked, mut worst) = (0, 0.0f64);
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let eval = |d: f64| {
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let mut x = x.clone();
                        if j == k {
                            x.data_mut()[i] += d;
                        }
                        Var::constant(x)
                    })
                    .collect();
                run(&vs).value().item()
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let a = grads.get(&vars[k]).unwrap().data()[i];
            let e = rel_err(a, numeric, 1e-7);
            if e >= BLOCK_TOL {
                return Err(format!("input {k}[{i}]: analytic {a} numeric {numeric}"));
            }
            worst = worst.max(e);
            checked += 1;
        }
    }
    Ok(format!("{checked} inputs, worst rel {worst:.1e}"))
}

pub fn cnn3d_weights() -> Check {
    let block = Cnn3d::new("c3", 2, 3, 2);
    let store = store_for(|r| block.register(r), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let window: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[1, 2, 2, 4])).collect();
    let (n, worst) = check_params(&store, BLOCK_TOL, |s| {
        let w: Vec<Var> = window.iter().cloned().map(Var::constant).collect();
        let outs = block.forward(s, &w).unwrap();
        probe_sum(&Var::concat(&outs, 1), 12)
    })?;
    Ok(summary(n, worst))
}

fn scalar_fd(x: &[f64], f: impl Fn(&[f64]) -> f64, grad: &[f64], tol: f64, floor: f64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut p = x.to_vec();
        p[i] += STEP;
        let hi = f(&p);
        p[i] -= 2.0 * STEP;
        let lo = f(&p);
        let numeric = (hi - lo) / (2.0 * STEP);
        let e = rel_err(grad[i], numeric, floor);
        if e >= tol {
            return Err(format!("element {i}: analytic {} numeric {numeric}", grad[i]));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

pub fn range_and_mask_losses() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pred: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let valid: Vec<bool> = (0..60).map(|_| rng.gen_bool(0.7)).collect();
    let (_, g) = range_loss_and_grad(&pred, &target, &valid).map_err(|e| e.to_string())?;
    let w1 = scalar_fd(&pred, |p| range_loss_and_grad(p, &target, &valid).unwrap().0, &g, 1e-6, 1e-7)
        .map_err(|e| format!("range loss {e}"))?;

    let logits: Vec<f64> = (0..60).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let (_, g) = mask_loss_and_logit_grad(&logits, &valid).map_err(|e| e.to_string())?;
    let w2 = scalar_fd(&logits, |z| mask_loss_and_logit_grad(z, &valid).unwrap().0, &g, 1e-6, 1e-7)
        .map_err(|e| format!("mask loss {e}"))?;
    Ok(format!("range worst rel {w1:.1e}, mask worst rel {w2:.1e}"))
}

pub fn chamfer_loss_ranges() -> Check {
    let sensor = SensorModel {
        fov_up: 10.0,
        fov_down: -10.0,
        height: 4,
        width: 16,
        max_range: 20.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let range: Vec<f64> = (0..64).map(|_| rng.gen_range(0.2..0.8)).collect();
    let mask = Grid {
        height: 4,
        width: 16,
        data: (0..64).map(|_| if rng.gen_bool(0.6) { 0.9 } else { 0.1 }).collect(),
    };
    let target = PointCloud::new(
        (0..40)
            .map(|_| [rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0), rng.gen_range(-2.0..2.0)])
            .collect(),
    );
    let eval = |r: &[f64]| {
        let grid = Grid {
            height: 4,
            width: 16,
            data: r.to_vec(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        step_chamfer(&grid, &mask, &target, &sensor, ChamferSettings::default(), &mut rng).unwrap()
    };
    // Continuous random fixture: nearest-neighbour ties have probability
    // zero, so the loss is smooth around it.
    let base = eval(&range);
    if base.empty_prediction {
        return Err("fixture prediction is empty".into());
    }
    let worst = scalar_fd(&range, |r| eval(r).value, &base.grad, BLOCK_TOL, 1e-7)?;
    Ok(format!("64 ranges, worst rel {worst:.1e}"))
}

/// Samples random weights of the toy network until `want` smooth points
/// have been compared.
pub fn end_to_end_network(want: usize) -> Check {
    let cfg = ModelConfig::toy();
    let sensor = SensorModel {
        fov_up: 10.0,
        fov_down: -20.0,
        height: cfg.height,
        width: cfg.width,
        max_range: 30.0,
    };
    let seq = synth_sequence(21, cfg.past_frames + cfg.future_frames, &sensor, &SceneSpec::default())
        .map_err(|e| e.to_string())?;
    let sample = window(&seq, cfg.past_frames, cfg.future_frames, 1, NormalizationSpec::new(30.0).unwrap())
        .unwrap()
        .next()
        .unwrap();
    let targets = Targets::from_frames(sample.future.iter(), &sensor).map_err(|e| e.to_string())?;
    let net = Network::new(cfg).map_err(|e| e.to_string())?;
    let store = net.init(3);
    let loss = |store: &ParamStore, track: bool| {
        let s = Session::new(store, Mode::Train, track);
        let out = net.forward(&s, &batch_inputs(&[&sample.past]).unwrap()).unwrap();
        let signs = out.mask_logit.value().data().iter().map(|&z| z > 0.0).collect::<Vec<_>>();
        let (l, _) = training_loss(&out, &targets, &sensor, 1.0, ChamferSettings::default()).unwrap();
        (l, s.bound(), signs)
    };
    let (l, bound, mask0) = loss(&store, true);
    let base = l.value().item();
    let grads = l.backward();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let names: Vec<String> = store.params().map(|(n, _)| n.clone()).collect();
    let (mut checked, mut skipped) = (0, 0);
    let mut worst: f64 = 0.0;
    while checked < want {
        let name = &names[rng.gen_range(0..names.len())];
        let numel = store.param(name).unwrap().numel();
        let i = rng.gen_range(0..numel);
        let eval = |d: f64| {
            let mut st = store.clone();
            st.param_mut(name).unwrap().data_mut()[i] += d;
            let (l, _, mask) = loss(&st, false);
            (l.value().item(), mask)
        };
        let (hi, mhi) = eval(STEP);
        let (lo, mlo) = eval(-STEP);
        if mhi != mask0 || mlo != mask0 {
            // The perturbation flipped a pixel across the mask threshold.
            skipped += 1;
            continue;
        }
        let (fwd, bwd) = ((hi - base) / STEP, (base - lo) / STEP);
        if rel_err(fwd, bwd, 1e-5) > NETWORK_TOL {
            // One-sided slopes disagree: a leaky-ReLU, L1 or nearest-neighbour
            // kink lies within the step.
            skipped += 1;
            continue;
        }
        let numeric = (hi - lo) / (2.0 * STEP);
        let a = grads.get(&bound[name]).unwrap().data()[i];
        // Biases feeding train-mode batch norm have an exact zero gradient;
        // the floor sits above the difference quotient's roundoff noise.
        let e = rel_err(a, numeric, 1e-5);
        if e >= NETWORK_TOL {
            return Err(format!("{name}[{i}]: analytic {a} numeric {numeric} (rel {e:.2e})"));
        }
        worst = worst.max(e);
        checked += 1;
    }
    if skipped >= checked / 2 {
        return Err(format!("{skipped} non-smooth samples against {checked} compared"));
    }
    Ok(format!("{checked} weights ({skipped} non-smooth skipped), worst rel {worst:.1e}"))
}
