#[path = "support/fixture.rs"]
mod fixture;

use rangecast::checkpoint::Checkpoint;
use rangecast::network::{ModelConfig, Network};
use rangecast::training::{train, CheckpointKind, LogRecord, MemorySink, TrainConfig};

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs_phase1: 2,
        epochs_phase2: 1,
        learning_rate: 1e-3,
        lr_decay: 0.9,
        batch_size: 2,
        seed: 7,
        checkpoint_every: 0,
        grad_clip: None,
        max_steps: None,
        chamfer_cap: Some(256),
    }
}

fn step_losses(records: &[LogRecord]) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { loss, .. } => Some(loss.total),
            _ => None,
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_curves() {
    let net = Network::new(ModelConfig::toy()).unwrap();
    let sensor = fixture::toy_sensor();
    let data = fixture::toy_samples(1, 10, 3, 3);
    let run = || {
        let mut sink = MemorySink::default();
        let out = train(&net, &sensor, &small_config(), &data[..4], &[], None, &mut sink).unwrap();
        (step_losses(&sink.records), out.last.weights)
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(wa, wb);
}

#[test]
fn chamfer_weight_switches_at_the_phase_boundary() {
    let net = Network::new(ModelConfig::toy()).unwrap();
    let sensor = fixture::toy_sensor();
    let data = fixture::toy_samples(2, 8, 3, 3);
    let mut sink = MemorySink::default();
    train(&net, &sensor, &small_config(), &data[..2], &[], None, &mut sink).unwrap();
    for r in &sink.records {
        if let LogRecord::Step { epoch, lr, loss, .. } = r {
            let phase2 = *epoch >= 2;
            assert_eq!(loss.alpha_c, if phase2 { 1.0 } else { 0.0 });
            assert_eq!(loss.chamfer_loss > 0.0, phase2);
            assert!((lr - 1e-3 * 0.9f64.powi(*epoch as i32)).abs() < 1e-15);
            let sum = loss.range_loss + loss.mask_loss + loss.alpha_c * loss.chamfer_loss;
            assert!((loss.total - sum).abs() < 1e-9);
        }
    }
    let epochs: Vec<f64> = sink
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e.alpha_c),
            _ => None,
        })
        .collect();
    assert_eq!(epochs, vec![0.0, 0.0, 1.0]);
}

#[test]
fn non_finite_weights_abort_with_the_batch_index() {
    let net = Network::new(ModelConfig::toy()).unwrap();
    let sensor = fixture::toy_sensor();
    let data = fixture::toy_samples(3, 8, 3, 3);
    let mut sink = MemorySink::default();
    let first = train(
        &net,
        &sensor,
        &TrainConfig {
            epochs_phase1: 1,
            epochs_phase2: 0,
            ..small_config()
        },
        &data[..2],
        &[],
        None,
        &mut sink,
    )
    .unwrap();
    assert!(first.abort.is_none());

    let mut poisoned: Checkpoint = first.last.clone();
    let name = poisoned.weights.params().next().unwrap().0.clone();
    poisoned.weights.param_mut(&name).unwrap().data_mut()[0] = f64::NAN;

    let mut sink = MemorySink::default();
    let out = train(&net, &sensor, &small_config(), &data[..2], &[], Some(poisoned.clone()), &mut sink).unwrap();
    let abort = out.abort.expect("training should abort");
    assert_eq!((abort.epoch, abort.step, abort.batch), (1, 1, 0));
    match sink.records.last().unwrap() {
        LogRecord::Abort { batch, reason, .. } => {
            assert_eq!(*batch, 0);
            assert!(reason.contains("non-finite"));
        }
        other => panic!("expected an abort record, got {other:?}"),
    }
    assert_eq!(sink.checkpoints, vec![(CheckpointKind::Last, 1)]);
    assert_eq!(out.last.step, 1);
    assert!(out.last.weights.param(&name).unwrap().data()[0].is_nan());
}

#[test]
fn best_checkpoint_has_the_lowest_validation_loss() {
    let net = Network::new(ModelConfig::toy()).unwrap();
    let sensor = fixture::toy_sensor();
    let data = fixture::toy_samples(4, 12, 3, 3);
    let config = TrainConfig {
        epochs_phase1: 4,
        epochs_phase2: 0,
        learning_rate: 2e-3,
        ..small_config()
    };
    let mut sink = MemorySink::default();
    let out = train(&net, &sensor, &config, &data[..4], &data[4..6], None, &mut sink).unwrap();
    let val: Vec<f64> = out.last.history.iter().map(|e| e.val_range_loss.unwrap()).collect();
    assert_eq!(val.len(), 4);
    let argmin = (0..val.len()).min_by(|&i, &j| val[i].total_cmp(&val[j])).unwrap();
    assert_eq!(out.best.epoch, argmin + 1);

    // The stored weights reproduce the recorded validation loss.
    let again = rangecast::training::mean_range_loss(&net, &out.best.weights, &sensor, &data[4..6]).unwrap();
    assert!((again - val[argmin]).abs() < 1e-12);

    let best_saves: Vec<usize> = sink
        .checkpoints
        .iter()
        .filter(|(k, _)| *k == CheckpointKind::Best)
        .map(|(_, e)| *e)
        .collect();
    assert_eq!(best_saves.last(), Some(&(argmin + 1)));
    for w in best_saves.windows(2) {
        assert!(val[w[1] - 1] < val[w[0] - 1]);
    }
}
