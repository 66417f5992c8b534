mod common;

use dynmat::ltlm::{self, backward, dataset_loss, train, train_on, EpochMode, Mlp, TrainingInputs, TrainingSchedule};
use dynmat::matching::observe;
use dynmat::{MatchingLayer, Role};
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradients_match_finite_differences() {
    let worst = common::gradient_oracle(100, 7);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn batch_gradient_is_mean_of_example_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let net = common::random_net(&mut rng);
        let batch = backward(&net.mlp, net.inputs.view(), net.targets.view()).unwrap();
        let b = net.inputs.nrows() as f64;
        let mut sum = backward(
            &net.mlp,
            net.inputs.slice(s![0..1, ..]),
            net.targets.slice(s![0..1, ..]),
        )
        .unwrap();
        for i in 1..net.inputs.nrows() {
            let g = backward(
                &net.mlp,
                net.inputs.slice(s![i..i + 1, ..]),
                net.targets.slice(s![i..i + 1, ..]),
            )
            .unwrap();
            sum.w_hidden += &g.w_hidden;
            sum.b_hidden += &g.b_hidden;
            sum.w_out += &g.w_out;
            sum.b_out += &g.b_out;
            sum.loss += g.loss;
        }
        let close = |a: &Array2<f64>, m: &Array2<f64>| a.iter().zip(m).all(|(x, y)| (x - y / b).abs() < 1e-12);
        assert!(close(&batch.w_hidden, &sum.w_hidden));
        assert!(close(&batch.w_out, &sum.w_out));
        assert!(batch
            .b_hidden
            .iter()
            .zip(&sum.b_hidden)
            .all(|(x, y)| (x - y / b).abs() < 1e-12));
        assert!(batch
            .b_out
            .iter()
            .zip(&sum.b_out)
            .all(|(x, y)| (x - y / b).abs() < 1e-12));
        assert!((batch.loss - sum.loss / b).abs() < 1e-12);
    }
}

/// Two well separated clusters pushed through a layer storing them.
fn toy() -> (MatchingLayer, dynmat::DatasetSplit) {
    let split = common::clustered(&[0, 1], 40, 6, 0.05, 3, Role::Train);
    let mut layer = MatchingLayer::new(6, 0.9).unwrap();
    for x in &split.examples {
        observe(&mut layer, x).unwrap();
    }
    (layer, split)
}

fn one_epoch(lr: f64, seed: u64) -> TrainingSchedule {
    TrainingSchedule {
        phase1_epochs: 1,
        phase1_lr: lr,
        phase2_epochs: 0,
        phase2_lr: lr / 10.0,
        batch_size: 10,
        seed,
        epoch_mode: EpochMode::FullPass,
    }
}

#[test]
fn loss_does_not_increase_over_first_epochs() {
    let (layer, split) = toy();
    let examples = split.examples.iter().collect();
    let labels: Vec<u32> = split.examples.iter().map(|e| e.label).collect();
    let inputs = TrainingInputs::from_layer(&layer, examples).unwrap();
    let mut mlp = Mlp::new(layer.len(), 8, vec![0, 1], 5).unwrap();
    let mut last = dataset_loss(&mlp, &inputs, &labels).unwrap();
    for epoch in 0..10 {
        train_on(&mut mlp, &inputs, &labels, &one_epoch(1e-3, epoch)).unwrap();
        let loss = dataset_loss(&mlp, &inputs, &labels).unwrap();
        assert!(loss <= last, "epoch {epoch}: {loss} > {last}");
        last = loss;
    }
}

#[test]
fn separable_toy_is_learned() {
    let (layer, split) = toy();
    let mut mlp = Mlp::new(layer.len(), 8, vec![0, 1], 5).unwrap();
    let schedule = TrainingSchedule {
        phase1_epochs: 200,
        phase1_lr: 0.5,
        phase2_epochs: 50,
        phase2_lr: 0.05,
        ..one_epoch(0.5, 1)
    };
    let report = train(&mut mlp, &layer, &split, &schedule).unwrap();
    assert_eq!(report.epochs_run, 250);
    assert!(report.phase2_final_loss.unwrap() < report.phase1_final_loss.unwrap() + 1e-3);
    let test = common::clustered(&[0, 1], 20, 6, 0.05, 3, Role::Test);
    assert_eq!(ltlm::ltlm_error_rate(&mlp, &layer, &test).unwrap(), 0.0);
}

#[test]
fn training_is_deterministic() {
    let (layer, split) = toy();
    let schedule = TrainingSchedule {
        phase1_epochs: 5,
        phase2_epochs: 3,
        ..TrainingSchedule::scaled(9)
    }
    .with_batch_size(7);
    let run = || {
        let mut mlp = Mlp::new(layer.len(), 5, vec![0, 1], 9).unwrap();
        let report = train(&mut mlp, &layer, &split, &schedule).unwrap();
        (mlp, report.phase2_final_loss)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la.map(f64::to_bits), lb.map(f64::to_bits));
}

#[test]
fn single_batch_epochs_take_one_step() {
    let (layer, split) = toy();
    let schedule = TrainingSchedule {
        phase1_epochs: 4,
        phase2_epochs: 2,
        epoch_mode: EpochMode::SingleBatch,
        ..TrainingSchedule::scaled(0)
    };
    let mut mlp = Mlp::new(layer.len(), 3, vec![0, 1], 0).unwrap();
    let report = train(&mut mlp, &layer, &split, &schedule).unwrap();
    assert_eq!((report.epochs_run, report.steps), (6, 6));
    assert_eq!(report.batch_size, 80.min(schedule.batch_size));
}

#[test]
fn divergence_aborts_with_report() {
    let (layer, split) = toy();
    let schedule = TrainingSchedule {
        phase1_epochs: 50,
        phase1_lr: 1e6,
        phase2_epochs: 0,
        phase2_lr: 1.0,
        ..TrainingSchedule::scaled(0)
    };
    let mut mlp = Mlp::new(layer.len(), 4, vec![0, 1], 0).unwrap();
    match train(&mut mlp, &layer, &split, &schedule) {
        Err(dynmat::Error::NonFiniteLoss { phase: 1, report, .. }) => assert!(report.steps > 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn weights_round_trip() {
    let mlp = Mlp::new(7, 4, vec![2, 5, 9], 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.dynw");
    ltlm::save_weights(&mlp, &path).unwrap();
    assert_eq!(ltlm::load_weights(&path).unwrap(), mlp);
}
