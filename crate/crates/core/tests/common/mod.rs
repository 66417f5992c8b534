#![allow(dead_code)]

use std::path::PathBuf;

use dynmat::dataset::{load_features, write_features};
use dynmat::ltlm::{backward, forward, mse_loss, Mlp};
use dynmat::matching::{load_memory, observe, save_memory};
use dynmat::protocol::{DatasetSource, DatasetSpec};
use dynmat::{ClassId, DatasetSplit, Example, MatchingLayer, Role};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that gradients that vanish up to rounding do not dominate.
pub const REL_FLOOR: f64 = 1e-6;

/// Batch loss computed one example at a time through `forward`.
fn loss(mlp: &Mlp, inputs: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (u, t) in inputs.rows().into_iter().zip(targets.rows()) {
        let out = forward(mlp, u.as_slice().unwrap()).unwrap();
        total += mse_loss(&out, t.as_slice().unwrap()).unwrap();
    }
    total / inputs.nrows() as f64
}

pub struct RandomNet {
    pub mlp: Mlp,
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

pub fn random_net(rng: &mut ChaCha8Rng) -> RandomNet {
    let input = rng.random_range(1..=10);
    let hidden = rng.random_range(1..=8);
    let classes = rng.random_range(1..=4);
    let batch = rng.random_range(1..=6);
    let mut mlp = Mlp::new(input, hidden, (0..classes).collect(), rng.random()).unwrap();
    // spread the weights a little beyond the init bounds
    mlp.w_hidden.mapv_inplace(|w| w * rng.random_range(0.5..3.0));
    mlp.w_out.mapv_inplace(|w| w * rng.random_range(0.5..3.0));
    let inputs = Array2::from_shape_fn((batch, input), |_| rng.random_range(-1.0..1.0));
    let mut targets = Array2::zeros((batch, classes as usize));
    for mut row in targets.rows_mut() {
        row[rng.random_range(0..classes as usize)] = 1.0;
    }
    RandomNet { mlp, inputs, targets }
}

fn params(mlp: &mut Mlp) -> Vec<&mut f64> {
    mlp.w_hidden
        .iter_mut()
        .chain(mlp.b_hidden.iter_mut())
        .chain(mlp.w_out.iter_mut())
        .chain(mlp.b_out.iter_mut())
        .collect()
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter of one net.
pub fn max_relative_error(net: &RandomNet) -> f64 {
    let grads = backward(&net.mlp, net.inputs.view(), net.targets.view()).unwrap();
    let analytic: Vec<f64> = grads
        .w_hidden
        .iter()
        .chain(grads.b_hidden.iter())
        .chain(grads.w_out.iter())
        .chain(grads.b_out.iter())
        .copied()
        .collect();
    let mut worst = 0.0f64;
    let mut probe = net.mlp.clone();
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *params(&mut probe)[k];
        *params(&mut probe)[k] = orig + FD_EPS;
        let up = loss(&probe, &net.inputs, &net.targets);
        *params(&mut probe)[k] = orig - FD_EPS;
        let down = loss(&probe, &net.inputs, &net.targets);
        *params(&mut probe)[k] = orig;
        let numeric = (up - down) / (2.0 * FD_EPS);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

/// Worst relative error over `trials` random nets drawn from `seed`.
pub fn gradient_oracle(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| max_relative_error(&random_net(&mut rng)))
        .fold(0.0, f64::max)
}

pub fn unit_example(v: Vec<f64>, label: ClassId, source_index: usize) -> Example {
    let n = dynmat::vector::norm(&v);
    Example {
        vector: v.into_iter().map(|x| x / n).collect(),
        label,
        source_index,
    }
}

/// Noisy clusters around random nonnegative centers, unit-normalized.
pub fn clustered(
    classes: &[ClassId],
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    role: Role,
) -> DatasetSplit {
    let mut centers = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = classes
        .iter()
        .map(|_| (0..dim).map(|_| centers.random_range(0.0..1.0)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (role as u64 + 1) * 0x9e37_79b9);
    let mut examples = Vec::new();
    for i in 0..per_class {
        for (c, center) in classes.iter().zip(&centers) {
            let v = center
                .iter()
                .map(|m| m + spread * rng.random_range(-1.0..1.0))
                .collect();
            examples.push(unit_example(v, *c, i));
        }
    }
    DatasetSplit::new(examples, dim, role).unwrap()
}

pub fn data_dir() -> PathBuf {
    std::env::var_os("DYNMAT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

/// The standard IDX file names under `data_dir()/name`, or `None` if absent.
pub fn idx_spec(name: &str) -> Option<DatasetSpec> {
    let dir = data_dir().join(name);
    let file = |f: &str| dir.join(f);
    let spec = DatasetSpec {
        kind: name.to_string(),
        train: DatasetSource::Idx {
            images: file("train-images-idx3-ubyte"),
            labels: file("train-labels-idx1-ubyte"),
        },
        test: DatasetSource::Idx {
            images: file("t10k-images-idx3-ubyte"),
            labels: file("t10k-labels-idx1-ubyte"),
        },
    };
    let present = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    .iter()
    .all(|f| file(f).is_file());
    present.then_some(spec)
}

pub fn f32_split() -> impl Strategy<Value = DatasetSplit> {
    (1usize..12, 0usize..20).prop_flat_map(|(dim, n)| {
        prop::collection::vec((any::<u32>(), prop::collection::vec(any::<f32>(), dim)), n).prop_map(move |records| {
            let examples = records
                .into_iter()
                .enumerate()
                .map(|(i, (label, v))| Example {
                    vector: v.into_iter().map(f64::from).collect(),
                    label,
                    source_index: i,
                })
                .collect();
            DatasetSplit::new(examples, dim, Role::Train).unwrap()
        })
    })
}

pub fn raw_vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| dynmat::vector::norm(v) > 1e-3)
}

pub fn layer_inputs() -> impl Strategy<Value = (usize, f64, Vec<(u32, Vec<f64>)>)> {
    (1usize..8, 0.01f64..0.99).prop_flat_map(|(dim, theta)| {
        (
            Just(dim),
            Just(theta),
            prop::collection::vec((0u32..4, raw_vector(dim)), 0..25),
        )
    })
}

pub fn dynf_round_trip(split: &DatasetSplit) -> Result<(), TestCaseError> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.dynf");
    write_features(split, &path).unwrap();
    let back = load_features(&path).unwrap();
    prop_assert_eq!(back.dim, split.dim);
    prop_assert_eq!(back.len(), split.len());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for (a, b) in split.examples.iter().zip(&back.examples) {
        prop_assert_eq!(a.label, b.label);
        prop_assert_eq!(bits(&a.vector), bits(&b.vector));
    }
    Ok(())
}

pub fn dynm_round_trip((dim, theta, xs): (usize, f64, Vec<(u32, Vec<f64>)>)) -> Result<(), TestCaseError> {
    let mut layer = MatchingLayer::new(dim, theta).unwrap();
    for (i, (label, v)) in xs.into_iter().enumerate() {
        observe(&mut layer, &unit_example(v, label, i)).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.dynm");
    let b = dir.path().join("b.dynm");
    save_memory(&layer, &a).unwrap();
    let back = load_memory(&a).unwrap();
    prop_assert_eq!(&back, &layer);
    save_memory(&back, &b).unwrap();
    prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    Ok(())
}
