//! A toy world for the browser demo: classes are arcs of the unit circle,
//! so every input is already unit length and similarities are easy to see.
//!
//! [`World`] is plain Rust; the `wasm` module wraps it for JavaScript.

use std::f64::consts::TAU;

use dynmat::matching::{ml_forward, observe};
use dynmat::protocol::{run_sequential, ContinualRunConfig, Datasets, ErrorCurvePoint};
use dynmat::stlm::{predict, stlm_scores};
use dynmat::{ClassId, DatasetSplit, Example, MatchingLayer, Result, Role};
use rand::Rng;

#[cfg(target_arch = "wasm32")]
mod wasm;

pub const CLASSES: u32 = 4;
pub const TRAIN_PER_CLASS: usize = 150;
pub const TEST_PER_CLASS: usize = 60;

/// The order classes are exposed in by [`World::exposure`].
pub const EXPOSURE_ORDER: [ClassId; 3] = [0, 1, 2];

pub fn center(class: ClassId) -> f64 {
    TAU * class as f64 / CLASSES as f64
}

fn point(angle: f64, label: ClassId, source_index: usize) -> Example {
    Example {
        vector: vec![angle.cos(), angle.sin()],
        label,
        source_index,
    }
}

pub struct World {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

impl World {
    /// Examples are spread uniformly within `spread` radians of their
    /// class centre. Wide spreads make neighbouring arcs overlap.
    pub fn new(seed: u64, spread: f64) -> Result<Self> {
        let mut rng = dynmat::rng::stream(seed, 0);
        let spread = spread.abs().max(1e-6);
        let mut draw = |per_class: usize, role: Role| {
            let examples = (0..CLASSES)
                .flat_map(|c| (0..per_class).map(move |i| (c, i)))
                .enumerate()
                .map(|(k, (c, _))| point(center(c) + rng.random_range(-spread..spread), c, k))
                .collect();
            DatasetSplit::new(examples, 2, role)
        };
        let train = draw(TRAIN_PER_CLASS, Role::Train)?;
        let test = draw(TEST_PER_CLASS, Role::Test)?;
        Ok(Self { train, test })
    }

    /// Layer built from every training example, class by class.
    pub fn layer(&self, theta: f64) -> Result<MatchingLayer> {
        let mut layer = MatchingLayer::new(2, theta)?;
        for x in &self.train.examples {
            observe(&mut layer, x)?;
        }
        Ok(layer)
    }

    pub fn ml_sizes(&self, thetas: &[f64]) -> Result<Vec<usize>> {
        thetas.iter().map(|&t| Ok(self.layer(t)?.len())).collect()
    }

    /// STLM prediction at `samples` evenly spaced angles, starting at 0.
    pub fn ring(&self, theta: f64, samples: usize) -> Result<Vec<ClassId>> {
        let layer = self.layer(theta)?;
        (0..samples)
            .map(|k| {
                let x = point(TAU * k as f64 / samples as f64, 0, k);
                predict(&stlm_scores(&layer, &ml_forward(&layer, &x)?)?)
            })
            .collect()
    }

    /// Per-insertion errors while the last class of [`EXPOSURE_ORDER`] is
    /// learned after the first two.
    pub fn exposure(&self, theta: f64, seed: u64) -> Result<Vec<ErrorCurvePoint>> {
        let data = Datasets::new(self.train.clone(), self.test.clone())?;
        let mut config = ContinualRunConfig::new(EXPOSURE_ORDER.to_vec(), theta, seed);
        config.shuffle_within = true;
        Ok(run_sequential(&config, &data)?.report.curves)
    }
}
