//! Short-term classifier over the matching layer.
//!
//! Each matching-layer neuron is wired with weight 1 to the output of its
//! own class and 0 elsewhere, so the score of class `c` is
//! `sum over neurons j of class c of g(h_j)` with the Gaussian gate
//! `g(x) = exp(-(x - 1)^2 / 0.1)`. The prediction is the class with the
//! largest score; ties go to the lowest class id.
//!
//! Scores are summed in insertion order. Because a class's score only
//! involves its own neurons, inserting a neuron of class `c` leaves every
//! other class's score bit-for-bit unchanged.

use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::{ClassId, DatasetSplit, Example};
use crate::error::{Error, Result};
use crate::matching::{ml_forward, MatchingLayer, MlActivations, MlNeuron};
use crate::vector;

/// Width of the Gaussian gate.
pub const GATE_WIDTH: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gate {
    width: f64,
}

impl Default for Gate {
    fn default() -> Self {
        Self { width: GATE_WIDTH }
    }
}

impl Gate {
    #[cfg(feature = "experimental")]
    pub fn with_width(width: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::Config(format!("gate width must be positive, got {width}")));
        }
        Ok(Self { width })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        let d = x - 1.0;
        (-(d * d) / self.width).exp()
    }
}

/// `exp(-(x - 1)^2 / 0.1)`.
#[inline]
pub fn g(x: f64) -> f64 {
    Gate::default().apply(x)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassScores {
    pub scores: BTreeMap<ClassId, f64>,
}

impl ClassScores {
    pub fn get(&self, class: ClassId) -> f64 {
        self.scores.get(&class).copied().unwrap_or(0.0)
    }
}

pub fn stlm_scores(layer: &MatchingLayer, h: &MlActivations) -> Result<ClassScores> {
    stlm_scores_gated(layer, h, Gate::default())
}

pub fn stlm_scores_gated(layer: &MatchingLayer, h: &MlActivations, gate: Gate) -> Result<ClassScores> {
    if h.h.len() != layer.len() || h.layer_size != layer.len() {
        return Err(Error::LengthMismatch {
            expected: layer.len(),
            found: h.h.len(),
        });
    }
    let scores = layer
        .classes()
        .map(|c| {
            // class indices are in insertion order
            let s = layer
                .class_indices(c)
                .iter()
                .fold(0.0, |acc, &j| acc + gate.apply(h.h[j]));
            (c, s)
        })
        .collect();
    Ok(ClassScores { scores })
}

/// Winner-take-all over the classes present in `scores`.
pub fn predict(scores: &ClassScores) -> Result<ClassId> {
    let mut best: Option<(ClassId, f64)> = None;
    // ascending class order, strict comparison: the lowest id wins ties
    for (&c, &s) in &scores.scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c).ok_or(Error::EmptyScores)
}

pub fn classify(layer: &MatchingLayer, x: &Example) -> Result<ClassId> {
    predict(&stlm_scores(layer, &ml_forward(layer, x)?)?)
}

/// Fraction of the examples labeled in `classes` that the layer misclassifies.
/// Predictions range over every class stored in the layer.
pub fn stlm_error_rate(layer: &MatchingLayer, split: &DatasetSplit, classes: &BTreeSet<ClassId>) -> Result<f64> {
    let mut total = 0usize;
    let mut wrong = 0usize;
    for x in split.examples.iter().filter(|e| classes.contains(&e.label)) {
        total += 1;
        if classify(layer, x)? != x.label {
            wrong += 1;
        }
    }
    if total == 0 {
        return Err(Error::NoExamples);
    }
    Ok(wrong as f64 / total as f64)
}

/// Neurons per cache block in [`IncrementalScorer`].
pub const BLOCK: usize = 64;

/// Running class scores for a fixed set of evaluation examples.
///
/// Adding a neuron of class `c` adds its gate term to class `c` only, in
/// insertion order, so the cached scores are bit-identical to a fresh
/// [`stlm_scores`] evaluation against the same layer.
#[derive(Clone, Debug)]
pub struct IncrementalScorer<'a> {
    examples: Vec<&'a Example>,
    dim: usize,
    gate: Gate,
    /// Present classes, ascending.
    classes: Vec<ClassId>,
    /// `scores[slot][example]`, slot in `classes` order.
    scores: Vec<Vec<f64>>,
}

impl<'a> IncrementalScorer<'a> {
    pub fn new(layer: &MatchingLayer, examples: Vec<&'a Example>) -> Result<Self> {
        let mut scorer = Self {
            examples,
            dim: layer.dim(),
            gate: Gate::default(),
            classes: Vec::new(),
            scores: Vec::new(),
        };
        for x in &scorer.examples {
            if x.vector.len() != scorer.dim {
                return Err(Error::DimensionMismatch {
                    expected: scorer.dim,
                    found: x.vector.len(),
                });
            }
        }
        let neurons: Vec<&MlNeuron> = layer.neurons().iter().collect();
        for block in neurons.chunks(BLOCK) {
            scorer.add_neurons_with(block, |_, _, _| {})?;
        }
        Ok(scorer)
    }

    pub fn examples(&self) -> &[&'a Example] {
        &self.examples
    }

    pub fn add_neuron(&mut self, neuron: &MlNeuron) -> Result<()> {
        self.add_neurons_with(&[neuron], |_, _, _| {})
    }

    /// Adds `neurons` in order, calling `step(k, i, prediction)` with the
    /// prediction for example `i` right after the `k`-th neuron of the block
    /// was added. Calls are grouped by example, not by step.
    ///
    /// Each example's scores are updated for the whole block while its
    /// vector is in cache; the per-class addition order is the same as
    /// adding the neurons one at a time.
    pub fn add_neurons_with(
        &mut self,
        neurons: &[&MlNeuron],
        mut step: impl FnMut(usize, usize, Option<ClassId>),
    ) -> Result<()> {
        if let Some(bad) = neurons.iter().find(|n| n.weights.len() != self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: bad.weights.len(),
            });
        }
        let known = self.classes.clone();
        for n in neurons {
            if let Err(slot) = self.classes.binary_search(&n.label) {
                self.classes.insert(slot, n.label);
                self.scores.insert(slot, vec![0.0; self.examples.len()]);
            }
        }
        let slots: Vec<usize> = neurons
            .iter()
            .map(|n| self.classes.binary_search(&n.label).expect("slot inserted above"))
            .collect();
        // a class takes part in predictions from its first neuron on
        let present: Vec<bool> = self.classes.iter().map(|c| known.binary_search(c).is_ok()).collect();

        let gate = self.gate;
        let mut local = vec![0.0; self.classes.len()];
        let mut live = vec![false; self.classes.len()];
        for (i, x) in self.examples.iter().enumerate() {
            for (slot, col) in self.scores.iter().enumerate() {
                local[slot] = col[i];
            }
            live.copy_from_slice(&present);
            for (k, (n, &slot)) in neurons.iter().zip(&slots).enumerate() {
                local[slot] += gate.apply(vector::dot(&n.weights, &x.vector));
                live[slot] = true;
                step(k, i, argmax(&self.classes, &local, &live));
            }
            for (slot, col) in self.scores.iter_mut().enumerate() {
                col[i] = local[slot];
            }
        }
        Ok(())
    }

    pub fn scores_of(&self, example: usize) -> ClassScores {
        ClassScores {
            scores: self
                .classes
                .iter()
                .zip(&self.scores)
                .map(|(&c, col)| (c, col[example]))
                .collect(),
        }
    }

    pub fn prediction(&self, example: usize) -> Option<ClassId> {
        let mut best: Option<(ClassId, f64)> = None;
        for (&c, col) in self.classes.iter().zip(&self.scores) {
            let s = col[example];
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best.map(|(c, _)| c)
    }

    pub fn predictions(&self) -> Vec<Option<ClassId>> {
        (0..self.examples.len()).map(|i| self.prediction(i)).collect()
    }
}

fn argmax(classes: &[ClassId], scores: &[f64], live: &[bool]) -> Option<ClassId> {
    let mut best: Option<(ClassId, f64)> = None;
    for ((&c, &s), _) in classes.iter().zip(scores).zip(live).filter(|(_, &l)| l) {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::observe;

    fn ex(v: &[f64], label: ClassId) -> Example {
        Example {
            vector: v.to_vec(),
            label,
            source_index: 0,
        }
    }

    #[test]
    fn gate_values() {
        assert_eq!(g(1.0), 1.0);
        // exp(-0.1) and exp(-10) from an independent calculator
        assert!((g(0.9) - 0.904_837_418_035_959_6).abs() < 1e-12);
        assert!((g(0.0) - 4.539_992_976_248_485e-5).abs() < 1e-17);
        assert!(g(0.5) < g(0.6) && g(0.6) < g(1.0));
    }

    fn acts(h: &[f64]) -> MlActivations {
        MlActivations {
            h: h.to_vec(),
            layer_size: h.len(),
        }
    }

    #[test]
    fn scores_examples() {
        let mut layer = MatchingLayer::new(2, 0.5).unwrap();
        observe(&mut layer, &ex(&[1.0, 0.0], 0)).unwrap();
        let s = stlm_scores(&layer, &acts(&[1.0])).unwrap();
        assert_eq!(s.scores, BTreeMap::from([(0, 1.0)]));

        observe(&mut layer, &ex(&[0.0, 1.0], 0)).unwrap();
        let s = stlm_scores(&layer, &acts(&[1.0, 0.0])).unwrap();
        assert!((s.get(0) - 1.000_045_399_929_762_5).abs() < 1e-15);

        let mut layer = MatchingLayer::new(2, 0.5).unwrap();
        observe(&mut layer, &ex(&[1.0, 0.0], 0)).unwrap();
        observe(&mut layer, &ex(&[0.0, 1.0], 1)).unwrap();
        let s = stlm_scores(&layer, &acts(&[0.6, 0.95])).unwrap();
        assert!((s.get(0) - 0.201_896_517_994_655_4).abs() < 1e-15);
        assert!((s.get(1) - 0.975_309_912_028_332_6).abs() < 1e-15);
        assert_eq!(predict(&s).unwrap(), 1);
    }

    #[test]
    fn scores_reject_stale_activations() {
        let mut layer = MatchingLayer::new(2, 0.5).unwrap();
        observe(&mut layer, &ex(&[1.0, 0.0], 0)).unwrap();
        assert!(matches!(
            stlm_scores(&layer, &acts(&[1.0, 0.2])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn predict_rules() {
        let s = |v: &[(ClassId, f64)]| ClassScores {
            scores: v.iter().copied().collect(),
        };
        assert_eq!(predict(&s(&[(0, 1.0), (1, 0.1)])).unwrap(), 0);
        assert_eq!(predict(&s(&[(0, 0.5), (1, 0.5)])).unwrap(), 0);
        assert_eq!(predict(&s(&[(3, 0.5), (1, 0.5)])).unwrap(), 1);
        assert!(matches!(predict(&ClassScores::default()), Err(Error::EmptyScores)));
    }

    #[test]
    fn single_class_layer_error_is_other_class_share() {
        let mut layer = MatchingLayer::new(2, 0.5).unwrap();
        observe(&mut layer, &ex(&[1.0, 0.0], 0)).unwrap();
        let test = DatasetSplit::new(
            vec![
                ex(&[1.0, 0.0], 0),
                ex(&[0.0, 1.0], 1),
                ex(&[0.6, 0.8], 1),
                ex(&[0.8, 0.6], 2),
            ],
            2,
            crate::dataset::Role::Test,
        )
        .unwrap();
        let all = BTreeSet::from([0, 1, 2]);
        assert_eq!(stlm_error_rate(&layer, &test, &all).unwrap(), 0.75);
        assert!(matches!(
            stlm_error_rate(&layer, &test, &BTreeSet::from([9])),
            Err(Error::NoExamples)
        ));
    }

    #[test]
    fn incremental_matches_fresh_scores() {
        let xs = [
            ex(&[1.0, 0.0], 0),
            ex(&[0.6, 0.8], 1),
            ex(&[0.8, 0.6], 1),
            ex(&[std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2], 2),
        ];
        let mut layer = MatchingLayer::new(2, 0.99).unwrap();
        observe(&mut layer, &xs[0]).unwrap();
        let mut scorer = IncrementalScorer::new(&layer, xs.iter().collect()).unwrap();
        for x in &xs[1..] {
            let out = observe(&mut layer, x).unwrap();
            scorer.add_neuron(&layer.neurons()[out.neuron_index.unwrap()]).unwrap();
            for (i, probe) in xs.iter().enumerate() {
                let fresh = stlm_scores(&layer, &ml_forward(&layer, probe).unwrap()).unwrap();
                assert_eq!(scorer.scores_of(i), fresh);
                assert_eq!(scorer.prediction(i), Some(predict(&fresh).unwrap()));
            }
        }
    }

    #[test]
    fn block_steps_match_single_adds() {
        let xs: Vec<Example> = (0..12)
            .map(|i| {
                let a = f64::from(i) * 0.5;
                ex(&[a.cos(), a.sin()], i as ClassId % 3)
            })
            .collect();
        let mut layer = MatchingLayer::new(2, 0.999).unwrap();
        observe(&mut layer, &xs[0]).unwrap();
        let mut single = IncrementalScorer::new(&layer, xs.iter().collect()).unwrap();
        let mut blocked = single.clone();
        let mut expected = Vec::new();
        for x in &xs[1..] {
            if let Some(j) = observe(&mut layer, x).unwrap().neuron_index {
                single.add_neuron(&layer.neurons()[j]).unwrap();
                expected.push(single.predictions());
            }
        }
        let added: Vec<&MlNeuron> = layer.neurons()[1..].iter().collect();
        let mut got = vec![vec![None; xs.len()]; added.len()];
        blocked.add_neurons_with(&added, |k, i, p| got[k][i] = p).unwrap();
        assert_eq!(got, expected);
        for i in 0..xs.len() {
            assert_eq!(blocked.scores_of(i), single.scores_of(i));
        }
    }
}
