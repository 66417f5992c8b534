//! Incremental class-learning experiments.
//!
//! A run starts from the first two classes of its schedule (all their
//! training examples go through the matching layer, and the LTLM is
//! optionally trained on them), then exposes the layer to each further
//! class in turn. Every time an exposure inserts a neuron, the STLM is
//! evaluated on the test examples of the previously learned classes
//! (`err_old`) and of the class being learned (`err_new`). After the last
//! exposure a fresh LTLM can be trained on the full training set and/or
//! on the examples stored in the layer.
//!
//! Per-insertion evaluation uses [`IncrementalScorer`]: a new neuron of
//! class `c` only adds its gate term to class `c`, so cached scores stay
//! exact and each insertion costs one dot product per test example.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::dataset::{self, make_schedule, ClassId, DatasetSplit, Example, PresentationSchedule, Role};
use crate::error::{Error, Result};
use crate::ltlm::{self, Mlp, TrainingInputs, TrainingReport, TrainingSchedule};
use crate::matching::{self, ml_forward_batch, observe, MatchingLayer, MlActivations, MlNeuron};
use crate::stlm::{predict, stlm_scores, ClassScores, IncrementalScorer, BLOCK};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const CURVE_CSV_HEADER: &str = "new_class,stored_new,err_old,err_new,total_ml_size";
/// Batch size used when the LTLM is trained on the layer's own examples.
pub const SELF_CONTAINED_BATCH: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum DatasetSource {
    Idx { images: PathBuf, labels: PathBuf },
    Features { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<DatasetSplit> {
        match self {
            Self::Idx { images, labels } => dataset::load_idx(images, labels),
            Self::Features { path } => dataset::load_features(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Free-form name, e.g. `mnist`.
    pub kind: String,
    pub train: DatasetSource,
    pub test: DatasetSource,
}

/// Normalized train and test splits.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: DatasetSplit,
    pub test: DatasetSplit,
}

impl Datasets {
    /// Normalizes both splits.
    pub fn new(train: DatasetSplit, test: DatasetSplit) -> Result<Self> {
        if train.dim != test.dim {
            return Err(Error::DimensionMismatch {
                expected: train.dim,
                found: test.dim,
            });
        }
        Ok(Self {
            train: dataset::normalize(&train.with_role(Role::Train)),
            test: dataset::normalize(&test.with_role(Role::Test)),
        })
    }

    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        Self::new(spec.train.load()?, spec.test.load()?)
    }

    pub fn dim(&self) -> usize {
        self.train.dim
    }

    /// Keeps only `classes` in both splits.
    pub fn restrict(&self, classes: &[ClassId]) -> Result<Self> {
        let set: BTreeSet<ClassId> = classes.iter().copied().collect();
        Ok(Self {
            train: dataset::filter_classes(&self.train, &set)?,
            test: dataset::filter_classes(&self.test, &set)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtlmConfig {
    pub hidden: usize,
    pub schedule: TrainingSchedule,
    /// Train an LTLM on the initial pair before the first exposure.
    pub train_initial: bool,
    /// Train a fresh LTLM on the full training set after the last exposure.
    pub train_final: bool,
    /// Also train an LTLM on the examples stored in the layer.
    pub self_contained: bool,
    /// Retrain during exposures after every this many insertions. Off when `None`.
    #[serde(default)]
    pub retrain_every: Option<usize>,
}

impl LtlmConfig {
    pub fn new(hidden: usize, schedule: TrainingSchedule) -> Self {
        Self {
            hidden,
            schedule,
            train_initial: true,
            train_final: true,
            self_contained: false,
            retrain_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualRunConfig {
    /// Where the data came from; informational.
    pub dataset: Option<DatasetSpec>,
    /// Classes in presentation order; the first two form the initial pair.
    pub classes: Vec<ClassId>,
    pub seed: u64,
    pub shuffle_within: bool,
    pub theta: f64,
    pub ltlm: Option<LtlmConfig>,
    /// Run the interference audit after every exposure.
    pub audit: bool,
}

impl ContinualRunConfig {
    pub fn new(classes: Vec<ClassId>, theta: f64, seed: u64) -> Self {
        Self {
            dataset: None,
            classes,
            seed,
            shuffle_within: false,
            theta,
            ltlm: None,
            audit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        matching::validate_theta(self.theta)?;
        if self.classes.len() < 3 {
            return Err(Error::TooFewClasses(self.classes.len()));
        }
        if let Some(l) = &self.ltlm {
            if l.hidden == 0 {
                return Err(Error::Config("hidden size must be at least 1".into()));
            }
            if l.retrain_every == Some(0) {
                return Err(Error::Config("retrain interval must be positive".into()));
            }
            l.schedule.validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self, data: &Datasets) -> Result<PresentationSchedule> {
        make_schedule(&self.classes, &data.train, self.seed, self.shuffle_within)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurvePoint {
    pub new_class: ClassId,
    pub stored_new: usize,
    pub err_old: f64,
    pub err_new: f64,
    pub total_ml_size: usize,
}

/// Per-class error rates plus counts, with helpers for class groups.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub per_class: BTreeMap<ClassId, f64>,
    pub examples: BTreeMap<ClassId, usize>,
}

impl ErrorBreakdown {
    fn from_counts(wrong: &BTreeMap<ClassId, usize>, total: &BTreeMap<ClassId, usize>) -> Self {
        Self {
            per_class: total
                .iter()
                .map(|(&c, &n)| (c, wrong.get(&c).copied().unwrap_or(0) as f64 / n as f64))
                .collect(),
            examples: total.clone(),
        }
    }

    /// Pooled error over the examples of `classes`; `None` if there are none.
    pub fn group(&self, classes: &[ClassId]) -> Option<f64> {
        let (mut wrong, mut total) = (0.0, 0usize);
        for c in classes {
            if let (Some(e), Some(&n)) = (self.per_class.get(c), self.examples.get(c)) {
                wrong += e * n as f64;
                total += n;
            }
        }
        (total > 0).then(|| wrong / total as f64)
    }

    pub fn overall(&self) -> Option<f64> {
        let classes: Vec<ClassId> = self.per_class.keys().copied().collect();
        self.group(&classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtlmSummary {
    pub classes: Vec<ClassId>,
    pub input_dim: usize,
    pub hidden: usize,
    pub training: TrainingReport,
    pub test_errors: ErrorBreakdown,
}

pub struct LtlmOutcome {
    pub mlp: Mlp,
    pub summary: LtlmSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtlmCheckpoint {
    pub stored_new: usize,
    pub err_old: Option<f64>,
    pub err_new: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureSummary {
    pub new_class: ClassId,
    pub presented: usize,
    pub inserted: usize,
    /// Errors of the layer before the first example of the class was shown.
    pub start_err_old: f64,
    pub end_err_old: f64,
    pub end_err_new: f64,
    pub start_errors: ErrorBreakdown,
    pub end_errors: ErrorBreakdown,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub ltlm_checkpoints: Vec<LtlmCheckpoint>,
}

pub struct Exposure {
    pub summary: ExposureSummary,
    pub curve: Vec<ErrorCurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub new_class: Option<ClassId>,
    pub examples: usize,
    pub appended: usize,
    /// Scores of classes other than `new_class` that differ bitwise.
    pub old_score_changes: usize,
    pub flips_total: usize,
    pub flips_to_new: usize,
    pub flips_elsewhere: usize,
    /// Changes of the prediction restricted to the pre-existing classes.
    pub old_only_prediction_changes: usize,
    pub old_class_examples: usize,
    pub old_errors_before: usize,
    pub old_errors_after: usize,
    /// Old-class examples that were right before and now predict `new_class`.
    pub flips_from_correct: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub initial_secs: f64,
    pub exposure_secs: f64,
    pub ltlm_secs: f64,
    pub audit_secs: f64,
    pub total_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: ContinualRunConfig,
    pub seed: u64,
    pub class_order: Vec<ClassId>,
    pub dim: usize,
    pub dropped_train: usize,
    pub dropped_test: usize,
    pub initial_ml_size: usize,
    pub exposures: Vec<ExposureSummary>,
    pub final_stlm: ErrorBreakdown,
    pub initial_ltlm: Option<LtlmSummary>,
    pub final_ltlm: Option<LtlmSummary>,
    pub self_contained_ltlm: Option<LtlmSummary>,
    pub audits: Vec<AuditReport>,
    pub ml_size: usize,
    pub ml_size_by_class: BTreeMap<ClassId, usize>,
    pub timings: Timings,
    #[serde(skip)]
    pub curves: Vec<ErrorCurvePoint>,
}

impl RunReport {
    /// Every class but the last one presented.
    pub fn old_classes(&self) -> &[ClassId] {
        &self.class_order[..self.class_order.len() - 1]
    }

    pub fn last_class(&self) -> ClassId {
        *self.class_order.last().expect("runs have at least three classes")
    }

    pub fn final_stlm_old(&self) -> Option<f64> {
        self.final_stlm.group(self.old_classes())
    }

    pub fn final_stlm_new(&self) -> Option<f64> {
        self.final_stlm.group(&[self.last_class()])
    }

    pub fn write_json(&self, out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(out, self).map_err(|e| Error::Config(format!("report serialization: {e}")))
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub layer: MatchingLayer,
    pub final_ltlm: Option<Mlp>,
    pub self_contained_ltlm: Option<Mlp>,
}

pub struct InitialPhase {
    pub layer: MatchingLayer,
    pub ltlm: Option<LtlmOutcome>,
}

/// Builds the layer from every training example of the initial pair, in
/// schedule order, and optionally trains the LTLM on those examples.
pub fn run_initial_phase(
    config: &ContinualRunConfig,
    data: &Datasets,
    schedule: &PresentationSchedule,
) -> Result<InitialPhase> {
    let mut layer = MatchingLayer::new(data.dim(), config.theta)?;
    for &class in &schedule.initial_pair {
        let mut any = false;
        for x in schedule.examples(&data.train, class) {
            observe(&mut layer, x)?;
            any = true;
        }
        if !any {
            return Err(Error::MissingClass(class));
        }
    }
    let ltlm = match &config.ltlm {
        Some(l) if l.train_initial => Some(run_offline_ltlm(&layer, config, data, &schedule.initial_pair)?),
        _ => None,
    };
    Ok(InitialPhase { layer, ltlm })
}

struct Evaluator<'a> {
    scorer: IncrementalScorer<'a>,
}

impl<'a> Evaluator<'a> {
    fn new(layer: &MatchingLayer, test: &'a DatasetSplit) -> Result<Self> {
        Ok(Self {
            scorer: IncrementalScorer::new(layer, test.examples.iter().collect())?,
        })
    }

    /// Per-class errors over the test examples whose class is in `classes`.
    fn breakdown(&self, classes: &BTreeSet<ClassId>) -> ErrorBreakdown {
        let mut wrong = BTreeMap::new();
        let mut total = BTreeMap::new();
        for (i, x) in self.scorer.examples().iter().enumerate() {
            if !classes.contains(&x.label) {
                continue;
            }
            *total.entry(x.label).or_insert(0) += 1;
            if self.scorer.prediction(i) != Some(x.label) {
                *wrong.entry(x.label).or_insert(0) += 1;
            }
        }
        ErrorBreakdown::from_counts(&wrong, &total)
    }

    fn errors(&self, old: &BTreeSet<ClassId>, new_class: ClassId) -> (f64, f64) {
        let (mut old_wrong, mut old_total, mut new_wrong, mut new_total) = (0usize, 0usize, 0usize, 0usize);
        for (i, x) in self.scorer.examples().iter().enumerate() {
            let wrong = self.scorer.prediction(i) != Some(x.label);
            if x.label == new_class {
                new_total += 1;
                new_wrong += usize::from(wrong);
            } else if old.contains(&x.label) {
                old_total += 1;
                old_wrong += usize::from(wrong);
            }
        }
        let rate = |w: usize, n: usize| if n == 0 { 0.0 } else { w as f64 / n as f64 };
        (rate(old_wrong, old_total), rate(new_wrong, new_total))
    }
}

/// Presents every training example of `new_class` in schedule order and
/// records one curve point per insertion.
pub fn run_exposure(
    layer: &mut MatchingLayer,
    config: &ContinualRunConfig,
    data: &Datasets,
    schedule: &PresentationSchedule,
    new_class: ClassId,
) -> Result<Exposure> {
    let mut eval = Evaluator::new(layer, &data.test)?;
    expose(layer, config, data, schedule, new_class, &mut eval)
}

fn expose(
    layer: &mut MatchingLayer,
    config: &ContinualRunConfig,
    data: &Datasets,
    schedule: &PresentationSchedule,
    new_class: ClassId,
    eval: &mut Evaluator<'_>,
) -> Result<Exposure> {
    if layer.contains_class(new_class) {
        return Err(Error::Precondition(format!(
            "class {new_class} is already stored in the layer"
        )));
    }
    let old: BTreeSet<ClassId> = layer.classes().collect();
    if old.is_empty() {
        return Err(Error::Precondition("exposure needs a non-empty layer".into()));
    }
    let mut both = old.clone();
    both.insert(new_class);
    for &c in &both {
        if !data.test.class_set.contains(&c) {
            return Err(Error::MissingClass(c));
        }
    }

    let start_errors = eval.breakdown(&both);
    let (start_err_old, _) = eval.errors(&old, new_class);
    let retrain = config.ltlm.as_ref().and_then(|l| l.retrain_every);
    let mut checkpoints = Vec::new();
    let mut presented = 0usize;
    let mut presented_new: Vec<&Example> = Vec::new();
    let mut inserted = Vec::new();
    // the layer never depends on the evaluation, so insert first and
    // replay the insertions through the scorer in cache-sized blocks
    for x in schedule.examples(&data.train, new_class) {
        presented += 1;
        presented_new.push(x);
        let outcome = observe(layer, x)?;
        let Some(index) = outcome.neuron_index else {
            continue;
        };
        inserted.push(index);
        if let Some(every) = retrain {
            if inserted.len() % every == 0 {
                checkpoints.push(retrain_checkpoint(
                    layer,
                    config,
                    data,
                    &old,
                    new_class,
                    &presented_new,
                )?);
            }
        }
    }

    let (mut n_old, mut n_new) = (0usize, 0usize);
    for x in eval.scorer.examples() {
        if x.label == new_class {
            n_new += 1;
        } else if old.contains(&x.label) {
            n_old += 1;
        }
    }
    let rate = |w: usize, n: usize| if n == 0 { 0.0 } else { w as f64 / n as f64 };
    let first_size = layer.len() - inserted.len();
    let mut curve = Vec::with_capacity(inserted.len());
    for (b, block) in inserted.chunks(BLOCK).enumerate() {
        let neurons: Vec<&MlNeuron> = block.iter().map(|&j| &layer.neurons()[j]).collect();
        let mut wrong_old = vec![0usize; block.len()];
        let mut wrong_new = vec![0usize; block.len()];
        let examples: Vec<&Example> = eval.scorer.examples().to_vec();
        eval.scorer.add_neurons_with(&neurons, |k, i, p| {
            let label = examples[i].label;
            if p != Some(label) {
                if label == new_class {
                    wrong_new[k] += 1;
                } else if old.contains(&label) {
                    wrong_old[k] += 1;
                }
            }
        })?;
        for k in 0..block.len() {
            let stored = b * BLOCK + k + 1;
            curve.push(ErrorCurvePoint {
                new_class,
                stored_new: stored,
                err_old: rate(wrong_old[k], n_old),
                err_new: rate(wrong_new[k], n_new),
                total_ml_size: first_size + stored,
            });
        }
    }
    if presented == 0 {
        return Err(Error::MissingClass(new_class));
    }
    let end_errors = eval.breakdown(&both);
    let (end_err_old, end_err_new) = eval.errors(&old, new_class);
    Ok(Exposure {
        summary: ExposureSummary {
            new_class,
            presented,
            inserted: curve.len(),
            start_err_old,
            end_err_old,
            end_err_new,
            start_errors,
            end_errors,
            ltlm_checkpoints: checkpoints,
        },
        curve,
    })
}

fn retrain_checkpoint(
    layer: &MatchingLayer,
    config: &ContinualRunConfig,
    data: &Datasets,
    old: &BTreeSet<ClassId>,
    new_class: ClassId,
    presented_new: &[&Example],
) -> Result<LtlmCheckpoint> {
    let l = config.ltlm.as_ref().expect("retraining requires an LTLM config");
    let mut examples: Vec<&Example> = data.train.examples.iter().filter(|e| old.contains(&e.label)).collect();
    examples.extend_from_slice(presented_new);
    let mut classes: Vec<ClassId> = old.iter().copied().collect();
    classes.push(new_class);
    let outcome = train_fresh(layer, l, &classes, examples, l.schedule.clone(), data)?;
    let old_classes: Vec<ClassId> = old.iter().copied().collect();
    Ok(LtlmCheckpoint {
        stored_new: layer.class_indices(new_class).len(),
        err_old: outcome.summary.test_errors.group(&old_classes),
        err_new: outcome.summary.test_errors.group(&[new_class]),
    })
}

fn train_fresh(
    layer: &MatchingLayer,
    l: &LtlmConfig,
    classes: &[ClassId],
    examples: Vec<&Example>,
    schedule: TrainingSchedule,
    data: &Datasets,
) -> Result<LtlmOutcome> {
    let labels: Vec<ClassId> = examples.iter().map(|e| e.label).collect();
    let mut mlp = Mlp::new(layer.len(), l.hidden, classes.to_vec(), schedule.seed)?;
    let inputs = TrainingInputs::from_layer(layer, examples)?;
    let training = ltlm::train_on(&mut mlp, &inputs, &labels, &schedule)?;
    let test_errors = ltlm_breakdown(&mlp, layer, &data.test, classes)?;
    Ok(LtlmOutcome {
        summary: LtlmSummary {
            classes: mlp.class_order.clone(),
            input_dim: mlp.input_dim(),
            hidden: mlp.hidden(),
            training,
            test_errors,
        },
        mlp,
    })
}

fn ltlm_breakdown(
    mlp: &Mlp,
    layer: &MatchingLayer,
    test: &DatasetSplit,
    classes: &[ClassId],
) -> Result<ErrorBreakdown> {
    let set: BTreeSet<ClassId> = classes.iter().copied().collect();
    let split = dataset::filter_classes(test, &set)?;
    let mut out = ErrorBreakdown::default();
    for &c in &set {
        let only = dataset::filter_classes(&split, &BTreeSet::from([c]))?;
        out.per_class.insert(c, ltlm::ltlm_error_rate(mlp, layer, &only)?);
        out.examples.insert(c, only.len());
    }
    Ok(out)
}

fn ltlm_config(config: &ContinualRunConfig) -> Result<&LtlmConfig> {
    config
        .ltlm
        .as_ref()
        .ok_or_else(|| Error::Config("the run has no LTLM configuration".into()))
}

/// Trains a fresh LTLM (input size = current layer size) on every training
/// example of `classes` and evaluates it on their test examples.
pub fn run_offline_ltlm(
    layer: &MatchingLayer,
    config: &ContinualRunConfig,
    data: &Datasets,
    classes: &[ClassId],
) -> Result<LtlmOutcome> {
    let l = ltlm_config(config)?;
    if layer.is_empty() {
        return Err(Error::Precondition("cannot train an LTLM on an empty layer".into()));
    }
    let set: BTreeSet<ClassId> = classes.iter().copied().collect();
    let examples: Vec<&Example> = data.train.examples.iter().filter(|e| set.contains(&e.label)).collect();
    if examples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    train_fresh(layer, l, classes, examples, l.schedule.clone(), data)
}

/// Trains a fresh LTLM only on the examples imprinted in the layer's
/// neurons of `classes`, with mini-batches of [`SELF_CONTAINED_BATCH`].
pub fn run_self_contained(
    layer: &MatchingLayer,
    config: &ContinualRunConfig,
    data: &Datasets,
    classes: &[ClassId],
) -> Result<LtlmOutcome> {
    let l = ltlm_config(config)?;
    if layer.is_empty() {
        return Err(Error::Precondition("cannot train an LTLM on an empty layer".into()));
    }
    let stored = stored_examples(layer, classes);
    if stored.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if stored.len() < SELF_CONTAINED_BATCH {
        log::info!(
            "self-contained training: {} stored examples, batch clamped from {SELF_CONTAINED_BATCH}",
            stored.len()
        );
    }
    let schedule = l.schedule.clone().with_batch_size(SELF_CONTAINED_BATCH);
    train_fresh(layer, l, classes, stored.iter().collect(), schedule, data)
}

/// The stored unit vectors of `classes` as examples, in insertion order.
/// `source_index` is the neuron index.
pub fn stored_examples(layer: &MatchingLayer, classes: &[ClassId]) -> Vec<Example> {
    let set: BTreeSet<ClassId> = classes.iter().copied().collect();
    layer
        .neurons()
        .iter()
        .enumerate()
        .filter(|(_, n)| set.contains(&n.label))
        .map(|(i, n)| Example {
            vector: n.weights.clone(),
            label: n.label,
            source_index: i,
        })
        .collect()
}

/// The full protocol: initial pair, one exposure per further class, then the
/// final LTLM(s).
pub fn run_sequential(config: &ContinualRunConfig, data: &Datasets) -> Result<RunOutcome> {
    config.validate()?;
    let total = Instant::now();
    let data = data.restrict(&config.classes)?;
    let schedule = config.schedule(&data)?;
    let mut timings = Timings::default();

    let t = Instant::now();
    let InitialPhase {
        mut layer,
        ltlm: initial,
    } = run_initial_phase(config, &data, &schedule)?;
    timings.initial_secs = t.elapsed().as_secs_f64();
    let initial_ml_size = layer.len();

    let mut eval = Evaluator::new(&layer, &data.test)?;
    let mut exposures = Vec::new();
    let mut curves = Vec::new();
    let mut audits = Vec::new();
    for &class in &schedule.subsequent_classes {
        let before = config.audit.then(|| layer.clone());
        let t = Instant::now();
        let exposure = expose(&mut layer, config, &data, &schedule, class, &mut eval)?;
        timings.exposure_secs += t.elapsed().as_secs_f64();
        if let Some(before) = before {
            let t = Instant::now();
            audits.push(evaluate_interference_audit(&before, &layer, &data.test)?);
            timings.audit_secs += t.elapsed().as_secs_f64();
        }
        log::info!(
            "class {class}: {} presented, {} stored, err_old {:.4} -> {:.4}, err_new {:.4}",
            exposure.summary.presented,
            exposure.summary.inserted,
            exposure.summary.start_err_old,
            exposure.summary.end_err_old,
            exposure.summary.end_err_new
        );
        exposures.push(exposure.summary);
        curves.extend(exposure.curve);
    }
    let all: BTreeSet<ClassId> = config.classes.iter().copied().collect();
    let final_stlm = eval.breakdown(&all);

    let t = Instant::now();
    let (mut final_ltlm, mut self_ltlm) = (None, None);
    if let Some(l) = &config.ltlm {
        if l.train_final {
            final_ltlm = Some(run_offline_ltlm(&layer, config, &data, &config.classes)?);
        }
        if l.self_contained {
            self_ltlm = Some(run_self_contained(&layer, config, &data, &config.classes)?);
        }
    }
    timings.ltlm_secs = t.elapsed().as_secs_f64() + initial.as_ref().map_or(0.0, |o| o.summary.training.wall_time_secs);
    timings.total_secs = total.elapsed().as_secs_f64();

    let report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        config: config.clone(),
        seed: config.seed,
        class_order: schedule.classes(),
        dim: data.dim(),
        dropped_train: data.train.dropped,
        dropped_test: data.test.dropped,
        initial_ml_size,
        exposures,
        final_stlm,
        initial_ltlm: initial.map(|o| o.summary),
        final_ltlm: final_ltlm.as_ref().map(|o| o.summary.clone()),
        self_contained_ltlm: self_ltlm.as_ref().map(|o| o.summary.clone()),
        audits,
        ml_size: layer.len(),
        ml_size_by_class: matching::size_by_class(&layer),
        timings,
        curves,
    };
    Ok(RunOutcome {
        report,
        layer,
        final_ltlm: final_ltlm.map(|o| o.mlp),
        self_contained_ltlm: self_ltlm.map(|o| o.mlp),
    })
}

/// Checks that going from `before` to `after` (which must append neurons of
/// a single class `c`) left every other class's score bit-identical on each
/// example of `split`, and that every changed prediction moved to `c`.
///
/// Scores are recomputed from scratch through [`ml_forward_batch`] and
/// [`stlm_scores`], independently of the incremental evaluator.
pub fn evaluate_interference_audit(
    before: &MatchingLayer,
    after: &MatchingLayer,
    split: &DatasetSplit,
) -> Result<AuditReport> {
    if before.dim() != after.dim() || after.len() < before.len() || before.neurons() != &after.neurons()[..before.len()]
    {
        return Err(Error::Precondition("layer_after does not extend layer_before".into()));
    }
    let appended = &after.neurons()[before.len()..];
    let new_class = appended.first().map(|n| n.label);
    if appended.iter().any(|n| Some(n.label) != new_class) {
        return Err(Error::Precondition("appended neurons span more than one class".into()));
    }
    let old_classes: BTreeSet<ClassId> = before.classes().collect();

    let mut report = AuditReport {
        new_class,
        examples: split.len(),
        appended: appended.len(),
        old_score_changes: 0,
        flips_total: 0,
        flips_to_new: 0,
        flips_elsewhere: 0,
        old_only_prediction_changes: 0,
        old_class_examples: 0,
        old_errors_before: 0,
        old_errors_after: 0,
        flips_from_correct: 0,
        passed: false,
    };
    let refs: Vec<&Example> = split.examples.iter().collect();
    for chunk in refs.chunks(BLOCK) {
        for (x, h_after) in chunk.iter().zip(ml_forward_batch(after, chunk)?) {
            let h_before = MlActivations {
                h: h_after.h[..before.len()].to_vec(),
                layer_size: before.len(),
            };
            let s_before = stlm_scores(before, &h_before)?;
            let s_after = stlm_scores(after, &h_after)?;

            for (&c, &s) in &s_before.scores {
                if Some(c) != new_class && s_after.get(c).to_bits() != s.to_bits() {
                    report.old_score_changes += 1;
                }
            }
            let p_after = predict(&s_after)?;
            let p_before = predict(&s_before).ok();
            let p_after_old = predict(&restrict(&s_after, &old_classes)).ok();
            if p_after_old != p_before {
                report.old_only_prediction_changes += 1;
            }
            if p_before != Some(p_after) {
                report.flips_total += 1;
                if Some(p_after) == new_class {
                    report.flips_to_new += 1;
                } else {
                    report.flips_elsewhere += 1;
                }
            }
            if old_classes.contains(&x.label) && Some(x.label) != new_class {
                report.old_class_examples += 1;
                let right_before = p_before == Some(x.label);
                report.old_errors_before += usize::from(!right_before);
                report.old_errors_after += usize::from(p_after != x.label);
                if right_before && Some(p_after) == new_class {
                    report.flips_from_correct += 1;
                }
            }
        }
    }
    report.passed = report.old_score_changes == 0
        && report.flips_elsewhere == 0
        && report.old_only_prediction_changes == 0
        && report.old_errors_after == report.old_errors_before + report.flips_from_correct;
    Ok(report)
}

fn restrict(scores: &ClassScores, classes: &BTreeSet<ClassId>) -> ClassScores {
    ClassScores {
        scores: scores
            .scores
            .iter()
            .filter(|(c, _)| classes.contains(c))
            .map(|(&c, &s)| (c, s))
            .collect(),
    }
}

/// Writes the curve CSV: header, then one LF-terminated row per insertion
/// with errors at 6 decimals.
pub fn write_curve_csv(points: &[ErrorCurvePoint], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CURVE_CSV_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{}",
            p.new_class, p.stored_new, p.err_old, p.err_new, p.total_ml_size
        )?;
    }
    Ok(())
}

pub const SWEEP_CSV_HEADER: &str = "theta,ml_size,stlm_err_old,stlm_err_new,ltlm_err_old,ltlm_err_new";

/// One row of a threshold sweep. "old" pools every class but the last one
/// presented; "new" is the last class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub ml_size: usize,
    pub stlm_err_old: Option<f64>,
    pub stlm_err_new: Option<f64>,
    pub ltlm_err_old: Option<f64>,
    pub ltlm_err_new: Option<f64>,
}

impl SweepRow {
    pub fn from_report(report: &RunReport) -> Self {
        let ltlm = report.final_ltlm.as_ref().map(|l| &l.test_errors);
        Self {
            theta: report.config.theta,
            ml_size: report.ml_size,
            stlm_err_old: report.final_stlm_old(),
            stlm_err_new: report.final_stlm_new(),
            ltlm_err_old: ltlm.and_then(|e| e.group(report.old_classes())),
            ltlm_err_new: ltlm.and_then(|e| e.group(&[report.last_class()])),
        }
    }
}

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> std::io::Result<()> {
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.theta,
            r.ml_size,
            cell(r.stlm_err_old),
            cell(r.stlm_err_new),
            cell(r.ltlm_err_old),
            cell(r.ltlm_err_new)
        )?;
    }
    Ok(())
}
