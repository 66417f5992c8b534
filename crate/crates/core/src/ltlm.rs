//! Long-term learner: a single-hidden-layer perceptron fed with the raw
//! matching-layer activations (unit gain, no gate).
//!
//! `out = W_out * sigmoid(W_hidden * u + b_hidden) + b_out`, trained by
//! plain mini-batch gradient descent on the mean squared error against
//! one-hot targets, in two constant-learning-rate phases.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::dataset::{ClassId, DatasetSplit, Example};
use crate::error::{Error, Result};
use crate::matching::{ml_forward, MatchingLayer};
use crate::rng;

pub const DEFAULT_HIDDEN: usize = 200;
pub const DYNW_MAGIC: &[u8; 4] = b"DYNW";
pub const DYNW_VERSION: u32 = 1;

/// Input matrices larger than this are not cached; rows are recomputed
/// from the matching layer for every mini-batch instead.
pub const INPUT_CACHE_LIMIT_BYTES: usize = 1 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// hidden x input
    pub w_hidden: Array2<f64>,
    pub b_hidden: Array1<f64>,
    /// classes x hidden
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    /// Output index -> class id, ascending.
    pub class_order: Vec<ClassId>,
}

fn sorted_classes(mut classes: Vec<ClassId>) -> Result<Vec<ClassId>> {
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::Config("an MLP needs at least one output class".into()));
    }
    Ok(classes)
}

impl Mlp {
    /// Fresh network with weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(input_dim: usize, hidden: usize, class_order: Vec<ClassId>, seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(input_dim, hidden, class_order)?;
        let mut rng = rng::stream(seed, rng::INIT_STREAM);
        let bound_h = 1.0 / (input_dim as f64).sqrt();
        let bound_o = 1.0 / (hidden as f64).sqrt();
        mlp.w_hidden.mapv_inplace(|_| rng.random_range(-bound_h..bound_h));
        mlp.b_hidden.mapv_inplace(|_| rng.random_range(-bound_h..bound_h));
        mlp.w_out.mapv_inplace(|_| rng.random_range(-bound_o..bound_o));
        mlp.b_out.mapv_inplace(|_| rng.random_range(-bound_o..bound_o));
        Ok(mlp)
    }

    pub fn zeros(input_dim: usize, hidden: usize, class_order: Vec<ClassId>) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "MLP sizes must be positive (input {input_dim}, hidden {hidden})"
            )));
        }
        let class_order = sorted_classes(class_order)?;
        let n = class_order.len();
        Ok(Self {
            w_hidden: Array2::zeros((hidden, input_dim)),
            b_hidden: Array1::zeros(hidden),
            w_out: Array2::zeros((n, hidden)),
            b_out: Array1::zeros(n),
            class_order,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_hidden.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w_hidden.iter().all(|v| v.is_finite())
            && self.b_hidden.iter().all(|v| v.is_finite())
            && self.w_out.iter().all(|v| v.is_finite())
            && self.b_out.iter().all(|v| v.is_finite())
    }

    fn output_index(&self, class: ClassId) -> Option<usize> {
        self.class_order.binary_search(&class).ok()
    }

    /// Class of the largest output; the lowest class id wins ties.
    pub fn decide(&self, outputs: &[f64]) -> ClassId {
        let mut best = 0;
        for (i, &o) in outputs.iter().enumerate() {
            if o > outputs[best] {
                best = i;
            }
        }
        self.class_order[best]
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The LTLM input for `x`: its matching-layer activations, unchanged.
pub fn ltlm_input(layer: &MatchingLayer, x: &Example) -> Result<Vec<f64>> {
    Ok(ml_forward(layer, x)?.h)
}

struct Activations {
    hidden: Array2<f64>,
    out: Array2<f64>,
}

fn forward_batch(mlp: &Mlp, inputs: ArrayView2<f64>) -> Activations {
    let mut hidden = inputs.dot(&mlp.w_hidden.t());
    hidden += &mlp.b_hidden;
    hidden.mapv_inplace(sigmoid);
    let mut out = hidden.dot(&mlp.w_out.t());
    out += &mlp.b_out;
    Activations { hidden, out }
}

pub fn forward(mlp: &Mlp, u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != mlp.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: mlp.input_dim(),
            found: u.len(),
        });
    }
    let view = ArrayView2::from_shape((1, u.len()), u).expect("row view");
    Ok(forward_batch(mlp, view).out.row(0).to_vec())
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: pred.len(),
            found: target.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Gradients of the batch loss `1/(B*C) * sum (out - target)^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w_hidden: Array2<f64>,
    pub b_hidden: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    /// Loss of the batch at the current weights.
    pub loss: f64,
}

pub fn backward(mlp: &Mlp, inputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Gradients> {
    if inputs.ncols() != mlp.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: mlp.input_dim(),
            found: inputs.ncols(),
        });
    }
    if targets.ncols() != mlp.n_classes() || targets.nrows() != inputs.nrows() {
        return Err(Error::LengthMismatch {
            expected: inputs.nrows() * mlp.n_classes(),
            found: targets.len(),
        });
    }
    if inputs.nrows() == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let Activations { hidden, out } = forward_batch(mlp, inputs);
    let scale = 1.0 / (out.len() as f64);

    let diff = &out - &targets;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
    let d_out = diff * (2.0 * scale);

    let w_out = d_out.t().dot(&hidden);
    let b_out = d_out.sum_axis(Axis(0));
    let mut d_hidden = d_out.dot(&mlp.w_out);
    d_hidden.zip_mut_with(&hidden, |d, &a| *d *= a * (1.0 - a));
    let w_hidden = d_hidden.t().dot(&inputs);
    let b_hidden = d_hidden.sum_axis(Axis(0));

    Ok(Gradients {
        w_hidden,
        b_hidden,
        w_out,
        b_out,
        loss,
    })
}

fn apply(mlp: &mut Mlp, grads: &Gradients, lr: f64) {
    mlp.w_hidden.scaled_add(-lr, &grads.w_hidden);
    mlp.b_hidden.scaled_add(-lr, &grads.b_hidden);
    mlp.w_out.scaled_add(-lr, &grads.w_out);
    mlp.b_out.scaled_add(-lr, &grads.b_out);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochMode {
    /// One epoch is a full pass over the training set.
    #[default]
    FullPass,
    /// One epoch is a single mini-batch step.
    SingleBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub phase1_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_epochs: usize,
    pub phase2_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub epoch_mode: EpochMode,
}

impl TrainingSchedule {
    /// Two-phase regimen at full length: 4000 epochs at 1e-4, then 2000 at 1e-5.
    pub fn full(seed: u64) -> Self {
        Self {
            phase1_epochs: 4000,
            phase1_lr: 1e-4,
            phase2_epochs: 2000,
            phase2_lr: 1e-5,
            batch_size: 100,
            seed,
            epoch_mode: EpochMode::FullPass,
        }
    }

    /// Longer regimen used for CIFAR-100 features: 8000 + 4000 epochs.
    pub fn full_cifar(seed: u64) -> Self {
        Self {
            phase1_epochs: 8000,
            phase2_epochs: 4000,
            ..Self::full(seed)
        }
    }

    /// Desk-scale default: 200 + 100 epochs with the same learning rates.
    pub fn scaled(seed: u64) -> Self {
        Self {
            phase1_epochs: 200,
            phase2_epochs: 100,
            ..Self::full(seed)
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phase1_lr > 0.0 && self.phase2_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.phase2_lr >= self.phase1_lr {
            return Err(Error::Config(format!(
                "phase 2 learning rate {} must be below phase 1 rate {}",
                self.phase2_lr, self.phase1_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean loss over the last epoch of each phase; `None` if the phase was empty.
    pub phase1_final_loss: Option<f64>,
    pub phase2_final_loss: Option<f64>,
    pub epochs_run: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub examples: usize,
    pub wall_time_secs: f64,
}

/// Where training rows come from.
pub enum TrainingInputs<'a> {
    /// Precomputed rows (examples x input_dim).
    Cached(Array2<f64>),
    /// Rows recomputed from the layer on demand.
    OnTheFly {
        layer: &'a MatchingLayer,
        examples: Vec<&'a Example>,
    },
}

impl<'a> TrainingInputs<'a> {
    /// Activations of `examples` against `layer`, cached unless the matrix
    /// would exceed [`INPUT_CACHE_LIMIT_BYTES`].
    pub fn from_layer(layer: &'a MatchingLayer, examples: Vec<&'a Example>) -> Result<Self> {
        let bytes = examples.len() * layer.len() * std::mem::size_of::<f64>();
        if bytes > INPUT_CACHE_LIMIT_BYTES {
            log::info!("LTLM inputs would take {} MiB; computing them per batch", bytes >> 20);
            for x in &examples {
                ml_forward(layer, x)?;
            }
            return Ok(Self::OnTheFly { layer, examples });
        }
        let mut rows = Array2::zeros((examples.len(), layer.len()));
        for (mut row, x) in rows.rows_mut().into_iter().zip(&examples) {
            let h = ltlm_input(layer, x)?;
            row.assign(&Array1::from(h));
        }
        Ok(Self::Cached(rows))
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Cached(rows) => rows.nrows(),
            Self::OnTheFly { examples, .. } => examples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Cached(rows) => rows.ncols(),
            Self::OnTheFly { layer, .. } => layer.len(),
        }
    }

    fn gather(&self, idx: &[usize]) -> Array2<f64> {
        match self {
            Self::Cached(rows) => rows.select(Axis(0), idx),
            Self::OnTheFly { layer, examples } => {
                let mut out = Array2::zeros((idx.len(), layer.len()));
                for (mut row, &i) in out.rows_mut().into_iter().zip(idx) {
                    let h = ltlm_input(layer, examples[i]).expect("inputs validated at construction");
                    row.assign(&Array1::from(h));
                }
                out
            }
        }
    }
}

fn one_hot(mlp: &Mlp, labels: &[ClassId], idx: &[usize]) -> Array2<f64> {
    let mut t = Array2::zeros((idx.len(), mlp.n_classes()));
    for (r, &i) in idx.iter().enumerate() {
        let c = mlp
            .output_index(labels[i])
            .expect("labels validated against class_order");
        t[[r, c]] = 1.0;
    }
    t
}

/// Trains `mlp` on the activations of every example in `train_split`.
pub fn train(
    mlp: &mut Mlp,
    layer: &MatchingLayer,
    train_split: &DatasetSplit,
    schedule: &TrainingSchedule,
) -> Result<TrainingReport> {
    if mlp.input_dim() != layer.len() {
        return Err(Error::DimensionMismatch {
            expected: layer.len(),
            found: mlp.input_dim(),
        });
    }
    let examples: Vec<&Example> = train_split.examples.iter().collect();
    let labels: Vec<ClassId> = examples.iter().map(|e| e.label).collect();
    let inputs = TrainingInputs::from_layer(layer, examples)?;
    train_on(mlp, &inputs, &labels, schedule)
}

/// Runs both phases of `schedule` over precomputed inputs.
pub fn train_on(
    mlp: &mut Mlp,
    inputs: &TrainingInputs<'_>,
    labels: &[ClassId],
    schedule: &TrainingSchedule,
) -> Result<TrainingReport> {
    schedule.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if inputs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: inputs.len(),
            found: labels.len(),
        });
    }
    if inputs.dim() != mlp.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: mlp.input_dim(),
            found: inputs.dim(),
        });
    }
    if let Some(&c) = labels.iter().find(|&&c| mlp.output_index(c).is_none()) {
        return Err(Error::Precondition(format!("label {c} is not an MLP output class")));
    }

    let start = Instant::now();
    let batch_size = schedule.batch_size.min(inputs.len());
    let mut report = TrainingReport {
        batch_size,
        examples: inputs.len(),
        ..TrainingReport::default()
    };
    let mut rng = rng::stream(schedule.seed, rng::EPOCH_STREAM);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut cursor = order.len();

    let phases = [
        (1u8, schedule.phase1_epochs, schedule.phase1_lr),
        (2u8, schedule.phase2_epochs, schedule.phase2_lr),
    ];
    for (phase, epochs, lr) in phases {
        let mut last = None;
        for epoch in 0..epochs {
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            let steps = match schedule.epoch_mode {
                EpochMode::FullPass => {
                    order.shuffle(&mut rng);
                    cursor = 0;
                    (order.len() + batch_size - 1) / batch_size
                }
                EpochMode::SingleBatch => 1,
            };
            for _ in 0..steps {
                if cursor >= order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let end = (cursor + batch_size).min(order.len());
                let idx = &order[cursor..end];
                cursor = end;

                let x = inputs.gather(idx);
                let t = one_hot(mlp, labels, idx);
                let grads = backward(mlp, x.view(), t.view())?;
                apply(mlp, &grads, lr);
                report.steps += 1;
                loss_sum += grads.loss * idx.len() as f64;
                seen += idx.len();
                if !grads.loss.is_finite() || !mlp.is_finite() {
                    report.epochs_run += 1;
                    report.wall_time_secs = start.elapsed().as_secs_f64();
                    return Err(Error::NonFiniteLoss {
                        phase,
                        epoch,
                        report: Box::new(report),
                    });
                }
            }
            last = Some(loss_sum / seen as f64);
            report.epochs_run += 1;
        }
        match phase {
            1 => report.phase1_final_loss = last,
            _ => report.phase2_final_loss = last,
        }
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean loss over all rows at the current weights.
pub fn dataset_loss(mlp: &Mlp, inputs: &TrainingInputs<'_>, labels: &[ClassId]) -> Result<f64> {
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let x = inputs.gather(&idx);
    let t = one_hot(mlp, labels, &idx);
    let out = forward_batch(mlp, x.view()).out;
    Ok((&out - &t).iter().map(|d| d * d).sum::<f64>() / out.len() as f64)
}

/// Fraction of `split` misclassified by argmax over the MLP outputs.
/// Labels outside `class_order` always count as errors.
pub fn ltlm_error_rate(mlp: &Mlp, layer: &MatchingLayer, split: &DatasetSplit) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::NoExamples);
    }
    if mlp.input_dim() != layer.len() {
        return Err(Error::DimensionMismatch {
            expected: layer.len(),
            found: mlp.input_dim(),
        });
    }
    let mut wrong = 0usize;
    for chunk in split.examples.chunks(256) {
        let mut rows = Array2::zeros((chunk.len(), layer.len()));
        for (mut row, x) in rows.rows_mut().into_iter().zip(chunk) {
            row.assign(&Array1::from(ltlm_input(layer, x)?));
        }
        let out = forward_batch(mlp, rows.view()).out;
        for (o, x) in out.rows().into_iter().zip(chunk) {
            let o = o.to_vec();
            if mlp.decide(&o) != x.label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / split.len() as f64)
}

/// Writes a DYNW weight snapshot: `"DYNW"`, u32 version, u32 input dim,
/// u32 hidden, u32 classes, row-major f64 blocks `w_hidden`, `b_hidden`,
/// `w_out`, `b_out`, then the class order as u32s. Little-endian.
pub fn save_weights(mlp: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(DYNW_MAGIC).map_err(io)?;
    for v in [
        DYNW_VERSION,
        mlp.input_dim() as u32,
        mlp.hidden() as u32,
        mlp.n_classes() as u32,
    ] {
        out.write_u32::<LittleEndian>(v).map_err(io)?;
    }
    let blocks = mlp
        .w_hidden
        .iter()
        .chain(mlp.b_hidden.iter())
        .chain(mlp.w_out.iter())
        .chain(mlp.b_out.iter());
    for &v in blocks {
        out.write_f64::<LittleEndian>(v).map_err(io)?;
    }
    for &c in &mlp.class_order {
        out.write_u32::<LittleEndian>(c).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Mlp> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let need = |len: usize| -> Result<()> {
        if bytes.len() < len {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                offset: bytes.len() as u64,
                needed: (len - bytes.len()) as u64,
            });
        }
        Ok(())
    };
    need(4)?;
    if &bytes[0..4] != DYNW_MAGIC {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
            offset: 0,
            expected: "DYNW".into(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    need(20)?;
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != DYNW_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            offset: 4,
            expected: DYNW_VERSION,
            found: version,
        });
    }
    let input = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let hidden = LittleEndian::read_u32(&bytes[12..16]) as usize;
    let classes = LittleEndian::read_u32(&bytes[16..20]) as usize;
    let floats = hidden * input + hidden + classes * hidden + classes;
    need(20 + 8 * floats + 4 * classes)?;

    let mut values = bytes[20..20 + 8 * floats].chunks_exact(8).map(LittleEndian::read_f64);
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let w_hidden = Array2::from_shape_vec((hidden, input), take(hidden * input)).expect("shape");
    let b_hidden = Array1::from(take(hidden));
    let w_out = Array2::from_shape_vec((classes, hidden), take(classes * hidden)).expect("shape");
    let b_out = Array1::from(take(classes));
    let class_order: Vec<ClassId> = bytes[20 + 8 * floats..20 + 8 * floats + 4 * classes]
        .chunks_exact(4)
        .map(LittleEndian::read_u32)
        .collect();
    let mut mlp = Mlp::zeros(input, hidden, class_order.clone()).map_err(|e| Error::InvalidHeader {
        path: path.to_path_buf(),
        offset: 8,
        reason: e.to_string(),
    })?;
    if mlp.class_order != class_order {
        return Err(Error::InvalidHeader {
            path: path.to_path_buf(),
            offset: (20 + 8 * floats) as u64,
            reason: "class order is not strictly ascending".into(),
        });
    }
    mlp.w_hidden = w_hidden;
    mlp.b_hidden = b_hidden;
    mlp.w_out = w_out;
    mlp.b_out = b_out;
    Ok(mlp)
}
