//! The matching layer: a growing bank of neurons whose incoming weights are
//! imprinted copies of unit-length training examples.
//!
//! Neuron `i` stores example `x^i / ||x^i||`, so its activation for a unit
//! input `x` is the cosine similarity `h_i = <w_i, x>`. (The imprinting rule
//! is sometimes printed as `w_ij = x_j^l / ||x_i||`; the `l` stands for the
//! `i`-th stored example.)
//!
//! Growth is decided per class: an example is stored when no neuron of its
//! own class has similarity above `theta`. Neurons of other classes never
//! influence that decision.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::dataset::{ClassId, Example};
use crate::error::{Error, Result};
use crate::vector;

pub const DYNM_MAGIC: &[u8; 4] = b"DYNM";
pub const DYNM_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MlNeuron {
    pub weights: Vec<f64>,
    pub label: ClassId,
    pub insertion_ordinal: u64,
}

/// Presentation counters. Not part of the persisted state.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PresentationLog {
    pub presented: BTreeMap<ClassId, u64>,
    pub rejected: BTreeMap<ClassId, u64>,
}

#[derive(Clone, Debug)]
pub struct MatchingLayer {
    dim: usize,
    theta: f64,
    neurons: Vec<MlNeuron>,
    by_class: BTreeMap<ClassId, Vec<usize>>,
    next_ordinal: u64,
    log: PresentationLog,
}

/// Equality covers what a memory snapshot persists: dim, theta and neurons.
impl PartialEq for MatchingLayer {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.theta.to_bits() == other.theta.to_bits() && self.neurons == other.neurons
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlActivations {
    pub h: Vec<f64>,
    /// Neuron count of the layer the activations were computed against.
    pub layer_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InsertionOutcome {
    pub inserted: bool,
    pub neuron_index: Option<usize>,
    pub max_same_class_sim: Option<f64>,
}

pub fn validate_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTheta(theta))
    }
}

impl MatchingLayer {
    pub fn new(dim: usize, theta: f64) -> Result<Self> {
        validate_theta(theta)?;
        if dim == 0 {
            return Err(Error::Config("matching layer dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            theta,
            neurons: Vec::new(),
            by_class: BTreeMap::new(),
            next_ordinal: 0,
            log: PresentationLog::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn neurons(&self) -> &[MlNeuron] {
        &self.neurons
    }

    pub fn log(&self) -> &PresentationLog {
        &self.log
    }

    /// Classes with at least one neuron, ascending.
    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.by_class.keys().copied()
    }

    pub fn contains_class(&self, class: ClassId) -> bool {
        self.by_class.contains_key(&class)
    }

    /// Indices of the neurons labeled `class`, in insertion order.
    pub fn class_indices(&self, class: ClassId) -> &[usize] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    fn check_input(&self, x: &Example) -> Result<()> {
        if x.vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.vector.len(),
            });
        }
        if !vector::is_unit(&x.vector) {
            return Err(Error::NotNormalized {
                source_index: x.source_index,
                norm: vector::norm(&x.vector),
            });
        }
        Ok(())
    }

    fn push(&mut self, weights: Vec<f64>, label: ClassId, insertion_ordinal: u64) -> usize {
        let index = self.neurons.len();
        self.neurons.push(MlNeuron {
            weights,
            label,
            insertion_ordinal,
        });
        self.by_class.entry(label).or_default().push(index);
        self.next_ordinal = insertion_ordinal + 1;
        index
    }
}

/// Cosine similarity of `x` against every stored neuron, in insertion order.
pub fn ml_forward(layer: &MatchingLayer, x: &Example) -> Result<MlActivations> {
    layer.check_input(x)?;
    Ok(MlActivations {
        h: layer
            .neurons
            .iter()
            .map(|n| vector::dot(&n.weights, &x.vector))
            .collect(),
        layer_size: layer.len(),
    })
}

/// [`ml_forward`] for several inputs at once, sweeping the neurons once
/// per call. Results are bitwise identical to per-input calls.
pub fn ml_forward_batch(layer: &MatchingLayer, xs: &[&Example]) -> Result<Vec<MlActivations>> {
    for x in xs {
        layer.check_input(x)?;
    }
    let mut out: Vec<MlActivations> = xs
        .iter()
        .map(|_| MlActivations {
            h: Vec::with_capacity(layer.len()),
            layer_size: layer.len(),
        })
        .collect();
    for n in &layer.neurons {
        for (a, x) in out.iter_mut().zip(xs) {
            a.h.push(vector::dot(&n.weights, &x.vector));
        }
    }
    Ok(out)
}

/// Presents `x` to the layer, storing it if it is novel within its class.
///
/// Novel means no same-class neuron has similarity strictly above `theta`;
/// a similarity exactly equal to `theta` therefore inserts.
pub fn observe(layer: &mut MatchingLayer, x: &Example) -> Result<InsertionOutcome> {
    layer.check_input(x)?;
    let max_same_class_sim = layer
        .class_indices(x.label)
        .iter()
        .map(|&i| vector::dot(&layer.neurons[i].weights, &x.vector))
        .reduce(f64::max);

    *layer.log.presented.entry(x.label).or_insert(0) += 1;
    let novel = max_same_class_sim.is_none_or(|m| m <= layer.theta);
    if !novel {
        *layer.log.rejected.entry(x.label).or_insert(0) += 1;
        return Ok(InsertionOutcome {
            inserted: false,
            neuron_index: None,
            max_same_class_sim,
        });
    }
    let ordinal = layer.next_ordinal;
    let index = layer.push(x.vector.clone(), x.label, ordinal);
    Ok(InsertionOutcome {
        inserted: true,
        neuron_index: Some(index),
        max_same_class_sim,
    })
}

pub fn size_by_class(layer: &MatchingLayer) -> BTreeMap<ClassId, usize> {
    layer.by_class.iter().map(|(&c, v)| (c, v.len())).collect()
}

/// Writes a DYNM snapshot: `"DYNM"`, u32 version, u32 dim, f64 theta,
/// u32 neuron count, then per neuron u32 label, u64 ordinal and `dim` f64
/// weights. All little-endian.
pub fn save_memory(layer: &MatchingLayer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut out = BufWriter::new(file);
    let count = u32::try_from(layer.len()).map_err(|_| Error::Config("too many neurons for DYNM".into()))?;

    out.write_all(DYNM_MAGIC).map_err(io)?;
    out.write_u32::<LittleEndian>(DYNM_VERSION).map_err(io)?;
    out.write_u32::<LittleEndian>(layer.dim as u32).map_err(io)?;
    out.write_f64::<LittleEndian>(layer.theta).map_err(io)?;
    out.write_u32::<LittleEndian>(count).map_err(io)?;
    for n in &layer.neurons {
        out.write_u32::<LittleEndian>(n.label).map_err(io)?;
        out.write_u64::<LittleEndian>(n.insertion_ordinal).map_err(io)?;
        for &w in &n.weights {
            out.write_f64::<LittleEndian>(w).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn load_memory(path: impl AsRef<Path>) -> Result<MatchingLayer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |offset: usize, len: usize| Error::Truncated {
        path: path.to_path_buf(),
        offset: bytes.len() as u64,
        needed: (offset + len - bytes.len()) as u64,
    };
    const HEADER: usize = 24;
    if bytes.len() < 4 {
        return Err(truncated(0, 4));
    }
    if &bytes[0..4] != DYNM_MAGIC {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
            offset: 0,
            expected: "DYNM".into(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    if bytes.len() < HEADER {
        return Err(truncated(0, HEADER));
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != DYNM_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            offset: 4,
            expected: DYNM_VERSION,
            found: version,
        });
    }
    let dim = LittleEndian::read_u32(&bytes[8..12]) as usize;
    if dim == 0 {
        return Err(Error::InvalidHeader {
            path: path.to_path_buf(),
            offset: 8,
            reason: "dimension is zero".into(),
        });
    }
    let theta = LittleEndian::read_f64(&bytes[12..20]);
    let count = LittleEndian::read_u32(&bytes[20..24]) as usize;
    let mut layer = MatchingLayer::new(dim, theta).map_err(|_| Error::InvalidHeader {
        path: path.to_path_buf(),
        offset: 12,
        reason: format!("theta {theta} outside (0, 1)"),
    })?;

    let record = 12 + 8 * dim;
    let mut offset = HEADER;
    for _ in 0..count {
        if bytes.len() < offset + record {
            return Err(truncated(offset, record));
        }
        let label = LittleEndian::read_u32(&bytes[offset..offset + 4]);
        let ordinal = LittleEndian::read_u64(&bytes[offset + 4..offset + 12]);
        if !layer.is_empty() && ordinal < layer.next_ordinal {
            return Err(Error::InvalidHeader {
                path: path.to_path_buf(),
                offset: offset as u64 + 4,
                reason: format!("insertion ordinal {ordinal} is not increasing"),
            });
        }
        let weights = bytes[offset + 12..offset + record]
            .chunks_exact(8)
            .map(LittleEndian::read_f64)
            .collect();
        layer.push(weights, label, ordinal);
        offset += record;
    }
    Ok(layer)
}
