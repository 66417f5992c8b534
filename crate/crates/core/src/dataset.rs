//! Loading, normalizing, filtering and ordering examples.
//!
//! Two on-disk formats are read: the big-endian IDX image/label pair used by
//! MNIST and fashion-MNIST, and the little-endian DYNF feature file
//! (`"DYNF"`, u32 version = 1, u32 record count N, u32 dimension D, then N
//! records of one u32 label followed by D binary32 values).
//!
//! Labels are global class ids everywhere; nothing here remaps them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vector;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const DYNF_MAGIC: &[u8; 4] = b"DYNF";
pub const DYNF_VERSION: u32 = 1;
pub const DYNF_HEADER_LEN: usize = 16;

/// Vectors whose norm falls below this are dropped by [`normalize`].
pub const MIN_NORM: f64 = 1e-12;

pub type ClassId = u32;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub vector: Vec<f64>,
    pub label: ClassId,
    /// Position of the example in the file it was read from.
    pub source_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub examples: Vec<Example>,
    pub dim: usize,
    pub role: Role,
    pub class_set: BTreeSet<ClassId>,
    /// Examples removed by [`normalize`] because their norm was degenerate.
    pub dropped: usize,
}

impl DatasetSplit {
    pub fn new(examples: Vec<Example>, dim: usize, role: Role) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("dataset dimension must be positive".into()));
        }
        if let Some(bad) = examples.iter().find(|e| e.vector.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.vector.len(),
            });
        }
        let class_set = examples.iter().map(|e| e.label).collect();
        Ok(Self {
            examples,
            dim,
            role,
            class_set,
            dropped: 0,
        })
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn of_class(&self, class: ClassId) -> impl Iterator<Item = &Example> + '_ {
        self.examples.iter().filter(move |e| e.label == class)
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        counts
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn need(path: &Path, bytes: &[u8], offset: usize, len: usize) -> Result<()> {
    if bytes.len() < offset + len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            needed: (offset + len - bytes.len()) as u64,
        });
    }
    Ok(())
}

fn check_idx_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    need(path, bytes, 0, 4)?;
    let found = BigEndian::read_u32(&bytes[0..4]);
    if found != expected {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
            offset: 0,
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

/// Reads an IDX image file and its label file.
///
/// Pixels are kept as raw 0-255 reals; [`normalize`] takes care of scale.
/// The split is tagged [`Role::Train`]; use [`DatasetSplit::with_role`] for
/// test files.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    check_idx_magic(images_path, &images, IDX_IMAGES_MAGIC)?;
    need(images_path, &images, 4, 12)?;
    let count = BigEndian::read_u32(&images[4..8]);
    let rows = BigEndian::read_u32(&images[8..12]) as usize;
    let cols = BigEndian::read_u32(&images[12..16]) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidHeader {
            path: images_path.to_path_buf(),
            offset: 8,
            reason: format!("image size {rows}x{cols}"),
        });
    }

    check_idx_magic(labels_path, &labels, IDX_LABELS_MAGIC)?;
    need(labels_path, &labels, 4, 4)?;
    let label_count = BigEndian::read_u32(&labels[4..8]);
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    let dim = rows * cols;
    let count = count as usize;
    need(images_path, &images, 16, count * dim)?;
    need(labels_path, &labels, 8, count)?;

    let examples = images[16..16 + count * dim]
        .chunks_exact(dim)
        .zip(&labels[8..8 + count])
        .enumerate()
        .map(|(i, (pixels, &label))| Example {
            vector: pixels.iter().map(|&p| f64::from(p)).collect(),
            label: ClassId::from(label),
            source_index: i,
        })
        .collect();
    DatasetSplit::new(examples, dim, Role::Train)
}

/// Reads a DYNF feature file. Values are widened from binary32 exactly.
pub fn load_features(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    need(path, &bytes, 0, 4)?;
    if &bytes[0..4] != DYNF_MAGIC {
        return Err(Error::MagicMismatch {
            path: path.to_path_buf(),
            offset: 0,
            expected: "DYNF".into(),
            found: String::from_utf8_lossy(&bytes[0..4]).into_owned(),
        });
    }
    need(path, &bytes, 4, DYNF_HEADER_LEN - 4)?;
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != DYNF_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            offset: 4,
            expected: DYNF_VERSION,
            found: version,
        });
    }
    let count = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let dim = LittleEndian::read_u32(&bytes[12..16]) as usize;
    if dim == 0 {
        return Err(Error::InvalidHeader {
            path: path.to_path_buf(),
            offset: 12,
            reason: "dimension is zero".into(),
        });
    }
    let record_len = 4 + 4 * dim;
    let body = &bytes[DYNF_HEADER_LEN..];
    let available = body.len() / record_len;
    if available < count {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: (DYNF_HEADER_LEN + available * record_len) as u64,
            needed: (count * record_len - body.len()) as u64,
        });
    }

    let examples = body
        .chunks_exact(record_len)
        .take(count)
        .enumerate()
        .map(|(i, rec)| Example {
            label: LittleEndian::read_u32(&rec[0..4]),
            vector: rec[4..]
                .chunks_exact(4)
                .map(|v| f64::from(LittleEndian::read_f32(v)))
                .collect(),
            source_index: i,
        })
        .collect();
    DatasetSplit::new(examples, dim, Role::Train)
}

/// Writes `split` as a DYNF file. Values are rounded to binary32.
pub fn write_features(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let count = u32::try_from(split.len())
        .map_err(|_| Error::Config(format!("{} records exceed the u32 count field", split.len())))?;
    let dim = u32::try_from(split.dim)
        .map_err(|_| Error::Config(format!("dimension {} exceeds the u32 field", split.dim)))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);

    out.write_all(DYNF_MAGIC).map_err(io)?;
    out.write_u32::<LittleEndian>(DYNF_VERSION).map_err(io)?;
    out.write_u32::<LittleEndian>(count).map_err(io)?;
    out.write_u32::<LittleEndian>(dim).map_err(io)?;
    for e in &split.examples {
        out.write_u32::<LittleEndian>(e.label).map_err(io)?;
        for &v in &e.vector {
            out.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Scales every example to unit length.
///
/// Examples whose norm is below [`MIN_NORM`] cannot be normalized; they are
/// removed and added to `dropped`.
pub fn normalize(split: &DatasetSplit) -> DatasetSplit {
    let mut dropped = 0;
    let examples: Vec<Example> = split
        .examples
        .iter()
        .filter_map(|e| {
            let n = vector::norm(&e.vector);
            if n < MIN_NORM {
                dropped += 1;
                return None;
            }
            Some(Example {
                vector: e.vector.iter().map(|v| v / n).collect(),
                label: e.label,
                source_index: e.source_index,
            })
        })
        .collect();
    if dropped > 0 {
        log::warn!("normalize: dropped {dropped} zero-norm examples");
    }
    DatasetSplit {
        class_set: examples.iter().map(|e| e.label).collect(),
        examples,
        dim: split.dim,
        role: split.role,
        dropped: split.dropped + dropped,
    }
}

/// Keeps only examples whose label is in `classes`, in their original order.
pub fn filter_classes(split: &DatasetSplit, classes: &BTreeSet<ClassId>) -> Result<DatasetSplit> {
    if let Some(&missing) = classes.iter().find(|c| !split.class_set.contains(c)) {
        return Err(Error::MissingClass(missing));
    }
    Ok(DatasetSplit {
        examples: split
            .examples
            .iter()
            .filter(|e| classes.contains(&e.label))
            .cloned()
            .collect(),
        dim: split.dim,
        role: split.role,
        class_set: classes.clone(),
        dropped: split.dropped,
    })
}

/// Order in which classes and their examples are presented during a run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentationSchedule {
    pub initial_pair: [ClassId; 2],
    pub subsequent_classes: Vec<ClassId>,
    /// Per class, indices into the split's `examples` in presentation order.
    pub within_class_order: BTreeMap<ClassId, Vec<usize>>,
    pub seed: u64,
    pub shuffle_within: bool,
}

impl PresentationSchedule {
    /// All classes in presentation order.
    pub fn classes(&self) -> Vec<ClassId> {
        self.initial_pair
            .iter()
            .chain(&self.subsequent_classes)
            .copied()
            .collect()
    }

    /// Examples of `class` from `split` in presentation order.
    pub fn examples<'a>(&'a self, split: &'a DatasetSplit, class: ClassId) -> impl Iterator<Item = &'a Example> + 'a {
        self.within_class_order
            .get(&class)
            .into_iter()
            .flatten()
            .map(move |&i| &split.examples[i])
    }
}

/// Builds the presentation schedule for `classes` over `split`.
///
/// The first two classes form the initial pair. With `shuffle_within`, the
/// examples of class `c` are permuted by the ChaCha8 stream `(seed, c)`
/// (see [`crate::rng`]); otherwise they keep file order.
pub fn make_schedule(
    classes: &[ClassId],
    split: &DatasetSplit,
    seed: u64,
    shuffle_within: bool,
) -> Result<PresentationSchedule> {
    if classes.len() < 3 {
        return Err(Error::TooFewClasses(classes.len()));
    }
    let unique: BTreeSet<_> = classes.iter().collect();
    if unique.len() != classes.len() {
        return Err(Error::Precondition(format!("class list {classes:?} has repeats")));
    }

    let mut within_class_order = BTreeMap::new();
    for &class in classes {
        let mut order: Vec<usize> = split
            .examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect();
        if order.is_empty() {
            return Err(Error::MissingClass(class));
        }
        if shuffle_within {
            order.shuffle(&mut rng::stream(seed, u64::from(class)));
        }
        within_class_order.insert(class, order);
    }

    Ok(PresentationSchedule {
        initial_pair: [classes[0], classes[1]],
        subsequent_classes: classes[2..].to_vec(),
        within_class_order,
        seed,
        shuffle_within,
    })
}
