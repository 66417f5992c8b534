//! DynMat: a dual-memory learner that keeps learning new classes after its
//! initial training.
//!
//! * [`matching`] stores novel unit-length examples as imprinted neurons and
//!   reports cosine similarities.
//! * [`stlm`] classifies instantly from those similarities through a
//!   class-routed Gaussian gate and winner-take-all.
//! * [`ltlm`] is an MLP over the raw similarities, trained offline.
//! * [`protocol`] runs incremental class-learning experiments and writes
//!   their reports.

pub mod dataset;
pub mod error;
pub mod ltlm;
pub mod matching;
pub mod protocol;
pub mod rng;
pub mod stlm;
pub mod vector;

pub use dataset::{ClassId, DatasetSplit, Example, PresentationSchedule, Role};
pub use error::{Error, Result};
pub use ltlm::{Mlp, TrainingReport, TrainingSchedule};
pub use matching::{InsertionOutcome, MatchingLayer, MlActivations, MlNeuron};
pub use stlm::ClassScores;
