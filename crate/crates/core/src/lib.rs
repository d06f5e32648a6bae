//! Lifelong unsupervised domain adaptation for retrieval models.
//!
//! A small GeM-pooled feature extractor is pre-trained on a labeled source
//! domain and then adapted stage by stage to an unlabeled target stream.
//! Pseudo identities come from DBSCAN over the current embeddings, a bounded
//! ID-wise reservoir memory replays past identities, and an EMA historical
//! model supplies affinity and KL consistency targets. Adaptation and
//! anti-forgetting are coordinated by a first-order meta step: the
//! anti-forgetting gradient is taken at the parameters obtained after one
//! descent step on the adaptation loss.
//!
//! Module map:
//!
//! - [`model`]: feature extractor, classifier, exact backward pass, EMA, checkpoints
//! - [`losses`]: triplet, cross-entropy, relational and KL consistency, composites
//! - [`optim`]: Adam, coordinated meta step, joint baseline, Taylor diagnostic
//! - [`memory`]: ID-wise reservoir plus FIFO and instance-wise baselines
//! - [`cluster`]: DBSCAN pseudo labels and the global label namespace
//! - [`bench`]: synthetic source/target streams and the PK batch sampler
//! - [`eval`]: CMC rank-1, mAP and the evaluation protocols
//! - [`harness`]: configuration, staged runs, ablations and diagnostics

pub mod bench;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod memory;
pub mod model;
pub mod optim;
pub(crate) mod util;

pub use error::{Error, Result};
