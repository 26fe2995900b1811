//! Contrastive-pair debiasing of a small transformer sentence embedder.
//!
//! The crate covers the full experimental loop:
//!
//! * [`pairminer`]: term groups, contrastive pair mining, neutral templates
//! * [`vocab`], [`model`], [`checkpoint`]: the trainable encoder
//! * [`trainer`]: MLM, classification and pairwise debias objectives, and
//!   the interleaved training schedules
//! * [`probes`]: occupation-rating regressors whose test MSE is the bias score
//! * [`posthoc`]: projection baselines (PCA subspace removal, iterative
//!   nullspace projection)
//! * [`experiment`]: configuration, seeding and report tables
//! * [`oracles`]: reference problems with known answers

// Checks are written `!(x > y)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod oracles;
pub mod pairminer;
pub mod par;
pub mod posthoc;
pub mod probes;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use model::{EmbedderModel, LossSpec, ModelConfig, Params, Pooling};
pub use pairminer::{ContrastivePair, Template, TermGroup};
pub use vocab::Vocab;
