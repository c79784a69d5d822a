//! Cross-modal cache adapter for frozen vision-language embeddings.
//!
//! `no_std` with `alloc`; file formats, the command line and parallel sweeps
//! live in the `xmadapter` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapter;
pub mod cache;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod training;

pub use adapter::{HyperParams, PhiOrder};
pub use cache::{build_cache, CacheModel, ProjectionNet};
pub use dataset::{generate_synthetic, sample_few_shot, EmbeddingBundle, FewShotSplit, SyntheticConfig};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use training::{train, AdapterParams, TrainOptions, TrainOutcome, TrainReport};
