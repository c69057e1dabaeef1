//! Attention-based multiple-instance learning for core-needle biopsy slides.
//!
//! The pipeline tiles annotated tumor regions into patches, groups them into
//! bags, pools instance embeddings with a learned attention network (optionally
//! fused with encoded clinical variables) and aggregates bag predictions into
//! slide predictions. Evaluation statistics and interpretability tooling
//! (attention heat maps, nucleus morphometry) live alongside.

pub mod bagging;
pub mod cli;
pub mod error;
pub mod inference;
pub mod ingest;
pub mod interpret;
pub mod mil;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
