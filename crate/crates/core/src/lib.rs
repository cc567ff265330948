//! Locally epistatic genomic prediction.
//!
//! The markers are split into a hierarchy of genome regions. Each leaf region
//! gets its own kernel mixed model, whose EBLUPs are the region's local
//! genetic values. A lasso or elastic-net fit over those standardized local
//! values then yields a sparse predictor, and the absolute weights rank the
//! regions by importance. Region-level variance components can also be
//! tested down the hierarchy with family-wise error control.
//!
//! Module map:
//!
//! | module | role |
//! |---|---|
//! | [`ingest`] | genotype, map, phenotype and covariate tables |
//! | [`partition`] | genome / chromosome / subregion hierarchy |
//! | [`kernel`] | linear, polynomial and Gaussian Gram matrices |
//! | [`pca`], [`reml`] | per-region REML fit, EBLUPs |
//! | [`local_gebv`] | fit every leaf, assemble the local-value matrix |
//! | [`combiner`] | lasso / elastic-net post-processing, importance scores |
//! | [`testing`] | restricted likelihood ratio tests down the hierarchy |
//! | [`simulate`] | synthetic populations with known architecture |
//! | [`cv`] | repeated train/test accuracy comparison, trait clustering |
//! | [`pipeline`] | configuration, model bundles, command implementations |

pub mod combiner;
pub mod cv;
pub mod error;
pub mod ingest;
pub mod kernel;
pub mod linalg;
pub mod local_gebv;
pub mod partition;
pub mod pca;
pub mod pipeline;
pub mod reml;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod testing;

pub use error::{Error, Result};
