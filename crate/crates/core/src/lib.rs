//! Two-stage federated learning over concept-token patient documents.
//!
//! Stage 1 trains a deep averaging network (DAN) to predict billing codes
//! from concept IDs across simulated provider silos, aggregating site models
//! by sample-size-weighted averaging. The frozen dense layer then maps
//! phenotyping documents to fixed-length representations, on which stage 2
//! trains per-disease linear SVMs, again federated. A TF-IDF bag-of-concepts
//! baseline and centralized/single-site variants complete the seven-way
//! ablation driven by [`experiment`] and the `fedpheno` binary.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod neural;
pub mod phenotype;
pub mod representation;
pub mod seed;
pub mod vocab;

pub use error::{Error, Result};
