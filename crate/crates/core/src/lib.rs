//! Desk-scale person-search training lab.
//!
//! The crate generates multi-domain synthetic annotation streams with known
//! ground truth and injected noise, repairs the noisy annotations (box
//! refinement, Hungarian missing-label generation), learns domain-invariant
//! embeddings (channel masking, HSIC decorrelation, prototype-weighted
//! domain-specific batch normalization, memory-bank losses), and evaluates
//! retrieval and detection quality on a held-out domain. Every gradient is
//! hand-derived and validated against finite differences; every metric has a
//! brute-force oracle.

pub mod ablate;
pub mod config;
pub mod dataio;
pub mod dsbn;
pub mod error;
pub mod eval;
pub mod geom;
pub mod idselect;
pub mod labelgen;
pub mod losses;
pub mod numcheck;
pub mod protomem;
pub mod refine;
pub mod rng;
pub mod synthdata;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
