//! Graph framelet teachers, frameless MLP students, and the analysis and
//! rewiring tooling around them.
//!
//! The crate splits a graph signal into multi-scale frequency bands with a
//! tight framelet transform, trains framelet GNN teachers (spatial,
//! simplified, spectral), distills them into per-band gated MLP students
//! (FMLP-O / FMLP-S), and provides Dirichlet-energy accounting,
//! over-squashing sensitivity probes, and curvature-based rewiring. The
//! `fkd` binary drives everything from JSON configs.

pub mod analysis;
pub mod config;
pub mod eig;
pub mod error;
pub mod experiment;
pub mod framelet;
pub mod graph;
pub mod mat;
pub mod nn;
pub mod rewire;
pub mod rng;
pub mod student;
pub mod teacher;

pub use error::{FkdError, Result};
pub use mat::Mat;
