//! Learned coarsening of the uncertainty space for stochastic elliptic
//! problems.
//!
//! For each coarse neighborhood a small encoder/generator network is trained
//! to map local permeability patches to their multiscale basis functions;
//! K-means on the latent codes partitions the realizations, and one set of
//! GMsFEM basis functions is precomputed per cluster from the cluster's mean
//! field. New realizations are assigned to clusters by a forward pass and
//! solved with the precomputed bases.

pub mod cluster;
pub mod error;
pub mod fem;
pub mod field;
pub mod gmsfem;
pub mod grid;
mod io;
pub mod linalg;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
