//! Discovery of closed-form governing PDEs from scarce, noisy field data.
//!
//! A small dense network is fitted to the measurements while its exact input
//! derivatives are regressed, sparsely, against a library of candidate terms.
//! Training alternates between sequential-threshold ridge regression for the
//! PDE coefficients and gradient-based updates of the network.

pub mod data;
pub mod deriv;
pub mod library;
pub mod network;
pub mod optim;
pub mod sparse_reg;
pub mod trainer;
pub mod points;

pub use points::PointSet;
