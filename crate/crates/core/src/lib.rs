//! Neural ODE surrogate training by spectral collocation.
//!
//! Trajectories are represented by their values at Gauss-Lobatto nodes of a
//! single Legendre window ([`spectral`]). Instead of integrating the network
//! ODE inside the training loop, the trainers ([`train`]) minimise the
//! quadrature-weighted collocation residual, either against a fixed fit of the
//! data (`delta`) or alternating between trajectory and parameter updates
//! (`alpha`). Baselines backpropagate through explicit solvers or use the
//! adjoint method ([`solvers`]).

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod models;
pub mod optim;
pub mod scenarios;
pub mod solvers;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
