//! Continuous-discrete Gaussian filtering and smoothing for Itô SDEs built on
//! the Taylor moment expansion (TME) of transition moments.
//!
//! The crate is organised bottom-up:
//!
//! - [`symexpr`]: symbolic expressions with exact derivatives
//! - [`model`]: SDE and measurement models, the infinitesimal generator
//! - [`tme`]: Taylor moment expansion of transition mean and covariance
//! - [`analysis`]: positive-definiteness certificates and stability bounds
//! - [`quadrature`]: positive-weight sigma-point rules
//! - [`discretize`]: transition-moment providers (TME, Euler–Maruyama, Itô-1.5,
//!   Milstein, moment ODEs)
//! - [`filter`]: the Gaussian filter and RTS-type smoother
//! - [`mc`]: Monte Carlo reference simulation
//! - [`models`]: built-in benchmark models
//! - [`config`]: key-value configuration and model files
//! - [`bench`]: moment and tracking experiments behind the `tmefs` CLI

pub mod symexpr;
pub mod error;
pub mod linalg;
pub mod model;
pub mod tme;
pub mod quadrature;
pub mod discretize;
pub mod filter;
pub mod analysis;
pub mod mc;
pub mod models;
pub mod config;
pub mod bench;

pub use error::{Error, Result};
