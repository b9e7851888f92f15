//! Harmonic metrics on vector bundles over discretized flat tori.
//!
//! A connection on a trivialized bundle over a periodic grid (circle or
//! 2-torus) is represented by link transports. Given a Hermitian metric `K`
//! the connection splits into a `K`-unitary part and a `K`-self-adjoint
//! one-form `ψ_K`; a metric is harmonic when it is a critical point of the
//! energy `½∫|ψ_K|²`. The [`continuity`] module solves for harmonic metrics
//! along the path `∇*_H ψ_H = ε log(K⁻¹H)`, and [`detector`] turns a
//! diverging path into a `∇`-invariant sub-bundle.

pub mod bundle;
pub mod continuity;
pub mod decomposition;
pub mod detector;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod oracle;
pub mod problem;
pub mod random;
pub mod report;
pub mod sparse;

pub use error::{Error, Result};
