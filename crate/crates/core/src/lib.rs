//! Exact and Monte Carlo computations for open quantum walks on finite
//! (or explicitly truncated) graphs.
//!
//! Superoperators act on column-vectorized density blocks with the convention
//! `vec(A ρ B^†) = (conj(B) ⊗ A) vec(ρ)`; see [`linalg`].

pub mod dirichlet;
pub mod error;
pub mod extended;
pub mod fixtures;
pub mod hitting;
pub mod io;
pub mod linalg;
pub mod model;
pub mod structure;
pub mod trajectory;

pub use error::{OqwError, Result};
pub use extended::Extended;
pub use model::{DiagonalObservable, DiagonalState, Superoperator, WalkSpec};
