//! Learnable exterior calculus on coarse cell complexes, with
//! structure-preserving surrogate models trained through an adjoint solve.

pub mod calculus;
pub mod coarsen;
pub mod complex;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod net;
pub mod reference;
pub mod solve;
pub mod sparse;
pub mod train;
pub mod verify;

pub use complex::{ChainComplex, Cochain};
pub use error::{Error, Result};
