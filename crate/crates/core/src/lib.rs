//! Dual-space optimal transport solver for the compressible semi-geostrophic
//! equations with a physical-space Lagrangian reconstruction.

// `!(a > b)` is how NaN inputs get rejected throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops over several parallel arrays read better than zipped iterators here.
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod cost;
pub mod energy;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod hamiltonian;
pub mod io;
pub mod ot;
pub mod pipeline;
pub mod reconstruct;

pub use error::{Error, ErrorClass, Result};
