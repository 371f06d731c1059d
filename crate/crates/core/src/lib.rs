//! Nonnegative matrix factorization through conic approximations of the
//! factorization constraint, driven by successive linearization.

pub mod campaign;
pub mod conic_program;
pub mod error;
pub mod formulations;
pub mod fw;
pub mod hals;
pub mod instances;
pub mod io;
pub mod ipm;
pub mod rank1;

pub use error::{NmfError, Result};
