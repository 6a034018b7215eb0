//! Mixed-sample data augmentation toolkit: mask families, mixing,
//! regularization coefficients, coefficient-matched mask synthesis and the
//! quadratic approximation of the mixed-sample loss.

pub mod coefficients;
pub mod losses;
pub mod error;
pub mod experiments;
pub mod io;
pub mod masks;
pub mod mixer;
pub mod models;
pub mod numeric;
pub mod stochastics;
pub mod synthesis;

pub use error::{MsdaError, Result};
