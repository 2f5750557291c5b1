pub mod adjoint;
pub mod dsp;
pub mod error;
pub mod filterbank;
pub mod path;
pub mod scattering;

pub use error::{Error, Result};
