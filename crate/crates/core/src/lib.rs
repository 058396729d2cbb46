pub mod error;
pub mod fft;
pub mod field;
pub mod modes;
pub mod turbulence;
pub mod ao;
pub mod zernike;
pub mod security;
pub mod harness;

pub use error::{Error, Result};
