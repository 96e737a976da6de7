//! Discriminant subspaces for uniformly quantized block-DCT image data.

pub mod data;
pub mod dct;
pub mod discriminant;
pub mod error;
pub mod experiment;
pub mod optimizer;
pub mod quantizer;
pub mod rate;

pub use error::{QfdaError, Result};
