//! CT perfusion toolkit: phantom simulation, spatial pre-processing, arterial
//! and venous curve extraction, box-IRF regression with an SVD baseline, an
//! encoder-decoder map regressor trained from scratch, and lesion-level
//! validation.

pub mod cli;
pub mod error;
pub mod fit;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod regressor;
pub mod validate;
pub mod vascular;
pub mod volume;

pub use error::{Error, Result};
