//! Weakly supervised tumor localization on PET volumes from two maximum
//! intensity projections and class activation maps.

pub mod error;
pub mod io;
pub mod localization;
pub mod loss;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod volume;

pub use error::{Error, Result};
