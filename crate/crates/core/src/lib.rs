//! Cross-view geolocalization at desk scale.
//!
//! An aerial feature extractor is trained to regress the features a frozen
//! ground-level network produces for co-located photos. Ground queries are
//! then localized by exact nearest-neighbor search over a grid of aerial
//! features.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod geo;
pub mod image;
pub mod models;
pub mod synth;
pub mod trainer;
pub mod geoindex;
pub mod viz;
pub mod cli;

pub use geo::{Point, Zoom};
