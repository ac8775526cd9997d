//! Procedural paired ground/aerial imagery over a synthetic continent, and
//! manifest I/O for pair collections on disk.

mod dataset;
mod noise;
mod render;
mod world;

pub use dataset::{generate_dataset, LoadOptions, Manifest, Record, Split, MANIFEST_FILE};
pub use noise::{value_noise, Fbm};
pub use render::{context_radius, render_aerial, render_ground, render_pair, Sample};
pub use world::{FieldSample, Patch, Region, World, WorldSpec, CLASS_NAMES};
