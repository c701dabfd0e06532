//! File formats: tensor container, PPM images, run configs, JSON and DOT.

pub mod config;
pub mod container;
pub mod export;
pub mod ppm;

pub use config::RunConfig;
pub use container::{Container, Stored};
pub use export::{MaskJson, ScoreGrid, TreeJson};
pub use ppm::{read_ppm, write_ppm};
