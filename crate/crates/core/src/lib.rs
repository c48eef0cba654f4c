//! Gaze-guided egocentric video classification for driver cognitive
//! distraction, together with the dataset construction pipeline and the
//! experiment runners used to evaluate it.

pub mod attention;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
