//! Few-shot named-entity recognition in two stages: a CRF span detector
//! and a prototype classifier, both meta-trained episodically, combined at
//! inference time with a nearest-neighbour vote over support entities.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod crf;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod knn;
pub mod numerics;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
