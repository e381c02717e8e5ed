pub mod cli;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod feature_distill;
pub mod functional;
pub mod geometry;
pub mod gism;
pub mod nn;
pub mod relation_distill;
pub mod report;
pub mod response_distill;
pub mod trainer;

pub use error::{GidError, Result};
