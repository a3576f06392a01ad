pub mod attacks;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod image;
pub mod mask;
pub mod nn;
pub mod pgm;
pub mod quality;
pub mod saliency;
pub(crate) mod serde_f64;

pub use error::{Error, Result};
pub use image::Image;
