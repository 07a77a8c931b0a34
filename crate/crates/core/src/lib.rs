pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod mask_attention;
pub mod model;
pub mod params;
pub mod seeding;
pub mod sequence;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
