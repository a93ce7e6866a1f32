//! Text-conditioned mixture-of-experts volumetric segmentation.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod datasynth;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod head;
pub mod kernels;
pub mod loss;
pub mod params;
pub mod router;
pub mod tensor;
pub mod textbranch;
pub mod training;
pub mod types;

pub use error::{MomeError, Result};
