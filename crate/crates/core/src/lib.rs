pub mod audio_io;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod lens;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
