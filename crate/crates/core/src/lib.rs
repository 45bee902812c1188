//! Single-tower audio-video diffusion transformer at desk scale.
//!
//! Four token streams (video, video caption, audio caption, audio) share one
//! stack of joint attention blocks. Tasks (T2V, T2A, T2AV, I2V, I2AV) are
//! realized by masking streams out of attention and the loss, and the model
//! is trained with flow matching under a three-stage curriculum on a
//! synthetic paired corpus whose cross-modal alignment can be scored
//! exactly.

pub mod attention;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod curriculum;
pub mod error;
pub mod flow;
pub mod mmdit;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod rope;
pub mod synthdata;
pub mod tasks;

pub use error::{Error, Result};
