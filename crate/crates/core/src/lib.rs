//! Click-guided skin lesion segmentation with a hyper-fusion network.
//!
//! Foreground and background clicks become Euclidean distance fields
//! ([`hintmaps`]), which are encoded by their own residual branches and fused
//! into the image branch at every stage ([`network`]). The crate also covers
//! click simulation, training, evaluation and dataset handling needed to
//! train and measure the network at small scale.

pub mod autograd;
pub mod checkpoint;
pub mod click_sim;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod hintmaps;
pub mod mask;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod training;

pub use error::{HfnError, Result};
pub use hintmaps::{ClickSet, Coord};
pub use mask::Mask;
pub use network::{Hfn, ModelParameters, NetworkConfig, Prediction};
