//! Convolutional-recurrent posture classifier.

pub mod conv;
pub mod gradcheck;
pub mod lstm;
pub mod model;

pub use conv::{ConvLayerParams, Padding};
pub use lstm::{Gate, LstmLayerParams};
pub use model::{cross_entropy, softmax, Architecture, ClnModel, ForwardPass, Mode, Params};
