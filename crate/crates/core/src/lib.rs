pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use layers::{ConvLayer, DenseLayer, Layer, LayerVars};
pub use network::{Activation, LayerSpecs, Lmser, LmserConfig, LmserState, Variant};
pub use tensor::{Tape, Tensor, Var};
