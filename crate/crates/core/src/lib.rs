//! Morphological neural networks: max-plus / min-plus layers, exact
//! subgradient autodiff, training, pruning and executable theory checks.

pub mod error;
pub mod tensor;
pub mod tropical;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use tropical::TropicalMode;
pub mod param;
pub mod autograd;
pub mod optim;
pub mod layers;
pub mod presets;
pub mod model;
pub mod init;
pub mod data;
pub mod pruning;
pub mod checkpoint;
pub mod config;
pub mod train;
pub mod experiment;
pub mod theory;
pub mod verify;
