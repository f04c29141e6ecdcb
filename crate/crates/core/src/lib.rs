//! Layer-wise data-free compression of convolutional networks.
//!
//! The toolkit loads a trained network stored in the LDFC container format,
//! preconditions it (BatchNorm fusion and buffer-recorded cross-layer
//! equalization), then quantizes or prunes it one layer at a time using inputs
//! sampled from the BatchNorm statistics the network already carries. No
//! training data is touched anywhere on the compression path.

pub mod datagen;
pub mod dataset;
pub mod error;
pub mod ir;
pub mod precondition;
pub mod prune;
pub mod quantize;
pub mod seed;
pub mod tensor;
pub mod toy;

pub use error::{Error, FormatError, Result};
pub use ir::{Block, NetworkGraph};
pub use tensor::Tensor;
