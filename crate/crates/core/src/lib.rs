pub mod augment;
pub mod classifier;
pub mod cli;
pub mod dcgan;
pub mod error;
pub mod gradsuite;
pub mod imageproc;
pub mod layers;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use params::NetworkParams;
pub use tensor::{RngStream, Tape, Tensor, Var};
