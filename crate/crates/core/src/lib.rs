pub mod autograd;
pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod miclub;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
