pub mod autograd;
pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod matcher;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod tns;
pub mod trainer;

pub use autograd::{Activation, Graph, NormScope, Pool, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
