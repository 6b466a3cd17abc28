pub mod bench;
pub mod cell;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod models;
pub mod recurrent;
pub mod tape;
pub mod tensor;
pub mod trace;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
