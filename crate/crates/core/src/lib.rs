pub mod attnsim;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod optim;
pub mod quant;
pub mod report;
pub mod synthesis;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{LabError, Result};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
