//! Weight-sharing elastic supernets with multi-level parallel blocks, dense
//! skips and early exits, trained by progressive shrinking with ensembled
//! knowledge distillation.

pub mod arch;
pub mod cost;
pub mod data;
pub mod distill;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod elastic;
pub mod error;
pub mod exec;
pub mod harness;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod plan;
pub mod report;
pub mod scheduler;
pub mod supernet;
pub mod tensor;

pub use arch::{ArchSpec, GlobalChoice, SubnetConfig, Variant};
pub use autograd::{Tape, Target, Var};
pub use error::{Error, Result};
pub use supernet::{Supernet, SupernetOptions};
pub use tensor::Tensor;
