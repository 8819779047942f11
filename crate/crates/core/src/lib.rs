pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod harness;
pub mod optim;
pub mod peft;
pub mod tasks;
mod rng;
pub mod tensor;

pub use backbone::{Backbone, BackboneConfig, ParamCount, TokenBatch, PAD_ID};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use error::{DeptError, Result};
pub use optim::{lr_at, AdamW, OptimizerConfig, ParamGroup, Schedule};
pub use peft::{solve_budget, BudgetSolution, DeptParams, LearningRates, PeftParams, PeftVariant, VariantTag};
pub use tensor::{finite_diff_check, GradCheckReport, Precision, Scalar, Tensor};
