pub mod accounting;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod peft;
pub mod task;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, Gradients, Var};
pub use error::{Error, Result};
pub use model::{HookPoint, ModelConfig, Site, Transformer};
pub use peft::{DesignSpec, Method};
pub use tensor::Tensor;
pub use harness::{Experiment, GridSpec, RunRecord, Tuning};
pub use task::{Dataset, TaskSpec};
pub use train::{TrainConfig, TuningMode};
