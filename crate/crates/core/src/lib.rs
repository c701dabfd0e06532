pub mod block;
pub mod cost;
pub mod dynpool;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tree;

pub use block::{AttentionState, BlockConfig, BlockWeights, Direction};
pub use dynpool::{PruneEvent, PruneLedger};
pub use error::{Error, Result};
pub use model::{Image, ModelConfig, ModelInput, ModelWeights};
pub use scalar::{DType, Scalar};
pub use tensor::{Tape, Tensor, Var};
pub use tree::DependencyTree;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
