//! Reward-model head with depth-gated refinement, multi-view pooling and a
//! prompt-conditioned router, trained with a focal Bradley–Terry objective.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine over
//! `f64` tensors. Token embeddings are an external input: the crate never runs
//! a language model itself.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod params;
pub mod refinement;
pub mod sequence;
pub mod tape;
pub mod tensor;
pub mod training;

pub use aggregation::View;
pub use data::{Dataset, EmbeddingStore, PreferencePair, Regime, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{EvalOptions, EvalReport, Evaluation};
pub use gradcheck::{GradCheckConfig, GradCheckReport};
pub use model::{AdaJudge, ModelConfig, RewardOutput, Variant};
pub use objective::LossConfig;
pub use sequence::TokenSequence;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use training::{StepMetrics, TrainConfig};
