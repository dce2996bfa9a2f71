//! Security-aware instruction tuning on a tiny autoregressive language model.
//!
//! The crate covers the whole loop: mining vulnerability-fix pairs from
//! commits ([`pipeline`]), deriving token masks from their diff
//! ([`diffmask`]), the masked likelihood / unlikelihood / KL objectives
//! ([`losses`]) over a small transformer with hand-written gradients
//! ([`model`]), the joint training loop ([`trainer`]) and the security and
//! utility evaluation harness ([`eval`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diffmask;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod minilang;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use data::{ClassKey, Dataset, InstructionSample, MaskVec, SecurityTriple, TokenId, TokenSeq};
pub use diffmask::build_masks;
pub use error::{Error, Result};
pub use eval::{PromptVariant, Scenario, SecurityResult};
pub use losses::{LossValue, SvenConfig, SvenTerms};
pub use model::{ModelConfig, ModelState};
pub use pipeline::{CommitRecord, Funnel};
pub use tokenizer::Tokenizer;
pub use trainer::{TrainConfig, TrainLog};
