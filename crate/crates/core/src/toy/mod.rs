//! A small decoder-only transformer with RoPE attention, trained on CPU with
//! hand-written backpropagation.
//!
//! The model is a pre-norm stack of RMSNorm, causal multi-head attention
//! (RoPE on queries and keys, `1/sqrt(head_dim)` scaling) and a GELU MLP,
//! followed by a final RMSNorm and an untied output head. Its context can be
//! extended either by position interpolation (positions rescaled by `L/L'`)
//! or directly (positions fed unscaled past `L`); neither changes a weight.

mod checkpoint;
mod data;
mod eval;
mod model;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use data::{
    copy_document, generate_passkey_document, passkey_corpus, passkey_stream, PasskeyCorpus,
    PasskeyDocument, SyntheticPasskeyTask, Vocabulary,
};
pub use eval::{
    k_max, measure_effective_window, sliding_window_perplexity, tested_distances,
    EffectiveWindowReport,
};
pub use model::{
    ExtensionMethod, ForwardCache, Gradients, LayerWeights, ToyModel, ToyModelConfig, Weights,
};
pub use optim::{Adam, AdamParams};
pub use train::{train, train_with, TrainingParams, TrainingReport};

use std::fmt::Debug;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point type the toy model can run in.
pub trait Scalar:
    Float + NumAssign + LinalgScalar + ScalarOperand + FromPrimitive + Debug + Default + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
