//! Numerical laboratory for rotary position embeddings (RoPE) and
//! position interpolation.
//!
//! * [`rope`]: frequency tables, the rotary encoding, relative-position
//!   attention scores and the position-interpolation index map.
//! * [`basis`]: attention scores viewed as trigonometric expansions, least
//!   squares fits and extrapolation/interpolation studies.
//! * [`bounds`]: the interpolation bound, the second-derivative bound and
//!   the `B(s)` sums behind the extrapolation bound, with sweep checkers.
//! * [`toy`]: a small decoder-only RoPE transformer with hand-written
//!   backpropagation, context extension, perplexity and passkey evaluation.
//!
//! Analysis code runs in `f64`. The toy model trains in `f32` and can be
//! cast to `f64` for gradient checks.

pub mod basis;
pub mod bounds;
mod error;
pub mod output;
pub mod rope;
pub mod toy;

pub use error::{Error, Result};
