//! Reversible, password-conditioned face obfuscation.
//!
//! [`pipeline::protect`] hides an image behind an obfuscated look using a
//! [`flow::FlowModel`] and a [`keygen::SecretKey`]; [`pipeline::recover`]
//! undoes it with the same password. The guide under `book/` walks
//! through each module.

pub mod cli;
pub mod error;
pub mod flow;
pub mod imageio;
pub mod keygen;
pub mod metrics;
pub mod objective;
pub mod obfuscators;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
