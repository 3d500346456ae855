//! A small, fully inspectable multimodal recurrent language model.
//!
//! The crate bundles a dense tensor type with a reverse-mode tape, a
//! delta-rule recurrent backbone, modality encoders, a length compressor
//! and adapter that feed encoder output into the backbone, a two-phase
//! training loop and the evaluation metrics and benchmarks around it.

pub mod alloc;
pub mod backbone;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod modality;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::{RngState, RngStream};
pub use tape::{Tape, TapeMode, Var};
pub use tensor::{BinaryOp, ReduceOp, Tensor, UnaryOp};

/// The guide's code blocks, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        };
    }
    chapter!(Introduction, "introduction.md");
    chapter!(TensorAndTape, "tensor-and-tape.md");
    chapter!(Recurrence, "recurrence.md");
    chapter!(Backbone, "backbone.md");
    chapter!(Modality, "modality.md");
    chapter!(Encoders, "encoders.md");
    chapter!(Training, "training.md");
    chapter!(Evaluation, "evaluation.md");
    chapter!(Cli, "cli.md");
}
