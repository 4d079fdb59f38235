//! Feature map quality scoring.

pub mod archive;
pub mod auxiliary;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod fmqe;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod scoring;
pub mod similarity;
pub mod synth;
pub mod tensor;
pub mod text;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/similarity.md")]
    mod similarity {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/text.md")]
    mod text {}
    #[doc = include_str!("../../../book/src/evaluator.md")]
    mod evaluator {}
    #[doc = include_str!("../../../book/src/auxiliary.md")]
    mod auxiliary {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
