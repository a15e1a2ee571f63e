pub mod checkpoint;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pseudo;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod transfer;

pub use error::{Error, ErrorCategory, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

// Compiles and runs the guide's snippets as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/pseudo-labels.md")]
    mod pseudo_labels {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
