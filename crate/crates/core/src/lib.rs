//! Self-conditioned embedding diffusion for text.
//!
//! Tokens are mapped to fixed embeddings, corrupted by a Gaussian forward
//! process and regenerated by a non-causal transformer that also sees its own
//! previous estimate. Span masks let one model infill, continue or generate
//! freely, and classifier-free guidance trades diversity for fidelity.
//!
//! The guide in `book/` walks through each stage with runnable snippets.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod masking;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod real;
pub mod sampler;
pub mod schedule;
pub mod skipgram;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod viz;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schedule.md")]
    mod schedule {}
    #[doc = include_str!("../../../book/src/spaces.md")]
    mod spaces {}
    #[doc = include_str!("../../../book/src/masking.md")]
    mod masking {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/visualization.md")]
    mod visualization {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
