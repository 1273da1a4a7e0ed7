//! Weight-sharing architecture search over LoRA ranks.
//!
//! The crate trains a rank supernetwork on top of a small frozen transformer,
//! alternating adapter-weight updates on training data with
//! architecture-weight updates on validation data, then picks one rank per
//! adapted module and fine-tunes the resulting mixed-rank adapters. It also
//! counts LoRA parameters for real model architectures.

pub mod accounting;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use autodiff::{finite_diff_check, AttentionLayout, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use supernet::{
    merge_adapter, slice_window, softmax_alphas, superweight_a, superweight_b, supernet_forward,
    LoraAdapter, RankChoice, RankMap, RankSearchSpace, SuperLoraModule,
};
pub use tensor::Tensor;
