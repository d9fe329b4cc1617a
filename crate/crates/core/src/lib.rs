//! Core algorithms for training, architecture-searching and evaluating tiny
//! transformer language models.
//!
//! This crate is `no_std` (it needs `alloc`) and performs no IO. File
//! formats, corpus loading and the command-line front end live in the
//! `tinylm` crate.

#![no_std]

extern crate alloc;

pub mod data;
pub mod element;
pub mod model;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod rng;
pub mod search;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use element::Element;
pub use error::{Error, Result};
pub use rng::RngState;
pub use tape::{Activation, Gradients, GradientsOf, RelMode, Tape, TapeOf, Var};
pub use model::{BatchView, ModelConfig, NamedTensor, Objective, PosType, TransformerModel};
pub use tensor::{Tensor, TensorOf};
pub use tokenizer::{diff_tokenizations, train_bpe, DiffReport, Tokenizer, TokenizerConfig};
pub use training::{
    apply_mlm_masking, clm_shift, evaluate_perplexity, pack_corpus, train, AdamW, AdamWConfig, EpochMetrics,
    Control, MaskingPolicy, MetricsLog, NoHooks, Packed, TrainConfig, TrainHooks,
};
pub use search::{
    run_study, should_prune, suggest, summarize_study, SearchSpace, Study, StudyConfig, StudyEvent, Trial,
    TrialContext, TrialOutcome, TrialState,
};
