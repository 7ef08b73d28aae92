//! Post-pretraining alignment of a multilingual transformer encoder.
//!
//! The crate covers the whole desk-scale pipeline: a synthetic bilingual
//! corpus and subword vocabulary, a small BERT-style encoder on a
//! reverse-mode tape, momentum-contrast sentence alignment with a negative
//! queue, translation language modeling, the multi-task trainer, and the
//! downstream classification / span heads used to measure transfer.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod kv;
pub mod moco;
pub mod numerics;
pub mod seed;
pub mod tlm;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
