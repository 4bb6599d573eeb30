//! Few-shot semantic segmentation driven by two prompts: a semantic prompt read
//! from a `<SEM_prompt>` token of a vocabulary-extended language model, and a
//! visual prompt distilled from 4D query–support correlation by center-pivot
//! convolutions. A two-way-attention mask decoder fuses both.

pub mod check;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod matching;
pub mod model;
pub mod nn;
pub mod semantic;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
