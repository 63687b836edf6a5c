//! Multitask sequence-to-sequence grapheme-to-phoneme conversion.
//!
//! An encoder-decoder LSTM turns a German spelling into a BAS-SAMPA phoneme
//! sequence while a classifier head on the encoder summary estimates whether
//! the word is an Anglicism. The crate also carries the data pipeline around
//! the model (lexicon ingestion, tagging, balanced downsampling, batching) and
//! the evaluation arithmetic (PER, WER, classifier metrics, ASR WER/AER).
//!
//! Module map:
//!
//! - [`numcore`]: dense tensors, a reverse-mode tape, losses, optimizers and a
//!   finite-difference gradient oracle.
//! - [`lexicon`]: lexicon/word-list parsing, tagging, splitting, vocabularies,
//!   example encoding and batching.
//! - [`model`]: the multitask network and its combined loss.
//! - [`checkpoint`]: the binary checkpoint format.
//! - [`train`]: the training loop with learning-rate halving and early stopping.
//! - [`decode`]: beam search, greedy decoding and dictionary generation.
//! - [`metrics`]: edit distance, PER/WER, classifier metrics and ASR scoring.
//! - [`cli`]: command implementations behind the `mtlg2p` binary.

pub mod checkpoint;
pub mod cli;
pub mod decode;
mod error;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
