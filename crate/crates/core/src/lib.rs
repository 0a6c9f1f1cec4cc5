//! Neural machine translation trained on partially aligned sentence pairs
//! mined from monolingual corpora with a phrase table.
//!
//! The pipeline is: [`corpus`] extracts partially aligned pairs, [`model`]
//! and [`training`] fit a gated attention encoder-decoder, [`decoding`]
//! runs beam search with an optional limited output vocabulary and
//! [`evaluation`] scores the output with corpus BLEU.

pub mod checkpoint;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod gradcheck;
pub mod lstm;
pub mod model;
pub mod real;
pub mod tensor;
pub mod toy;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use exec::Exec;
