//! Link prediction over knowledge graphs with a sequence-to-sequence model
//! that reads the query entity's one-hop neighbourhood.
//!
//! The pipeline: [`kg`] loads triples, [`text`] holds mentions, [`verbalize`]
//! renders queries as text, [`tokenizer`] and [`model`] learn to generate the
//! answer mention, [`ranker`] turns decoder samples into ranked entities, and
//! [`eval`] scores rankings with filtered mean-rank metrics. [`kge`] provides
//! the ComplEx baseline and the frequency-routed ensemble; [`synth`] builds
//! synthetic graphs with a controlled share of context-answerable queries.

pub mod config;
pub mod error;
pub mod eval;
pub mod kg;
pub mod kge;
pub mod model;
pub mod pipeline;
pub mod ranker;
pub mod seed;
pub mod synth;
pub mod text;
pub mod tokenizer;
pub mod verbalize;

pub use error::{Error, Result};
pub use kg::{Direction, EntityId, KnowledgeGraph, Query, RelationId, Split, Triple};
pub use text::TextStore;
pub use tokenizer::Tokenizer;

/// Single-precision model used for training and inference.
pub type Seq2Seq32 = model::Seq2SeqModel<f32>;
/// Double-precision model, used for gradient checking.
pub type Seq2Seq64 = model::Seq2SeqModel<f64>;
pub type Trainer32 = model::Trainer<f32>;
pub type ComplEx32 = kge::ComplEx<f32>;
pub type ComplEx64 = kge::ComplEx<f64>;
