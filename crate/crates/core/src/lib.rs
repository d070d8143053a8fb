//! Multi-view graph question answering over hybrid table-text documents.
//!
//! A question and its document become one node set with three adjacency
//! views (tabular layout, granularity containment, numeric order). A graph
//! encoder fuses the views per node; classifier heads pick an operator and
//! a scale; span questions are answered by node tagging and arithmetic
//! questions by decoding a pre-order expression tree that copies document
//! quantities.

pub mod decoder;
pub mod document;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod expression;
pub mod gradsuite;
pub mod graph;
pub mod heads;
pub mod kernel;
pub mod model;
pub mod testing;
pub mod training;

pub use decoder::{DecodeMode, Decoded, TreeAssembler, Vocab, VocabEntry};
pub use document::{
    parse_dataset, serialize_dataset, AnswerSource, AnswerType, GoldAnswer, HybridDocument, Operator, Paragraph,
    Question, Scale, Table,
};
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use evaluation::{evaluate_dataset, Candidates, EvalReport, Overrides, Prediction};
pub use expression::{AnswerValue, ExpressionTree, FinalAnswer, ScaleConvention};
pub use graph::{build_multi_view_graph, GraphConfig, MultiViewGraph, Node, NodeKind, ViewKind};
pub use kernel::{ParamStore, Tensor};
pub use model::{LossToggles, Model, ModelConfig, PredictOptions};
pub use training::{train, EpochMetrics, TrainConfig, TrainOutcome};
