//! Desk-scale laboratory for training a tiny caption model from the
//! feedback of a simulated question-answering model over a synthetic
//! grid world.
//!
//! The pipeline has three stages. A scene captioner proposes short
//! attribute captions for grid scenes; a frozen, simulated predictor
//! grades captions for relevance to a question and answers questions
//! from captions; and a training loop adapts the captioner from the
//! predictor's feedback, first by fine-tuning on captions the predictor
//! grades as highly relevant, then by reinforcement against prompt- or
//! confidence-based rewards. Inference aggregates answers across several
//! stochastic captions per scene.
//!
//! Determinism is a design rule: every stochastic component takes an
//! explicit seed, and all derived randomness flows through [`seed`].

// Validation deliberately writes `!(x > 0.0)` instead of `x <= 0.0` so
// that NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod captioner;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod feedback;
pub mod inference;
pub mod pipeline;
pub mod predictor;
pub mod seed;
pub mod world;

pub use error::{Error, Result};
