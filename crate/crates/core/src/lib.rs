//! Hybrid-reasoning training on a synthetic detection task.
//!
//! A policy learns to answer "real" or "fake", and to decide per query
//! whether to emit a reasoning segment first. Training has two stages:
//! supervised fine-tuning on dual-mode targets ([`hft`]), then online
//! group-relative policy optimization with a rule-based reward that pays
//! for accuracy, format and choosing the right mode ([`hgrpo`], [`reward`]).
//!
//! The policy ([`policy`]) is small enough that every log-probability is
//! exact and every gradient analytic.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod hft;
pub mod hgrpo;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod task;
pub mod types;

pub use error::{Error, Result};
pub use format::{parse_response, render_response, strip_think, ResponseMode, StructuredResponse, ThinkMode};
pub use types::{Label, QueryClass};
