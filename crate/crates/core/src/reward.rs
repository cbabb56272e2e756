//! Rule-based rewards: answer accuracy, think-tag format, and the
//! hybrid-thinking term that rewards reasoning only where the query calls
//! for it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{parse_response, ResponseMode, StructuredResponse};
use crate::types::{Label, QueryClass};

/// Weights of the composite reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub accuracy: f64,
    pub format: f64,
    pub hybrid: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            accuracy: 0.8,
            format: 0.1,
            hybrid: 0.1,
        }
    }
}

impl RewardWeights {
    pub fn combine(&self, acc: u8, fmt: u8, hyb: u8) -> f64 {
        self.accuracy * f64::from(acc) + self.format * f64::from(fmt) + self.hybrid * f64::from(hyb)
    }
}

/// Per-response reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: u8,
    pub format: u8,
    pub hybrid: u8,
    pub total: f64,
    /// Group-normalized advantage, filled in by the RL trainer.
    pub advantage: Option<f64>,
}

pub fn accuracy_reward(response: &StructuredResponse, gold: Label) -> u8 {
    u8::from(Label::from_answer(&response.answer) == Some(gold))
}

pub fn format_reward(raw: &str) -> u8 {
    u8::from(parse_response(raw).mode != ResponseMode::Malformed)
}

/// Simple-bank queries want a direct answer, hard-bank queries want
/// reasoning. A malformed response expresses no mode and earns nothing.
pub fn hybrid_reward(query_class: QueryClass, mode: ResponseMode) -> u8 {
    match (query_class, mode) {
        (QueryClass::SimpleBank, ResponseMode::NonReasoning) => 1,
        (QueryClass::HardBank, ResponseMode::Reasoning) => 1,
        _ => 0,
    }
}

/// Composite reward with the default 0.8 / 0.1 / 0.1 weights.
pub fn total_reward(acc: u8, fmt: u8, hyb: u8) -> f64 {
    RewardWeights::default().combine(acc, fmt, hyb)
}

pub fn score_response(
    response: &StructuredResponse,
    gold: Label,
    query_class: QueryClass,
    weights: &RewardWeights,
) -> RewardBreakdown {
    let accuracy = accuracy_reward(response, gold);
    let format = u8::from(response.mode != ResponseMode::Malformed);
    let hybrid = hybrid_reward(query_class, response.mode);
    RewardBreakdown {
        accuracy,
        format,
        hybrid,
        total: weights.combine(accuracy, format, hybrid),
        advantage: None,
    }
}

/// Scores a group of responses to one prompt. Groups need at least two
/// members for the advantage normalization downstream.
pub fn score_group(
    gold: Label,
    query_class: QueryClass,
    responses: &[StructuredResponse],
    weights: &RewardWeights,
) -> Result<Vec<RewardBreakdown>> {
    if responses.len() < 2 {
        return Err(Error::invalid(format!(
            "group size must be at least 2, got {}",
            responses.len()
        )));
    }
    Ok(responses
        .iter()
        .map(|r| score_response(r, gold, query_class, weights))
        .collect())
}
