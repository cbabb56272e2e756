//! Detection metrics, output-length statistics and mode-selection rates.
//!
//! "Fake" is the positive class of the confusion matrix. A prediction whose
//! answer is neither label (including malformed output) is wrong for its
//! gold class and is booked as the opposite label.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{ResponseMode, StructuredResponse};
use crate::policy::{expected_reward, sample_rollout, Decoding, ModeControl, PolicyParams, Rollout};
use crate::reward::RewardWeights;
use crate::rng::{derive_rng, stream};
use crate::task::DetectionSample;
use crate::types::{Label, QueryClass};

#[derive(Debug, Clone)]
pub struct Prediction {
    pub response: StructuredResponse,
    pub gold: Label,
    pub query_class: QueryClass,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp_fake: usize,
    pub fn_fake: usize,
    /// Equal to true positives of the real class.
    pub tn_fake: usize,
    pub fp_fake: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp_fake + self.fn_fake + self.tn_fake + self.fp_fake
    }

    fn record(&mut self, gold: Label, predicted: Label) {
        match (gold, predicted) {
            (Label::Fake, Label::Fake) => self.tp_fake += 1,
            (Label::Fake, Label::Real) => self.fn_fake += 1,
            (Label::Real, Label::Real) => self.tn_fake += 1,
            (Label::Real, Label::Fake) => self.fp_fake += 1,
        }
    }
}

/// `x / y`, or 0 when `y` is 0.
fn ratio(x: usize, y: usize) -> f64 {
    if y == 0 {
        0.0
    } else {
        x as f64 / y as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    pub histogram: BTreeMap<usize, usize>,
    pub mean_length: f64,
    /// Population standard deviation.
    pub length_stddev: f64,
    /// True iff there is at least one non-reasoning output and all of them
    /// share one length.
    pub constant_length_nonreasoning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub total: usize,
    pub confusion: Confusion,
    pub malformed: usize,
    pub real_acc: f64,
    pub real_f1: f64,
    pub fake_acc: f64,
    pub fake_f1: f64,
    pub overall_acc: f64,
    /// Macro mean of the two class F1 scores.
    pub overall_f1: f64,
    /// Support-weighted mean of the two class F1 scores.
    pub overall_f1_weighted: f64,
    /// Micro F1; equals accuracy for single-label binary predictions.
    pub overall_f1_micro: f64,
    pub token_lengths: BTreeMap<usize, usize>,
    pub mean_length: f64,
    pub length_stddev: f64,
    pub constant_length_nonreasoning: bool,
    pub simple_nonreasoning_rate: Option<f64>,
    pub hard_reasoning_rate: Option<f64>,
}

pub fn compute_metrics(predictions: &[Prediction]) -> Result<EvalResult> {
    if predictions.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    let mut confusion = Confusion::default();
    let mut malformed = 0;
    for p in predictions {
        if p.response.mode == ResponseMode::Malformed {
            malformed += 1;
        }
        let predicted = match Label::from_answer(&p.response.answer) {
            Some(label) if p.response.mode != ResponseMode::Malformed => label,
            _ => p.gold.other(),
        };
        confusion.record(p.gold, predicted);
    }
    let c = confusion;
    let fake_recall = ratio(c.tp_fake, c.tp_fake + c.fn_fake);
    let fake_precision = ratio(c.tp_fake, c.tp_fake + c.fp_fake);
    let real_recall = ratio(c.tn_fake, c.tn_fake + c.fp_fake);
    let real_precision = ratio(c.tn_fake, c.tn_fake + c.fn_fake);
    let fake_f1 = f1(fake_precision, fake_recall);
    let real_f1 = f1(real_precision, real_recall);
    let total = c.total();
    let overall_acc = ratio(c.tp_fake + c.tn_fake, total);
    let fake_support = (c.tp_fake + c.fn_fake) as f64;
    let real_support = (c.tn_fake + c.fp_fake) as f64;

    let responses: Vec<&StructuredResponse> = predictions.iter().map(|p| &p.response).collect();
    let lengths = length_report(&responses);
    let classes: Vec<(QueryClass, ResponseMode)> =
        predictions.iter().map(|p| (p.query_class, p.response.mode)).collect();
    let (simple_rate, hard_rate) = partial_mode_rates(&classes);

    Ok(EvalResult {
        total,
        confusion,
        malformed,
        real_acc: real_recall,
        real_f1,
        fake_acc: fake_recall,
        fake_f1,
        overall_acc,
        overall_f1: (real_f1 + fake_f1) / 2.0,
        overall_f1_weighted: (real_f1 * real_support + fake_f1 * fake_support) / total as f64,
        overall_f1_micro: overall_acc,
        token_lengths: lengths.histogram,
        mean_length: lengths.mean_length,
        length_stddev: lengths.length_stddev,
        constant_length_nonreasoning: lengths.constant_length_nonreasoning,
        simple_nonreasoning_rate: simple_rate,
        hard_reasoning_rate: hard_rate,
    })
}

fn length_report(responses: &[&StructuredResponse]) -> LengthReport {
    let mut histogram = BTreeMap::new();
    for r in responses {
        *histogram.entry(r.token_count).or_insert(0) += 1;
    }
    let n = responses.len() as f64;
    let mean = responses.iter().map(|r| r.token_count as f64).sum::<f64>() / n;
    let var = responses
        .iter()
        .map(|r| (r.token_count as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let mut nonreasoning = responses
        .iter()
        .filter(|r| r.mode == ResponseMode::NonReasoning)
        .map(|r| r.token_count);
    let constant = match nonreasoning.next() {
        Some(first) => nonreasoning.all(|l| l == first),
        None => false,
    };
    LengthReport {
        histogram,
        mean_length: mean,
        length_stddev: var.sqrt(),
        constant_length_nonreasoning: constant,
    }
}

/// Histogram and summary statistics of output token counts.
pub fn token_length_report(responses: &[StructuredResponse]) -> Result<LengthReport> {
    if responses.is_empty() {
        return Err(Error::invalid("no outputs to measure"));
    }
    let refs: Vec<&StructuredResponse> = responses.iter().collect();
    Ok(length_report(&refs))
}

fn partial_mode_rates(items: &[(QueryClass, ResponseMode)]) -> (Option<f64>, Option<f64>) {
    let mut simple = (0usize, 0usize);
    let mut hard = (0usize, 0usize);
    for (class, mode) in items {
        match class {
            QueryClass::SimpleBank => {
                simple.1 += 1;
                simple.0 += usize::from(*mode == ResponseMode::NonReasoning);
            }
            QueryClass::HardBank => {
                hard.1 += 1;
                hard.0 += usize::from(*mode == ResponseMode::Reasoning);
            }
        }
    }
    let rate = |(k, n): (usize, usize)| (n > 0).then(|| k as f64 / n as f64);
    (rate(simple), rate(hard))
}

/// (simple-query non-reasoning rate, hard-query reasoning rate). Malformed
/// outputs count against both.
pub fn mode_rates(items: &[(QueryClass, ResponseMode)]) -> Result<(f64, f64)> {
    match partial_mode_rates(items) {
        (Some(s), Some(h)) => Ok((s, h)),
        (None, _) => Err(Error::invalid("no simple-bank outputs to compute a rate from")),
        (_, None) => Err(Error::invalid("no hard-bank outputs to compute a rate from")),
    }
}

/// Decodes one response per sample and scores the batch.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub result: EvalResult,
    pub rollouts: Vec<Rollout>,
}

pub fn evaluate_policy(
    params: &PolicyParams,
    samples: &[DetectionSample],
    control: ModeControl,
    decoding: Decoding,
    seed: u64,
) -> Result<Evaluation> {
    let rollouts: Vec<Rollout> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = derive_rng(seed, &[stream::EVAL, i as u64]);
            sample_rollout(params, s, control, decoding, &mut rng)
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<Prediction> = rollouts
        .iter()
        .zip(samples)
        .map(|(r, s)| Prediction {
            response: r.response(),
            gold: s.gold,
            query_class: s.query_class,
        })
        .collect();
    Ok(Evaluation {
        result: compute_metrics(&predictions)?,
        rollouts,
    })
}

/// Mean exact expected reward of a sampled response over `samples`.
pub fn mean_expected_reward(params: &PolicyParams, samples: &[DetectionSample], weights: &RewardWeights) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let rewards: Vec<f64> = samples
        .par_iter()
        .map(|s| expected_reward(params, s, weights))
        .collect::<Result<_>>()?;
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Markdown table with Real / Fake / Overall Acc and F1 columns.
pub fn markdown_table(rows: &[(String, &EvalResult)]) -> String {
    let mut out = String::new();
    out.push_str("| Method | Real Acc | Real F1 | Fake Acc | Fake F1 | Overall Acc | Overall F1 |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "| {name} | {} | {} | {} | {} | {} | {} |",
            pct(r.real_acc),
            pct(r.real_f1),
            pct(r.fake_acc),
            pct(r.fake_f1),
            pct(r.overall_acc),
            pct(r.overall_f1)
        );
    }
    out
}

/// `bin,count` CSV of the token-length histogram.
pub fn histogram_csv(histogram: &BTreeMap<usize, usize>) -> String {
    let mut out = String::from("bin,count\n");
    for (bin, count) in histogram {
        let _ = writeln!(out, "{bin},{count}");
    }
    out
}
