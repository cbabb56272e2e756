//! A small softmax policy that emits dual-mode responses.
//!
//! A response is a token sequence: one mode token, then `reason_len`
//! reasoning tokens if the mode is reasoning, then one answer token. Each
//! token comes from a linear softmax head over a context vector:
//!
//! - mode and reasoning heads read `[features, query one-hot]`
//! - the plain answer head reads the same context
//! - the informed answer head, used only after reasoning, reads
//!   `[features, hidden features, query one-hot]`
//!
//! Log-probabilities are exact and their gradients analytic, so every
//! optimizer built on top can be checked against finite differences.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{parse_response, render_response, StructuredResponse, ThinkMode};
use crate::reward::{hybrid_reward, RewardWeights};
use crate::rng::Rng;
use crate::task::DetectionSample;
use crate::types::Label;

const QUERY_WIDTH: usize = 2;
const MODE_WIDTH: usize = 2;
const ANSWER_WIDTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDims {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Size of the abstract reasoning vocabulary.
    pub vocab: usize,
    /// Number of reasoning tokens emitted in reasoning mode.
    pub reason_len: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        PolicyDims {
            feature_dim: 8,
            hidden_dim: 4,
            vocab: 6,
            reason_len: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Mode,
    Reason,
    AnswerPlain,
    AnswerInformed,
}

impl PolicyDims {
    fn context_dim(&self) -> usize {
        self.feature_dim + QUERY_WIDTH
    }

    fn informed_dim(&self) -> usize {
        self.feature_dim + self.hidden_dim + QUERY_WIDTH
    }

    /// (input width, output width) of a head.
    pub fn head_shape(&self, head: Head) -> (usize, usize) {
        match head {
            Head::Mode => (self.context_dim(), MODE_WIDTH),
            Head::Reason => (self.context_dim(), self.vocab),
            Head::AnswerPlain => (self.context_dim(), ANSWER_WIDTH),
            Head::AnswerInformed => (self.informed_dim(), ANSWER_WIDTH),
        }
    }

    /// Position of a head's weights in the flat parameter vector.
    pub fn head_range(&self, head: Head) -> Range<usize> {
        let order = [Head::Mode, Head::Reason, Head::AnswerPlain, Head::AnswerInformed];
        let mut start = 0;
        for h in order {
            let (i, o) = self.head_shape(h);
            if h == head {
                return start..start + i * o;
            }
            start += i * o;
        }
        unreachable!()
    }

    pub fn param_count(&self) -> usize {
        self.head_range(Head::AnswerInformed).end
    }

    pub fn sequence_len(&self, mode: ThinkMode) -> usize {
        match mode {
            ThinkMode::NonReasoning => 2,
            ThinkMode::Reasoning => 2 + self.reason_len,
        }
    }
}

/// One emitted token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Token {
    Mode(ThinkMode),
    Reason(u16),
    Answer(Label),
}

fn mode_index(mode: ThinkMode) -> usize {
    match mode {
        ThinkMode::NonReasoning => 0,
        ThinkMode::Reasoning => 1,
    }
}

fn mode_from_index(i: usize) -> ThinkMode {
    if i == 1 {
        ThinkMode::Reasoning
    } else {
        ThinkMode::NonReasoning
    }
}

/// Policy weights: four row-major `(input × output)` matrices stored back to
/// back. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        PolicyParams {
            dims,
            values: vec![0.0; dims.param_count()],
        }
    }

    pub fn random(dims: PolicyDims, scale: f64, rng: &mut Rng) -> Self {
        let values = (0..dims.param_count())
            .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        PolicyParams { dims, values }
    }

    pub fn head(&self, head: Head) -> &[f64] {
        &self.values[self.dims.head_range(head)]
    }

    pub fn head_mut(&mut self, head: Head) -> &mut [f64] {
        let range = self.dims.head_range(head);
        &mut self.values[range]
    }

    /// Weight connecting input `row` to output `col` of a head.
    pub fn weight_mut(&mut self, head: Head, row: usize, col: usize) -> &mut f64 {
        let (_, out) = self.dims.head_shape(head);
        &mut self.head_mut(head)[row * out + col]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `[features, query one-hot]`.
fn context(sample: &DetectionSample, dims: &PolicyDims) -> Result<Vec<f64>> {
    check_sample(sample, dims)?;
    let mut ctx = Vec::with_capacity(dims.context_dim());
    ctx.extend_from_slice(&sample.features);
    let mut q = [0.0; QUERY_WIDTH];
    q[sample.query_class.index()] = 1.0;
    ctx.extend_from_slice(&q);
    Ok(ctx)
}

fn informed_context(sample: &DetectionSample, dims: &PolicyDims) -> Result<Vec<f64>> {
    check_sample(sample, dims)?;
    let mut ctx = Vec::with_capacity(dims.informed_dim());
    ctx.extend_from_slice(&sample.features);
    ctx.extend_from_slice(&sample.hidden_features);
    let mut q = [0.0; QUERY_WIDTH];
    q[sample.query_class.index()] = 1.0;
    ctx.extend_from_slice(&q);
    Ok(ctx)
}

fn check_sample(sample: &DetectionSample, dims: &PolicyDims) -> Result<()> {
    if sample.features.len() != dims.feature_dim || sample.hidden_features.len() != dims.hidden_dim {
        return Err(Error::invalid(format!(
            "sample {} has feature dims ({}, {}), policy expects ({}, {})",
            sample.id,
            sample.features.len(),
            sample.hidden_features.len(),
            dims.feature_dim,
            dims.hidden_dim
        )));
    }
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Per-context head evaluation: logits, probabilities and log-probabilities.
struct HeadEval {
    probs: Vec<f64>,
    logp: Vec<f64>,
}

impl PolicyParams {
    fn eval_head(&self, head: Head, ctx: &[f64]) -> Result<HeadEval> {
        let (inp, out) = self.dims.head_shape(head);
        debug_assert_eq!(ctx.len(), inp);
        let w = self.head(head);
        let mut logits = vec![0.0; out];
        for (i, c) in ctx.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            let row = &w[i * out..(i + 1) * out];
            for (l, wij) in logits.iter_mut().zip(row) {
                *l += c * wij;
            }
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::numerical(format!("non-finite logits in {head:?} head")));
        }
        Ok(HeadEval {
            probs: softmax(&logits),
            logp: log_softmax(&logits),
        })
    }
}

/// Accumulates `scale * d log p(choice) / dW` for one head into `grad`.
fn accumulate_grad(grad: &mut PolicyParams, head: Head, ctx: &[f64], eval: &HeadEval, choice: usize, scale: f64) {
    let (_, out) = grad.dims.head_shape(head);
    let g = grad.head_mut(head);
    for (i, c) in ctx.iter().enumerate() {
        if *c == 0.0 {
            continue;
        }
        for (j, p) in eval.probs.iter().enumerate() {
            let indicator = if j == choice { 1.0 } else { 0.0 };
            g[i * out + j] += scale * c * (indicator - p);
        }
    }
}

/// Validates the token structure and returns (mode, reasoning tokens, answer).
pub fn split_tokens<'a>(dims: &PolicyDims, tokens: &'a [Token]) -> Result<(ThinkMode, &'a [Token], Label)> {
    let Some((Token::Mode(mode), rest)) = tokens.split_first().map(|(a, b)| (*a, b)) else {
        return Err(Error::InvalidTokens("sequence must start with a mode token".into()));
    };
    let expected = dims.sequence_len(mode);
    if tokens.len() != expected {
        return Err(Error::InvalidTokens(format!(
            "{mode:?} sequence must have {expected} tokens, got {}",
            tokens.len()
        )));
    }
    let (reasoning, last) = rest.split_at(rest.len() - 1);
    for t in reasoning {
        match t {
            Token::Reason(v) if (*v as usize) < dims.vocab => {}
            other => {
                return Err(Error::InvalidTokens(format!("expected reasoning token, got {other:?}")));
            }
        }
    }
    match last[0] {
        Token::Answer(label) => Ok((mode, reasoning, label)),
        other => Err(Error::InvalidTokens(format!("expected answer token, got {other:?}"))),
    }
}

/// Per-token log-probabilities of a structurally valid sequence, optionally
/// accumulating `grad_scale * ∇ log p(tokens)` into `grad`.
fn score_tokens(
    params: &PolicyParams,
    sample: &DetectionSample,
    tokens: &[Token],
    mut grad: Option<(&mut PolicyParams, f64)>,
) -> Result<Vec<f64>> {
    let dims = params.dims;
    let (mode, reasoning, answer) = split_tokens(&dims, tokens)?;
    let ctx = context(sample, &dims)?;
    let mut out = Vec::with_capacity(tokens.len());

    let mode_eval = params.eval_head(Head::Mode, &ctx)?;
    out.push(mode_eval.logp[mode_index(mode)]);
    if let Some((g, s)) = grad.as_mut() {
        accumulate_grad(g, Head::Mode, &ctx, &mode_eval, mode_index(mode), *s);
    }

    if !reasoning.is_empty() {
        let reason_eval = params.eval_head(Head::Reason, &ctx)?;
        for t in reasoning {
            let Token::Reason(v) = t else { unreachable!() };
            out.push(reason_eval.logp[*v as usize]);
            if let Some((g, s)) = grad.as_mut() {
                accumulate_grad(g, Head::Reason, &ctx, &reason_eval, *v as usize, *s);
            }
        }
    }

    let (head, actx) = match mode {
        ThinkMode::NonReasoning => (Head::AnswerPlain, ctx),
        ThinkMode::Reasoning => (Head::AnswerInformed, informed_context(sample, &dims)?),
    };
    let answer_eval = params.eval_head(head, &actx)?;
    out.push(answer_eval.logp[answer.index()]);
    if let Some((g, s)) = grad.as_mut() {
        accumulate_grad(g, head, &actx, &answer_eval, answer.index(), *s);
    }
    Ok(out)
}

/// Exact sequence log-probability.
pub fn logprob(params: &PolicyParams, sample: &DetectionSample, tokens: &[Token]) -> Result<f64> {
    Ok(score_tokens(params, sample, tokens, None)?.iter().sum())
}

/// Adds `scale * ∇ log p(tokens)` to `grad` and returns `log p(tokens)`.
pub fn accumulate_logprob_grad(
    params: &PolicyParams,
    sample: &DetectionSample,
    tokens: &[Token],
    grad: &mut PolicyParams,
    scale: f64,
) -> Result<f64> {
    Ok(score_tokens(params, sample, tokens, Some((grad, scale)))?.iter().sum())
}

/// Analytic gradient of the sequence log-probability.
pub fn logprob_grad(params: &PolicyParams, sample: &DetectionSample, tokens: &[Token]) -> Result<PolicyParams> {
    let mut grad = PolicyParams::zeros(params.dims);
    accumulate_logprob_grad(params, sample, tokens, &mut grad, 1.0)?;
    Ok(grad)
}

/// Mode distribution `[p(non-reasoning), p(reasoning)]`.
pub fn mode_distribution(params: &PolicyParams, sample: &DetectionSample) -> Result<[f64; 2]> {
    let ctx = context(sample, &params.dims)?;
    let e = params.eval_head(Head::Mode, &ctx)?;
    Ok([e.probs[0], e.probs[1]])
}

/// Answer distribution `[p(real), p(fake)]` given a mode.
pub fn answer_distribution(params: &PolicyParams, sample: &DetectionSample, mode: ThinkMode) -> Result<[f64; 2]> {
    let e = match mode {
        ThinkMode::NonReasoning => params.eval_head(Head::AnswerPlain, &context(sample, &params.dims)?)?,
        ThinkMode::Reasoning => params.eval_head(Head::AnswerInformed, &informed_context(sample, &params.dims)?)?,
    };
    Ok([e.probs[0], e.probs[1]])
}

/// Exact expected composite reward of one sampled response. Reasoning
/// tokens do not enter the reward, so the expectation is a sum over the
/// four (mode, answer) outcomes.
pub fn expected_reward(params: &PolicyParams, sample: &DetectionSample, weights: &RewardWeights) -> Result<f64> {
    let modes = mode_distribution(params, sample)?;
    let mut total = 0.0;
    for mode in [ThinkMode::NonReasoning, ThinkMode::Reasoning] {
        let answers = answer_distribution(params, sample, mode)?;
        let hyb = hybrid_reward(sample.query_class, mode.into());
        for label in Label::ALL {
            let acc = u8::from(label == sample.gold);
            total += modes[mode_index(mode)] * answers[label.index()] * weights.combine(acc, 1, hyb);
        }
    }
    Ok(total)
}

/// How the mode token is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeControl {
    /// The policy picks its own mode.
    Auto,
    /// The mode is overridden; the remaining tokens follow the policy.
    Forced(ThinkMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    /// Temperature-1 sampling.
    Sample,
    /// Argmax at every position.
    Greedy,
}

/// A sampled response and its log-probability under the generating policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub sample_id: String,
    pub tokens: Vec<Token>,
    pub rendered: String,
    pub logprob_sum: f64,
    pub per_token_logprobs: Vec<f64>,
}

impl Rollout {
    pub fn mode(&self) -> ThinkMode {
        match self.tokens.first() {
            Some(Token::Mode(m)) => *m,
            _ => unreachable!("rollouts always start with a mode token"),
        }
    }

    pub fn answer(&self) -> Label {
        match self.tokens.last() {
            Some(Token::Answer(l)) => *l,
            _ => unreachable!("rollouts always end with an answer token"),
        }
    }

    /// Parsed view whose token count is the number of emitted tokens.
    pub fn response(&self) -> StructuredResponse {
        parse_response(&self.rendered).with_token_count(self.tokens.len())
    }
}

fn draw(probs: &[f64], decoding: Decoding, rng: &mut Rng) -> usize {
    match decoding {
        Decoding::Greedy => probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0,
        Decoding::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        }
    }
}

/// Abstract reasoning text: tokens rendered as `r<index>` separated by spaces.
pub fn render_reasoning(tokens: &[u16]) -> String {
    tokens.iter().map(|t| format!("r{t}")).collect::<Vec<_>>().join(" ")
}

/// Inverse of [`render_reasoning`].
pub fn parse_reasoning(text: &str, vocab: usize) -> Result<Vec<u16>> {
    text.split_whitespace()
        .map(|w| {
            w.strip_prefix('r')
                .and_then(|n| n.parse::<u16>().ok())
                .filter(|v| (*v as usize) < vocab)
                .ok_or_else(|| Error::InvalidTokens(format!("unknown reasoning token {w:?}")))
        })
        .collect()
}

/// Renders a structurally valid token sequence to response text.
pub fn render_tokens(dims: &PolicyDims, tokens: &[Token]) -> Result<String> {
    let (mode, reasoning, answer) = split_tokens(dims, tokens)?;
    let steps: Vec<u16> = reasoning
        .iter()
        .map(|t| match t {
            Token::Reason(v) => *v,
            _ => unreachable!(),
        })
        .collect();
    let text = render_reasoning(&steps);
    render_response(mode, (!steps.is_empty()).then_some(text.as_str()), answer.as_str())
}

/// Draws one response.
pub fn sample_rollout(
    params: &PolicyParams,
    sample: &DetectionSample,
    control: ModeControl,
    decoding: Decoding,
    rng: &mut Rng,
) -> Result<Rollout> {
    let dims = params.dims;
    let ctx = context(sample, &dims)?;
    let mut tokens = Vec::with_capacity(dims.sequence_len(ThinkMode::Reasoning));
    let mut per_token = Vec::with_capacity(tokens.capacity());

    let mode_eval = params.eval_head(Head::Mode, &ctx)?;
    let mode = match control {
        ModeControl::Auto => mode_from_index(draw(&mode_eval.probs, decoding, rng)),
        ModeControl::Forced(m) => m,
    };
    tokens.push(Token::Mode(mode));
    per_token.push(mode_eval.logp[mode_index(mode)]);

    let answer_eval = match mode {
        ThinkMode::NonReasoning => params.eval_head(Head::AnswerPlain, &ctx)?,
        ThinkMode::Reasoning => {
            let reason_eval = params.eval_head(Head::Reason, &ctx)?;
            for _ in 0..dims.reason_len {
                let v = draw(&reason_eval.probs, decoding, rng);
                tokens.push(Token::Reason(v as u16));
                per_token.push(reason_eval.logp[v]);
            }
            params.eval_head(Head::AnswerInformed, &informed_context(sample, &dims)?)?
        }
    };
    let a = draw(&answer_eval.probs, decoding, rng);
    tokens.push(Token::Answer(Label::from_index(a).expect("binary answer head")));
    per_token.push(answer_eval.logp[a]);

    let rendered = render_tokens(&dims, &tokens)?;
    Ok(Rollout {
        sample_id: sample.id.clone(),
        tokens,
        rendered,
        logprob_sum: per_token.iter().sum(),
        per_token_logprobs: per_token,
    })
}

/// Temperature-1 sampling with the policy choosing its own mode.
pub fn sample_response(params: &PolicyParams, sample: &DetectionSample, rng: &mut Rng) -> Result<Rollout> {
    sample_rollout(params, sample, ModeControl::Auto, Decoding::Sample, rng)
}

/// Frozen, shareable copy of policy parameters.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<PolicyParams>);

impl PolicySnapshot {
    pub fn new(params: PolicyParams) -> Self {
        PolicySnapshot(Arc::new(params))
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }

    pub fn logprob(&self, sample: &DetectionSample, tokens: &[Token]) -> Result<f64> {
        logprob(&self.0, sample, tokens)
    }

    pub fn sample(&self, sample: &DetectionSample, control: ModeControl, decoding: Decoding, rng: &mut Rng) -> Result<Rollout> {
        sample_rollout(&self.0, sample, control, decoding, rng)
    }
}
