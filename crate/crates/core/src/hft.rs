//! Stage one: supervised fine-tuning on dual-mode targets.
//!
//! The loss is the negative log-likelihood of the rendered target sequence.
//! Training runs AdamW over shuffled mini-batches and freezes the result as
//! the reference policy for the RL stage.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{mode_for_class, TrainingRecord};
use crate::error::{Error, Result};
use crate::format::{parse_response, ResponseMode, ThinkMode};
use crate::optim::{AdamW, AdamWConfig};
use crate::policy::{
    accumulate_logprob_grad, logprob, mode_distribution, parse_reasoning, split_tokens, PolicyDims, PolicyParams,
    PolicySnapshot, Token,
};
use crate::rng::{derive_rng, stream, Rng};
use crate::task::{reasoning_trace, DetectionSample};

/// Target token sequence for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftTarget {
    pub sample_id: String,
    pub target_tokens: Vec<Token>,
}

impl SftTarget {
    /// Target for a synthetic sample: the mode its query class calls for,
    /// the sample's reasoning trace in reasoning mode, and the gold answer.
    pub fn for_sample(sample: &DetectionSample, dims: &PolicyDims) -> Self {
        let mode = mode_for_class(sample.query_class);
        let mut tokens = vec![Token::Mode(mode)];
        if mode == ThinkMode::Reasoning {
            tokens.extend(
                reasoning_trace(sample, dims.vocab, dims.reason_len)
                    .into_iter()
                    .map(Token::Reason),
            );
        }
        tokens.push(Token::Answer(sample.gold));
        SftTarget {
            sample_id: sample.id.clone(),
            target_tokens: tokens,
        }
    }

    /// Tokenizes a training record's response.
    pub fn from_record(record: &TrainingRecord, dims: &PolicyDims) -> Result<Self> {
        let Some(text) = &record.response else {
            return Err(Error::invalid(format!("record {} has no response", record.id)));
        };
        let parsed = parse_response(text);
        let mode = match parsed.mode {
            ResponseMode::Malformed => {
                return Err(Error::invalid(format!("record {} has a malformed response", record.id)));
            }
            m => m.think_mode().expect("well-formed"),
        };
        if mode != record.mode {
            return Err(Error::invalid(format!(
                "record {} declares mode {:?} but its response is {:?}",
                record.id, record.mode, mode
            )));
        }
        let mut tokens = vec![Token::Mode(mode)];
        if mode == ThinkMode::Reasoning {
            let steps = parse_reasoning(parsed.think.as_deref().unwrap_or_default(), dims.vocab)?;
            tokens.extend(steps.into_iter().map(Token::Reason));
        }
        tokens.push(Token::Answer(record.label));
        let target = SftTarget {
            sample_id: record.id.clone(),
            target_tokens: tokens,
        };
        split_tokens(dims, &target.target_tokens)?;
        Ok(target)
    }

    pub fn mode(&self) -> ThinkMode {
        match self.target_tokens.first() {
            Some(Token::Mode(m)) => *m,
            _ => ThinkMode::NonReasoning,
        }
    }
}

/// A sample paired with its supervised target.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub sample: DetectionSample,
    pub target: SftTarget,
}

impl SftExample {
    pub fn from_sample(sample: DetectionSample, dims: &PolicyDims) -> Self {
        let target = SftTarget::for_sample(&sample, dims);
        SftExample { sample, target }
    }

    pub fn from_record(record: &TrainingRecord, dims: &PolicyDims) -> Result<Self> {
        Ok(SftExample {
            sample: record.to_sample()?,
            target: SftTarget::from_record(record, dims)?,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.target.sample_id != self.sample.id {
            return Err(Error::invalid(format!(
                "target {} paired with sample {}",
                self.target.sample_id, self.sample.id
            )));
        }
        if self.target.mode() != mode_for_class(self.sample.query_class) {
            return Err(Error::invalid(format!(
                "target mode for {} disagrees with its query class",
                self.sample.id
            )));
        }
        if !matches!(self.target.target_tokens.last(), Some(Token::Answer(l)) if *l == self.sample.gold) {
            return Err(Error::invalid(format!("target answer for {} is not the gold label", self.sample.id)));
        }
        Ok(())
    }
}

pub fn sft_loss(params: &PolicyParams, target: &SftTarget, sample: &DetectionSample) -> Result<f64> {
    Ok(-logprob(params, sample, &target.target_tokens)?)
}

/// Loss and its gradient with respect to every parameter.
pub fn sft_loss_grad(params: &PolicyParams, target: &SftTarget, sample: &DetectionSample) -> Result<(f64, PolicyParams)> {
    let mut grad = PolicyParams::zeros(params.dims);
    let lp = accumulate_logprob_grad(params, sample, &target.target_tokens, &mut grad, -1.0)?;
    Ok((-lp, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub policy: PolicyDims,
}

impl Default for HftConfig {
    fn default() -> Self {
        let adam = AdamWConfig::with_learning_rate(1e-2);
        HftConfig {
            epochs: 1,
            batch_size: 32,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            seed: 0,
            policy: PolicyDims::default(),
        }
    }
}

impl HftConfig {
    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.learning_rate, self.beta1, self.beta2, self.eps, self.weight_decay]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config("hft config needs finite values, batch_size >= 1 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HftOutcome {
    pub snapshot: PolicySnapshot,
    /// Mean mini-batch loss at every optimizer step.
    pub loss_curve: Vec<f64>,
    pub initial_mean_loss: f64,
    pub final_mean_loss: f64,
    pub rng_state: Rng,
}

/// Mean loss over a set of examples, reduced in input order.
pub fn mean_sft_loss(params: &PolicyParams, examples: &[SftExample]) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|e| sft_loss(params, &e.target, &e.sample))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Fraction of examples whose most likely mode is the target mode.
pub fn mode_agreement(params: &PolicyParams, examples: &[SftExample]) -> Result<f64> {
    let mut agree = 0usize;
    for e in examples {
        let p = mode_distribution(params, &e.sample)?;
        let argmax = if p[1] > p[0] { ThinkMode::Reasoning } else { ThinkMode::NonReasoning };
        agree += usize::from(argmax == e.target.mode());
    }
    Ok(agree as f64 / examples.len().max(1) as f64)
}

pub fn run_hft(examples: &[SftExample], config: &HftConfig) -> Result<HftOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::invalid("hft needs a non-empty dataset"));
    }
    for e in examples {
        e.validate()?;
    }
    let mut params = PolicyParams::zeros(config.policy);
    let mut optimizer = AdamW::new(config.adam(), params.values.len());
    let mut rng = derive_rng(config.seed, &[stream::HFT]);
    let initial_mean_loss = mean_sft_loss(&params, examples)?;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_curve = Vec::new();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let parts: Vec<(f64, PolicyParams)> = batch
                .par_iter()
                .map(|&i| sft_loss_grad(&params, &examples[i].target, &examples[i].sample))
                .collect::<Result<_>>()?;
            let mut grad = PolicyParams::zeros(params.dims);
            let mut loss = 0.0;
            for (l, g) in &parts {
                loss += l;
                grad.add_scaled(g, 1.0);
            }
            let n = parts.len() as f64;
            loss /= n;
            grad.scale(1.0 / n);
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite sft loss at step {}; lower the learning rate",
                    loss_curve.len()
                )));
            }
            optimizer.step(&mut params, &grad);
            loss_curve.push(loss);
        }
    }
    let final_mean_loss = mean_sft_loss(&params, examples)?;
    Ok(HftOutcome {
        snapshot: PolicySnapshot::new(params),
        loss_curve,
        initial_mean_loss,
        final_mean_loss,
        rng_state: rng,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dual_mode, synthetic_corpora, SeedBank};
    use crate::task::generate_dataset;

    #[test]
    fn zero_params_nonreasoning_loss() {
        let dims = PolicyDims::default();
        let s = generate_dataset(1, 0, 1).remove(0);
        let t = SftTarget::for_sample(&s, &dims);
        let loss = sft_loss(&PolicyParams::zeros(dims), &t, &s).unwrap();
        assert!((loss - 1.386_294_361_119_890_6).abs() < 1e-12);
    }

    #[test]
    fn confident_params_drive_loss_to_zero() {
        let dims = PolicyDims::default();
        let s = generate_dataset(1, 0, 1).remove(0);
        let t = SftTarget::for_sample(&s, &dims);
        let mut last = f64::INFINITY;
        for gap in [1.0, 5.0, 20.0, 60.0] {
            let mut p = PolicyParams::zeros(dims);
            let q = dims.feature_dim + s.query_class.index();
            *p.weight_mut(crate::policy::Head::Mode, q, 0) = gap;
            *p.weight_mut(crate::policy::Head::AnswerPlain, q, s.gold.index()) = gap;
            let loss = sft_loss(&p, &t, &s).unwrap();
            assert!(loss >= 0.0 && loss < last);
            last = loss;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn record_targets_match_sample_targets() {
        let dims = PolicyDims::default();
        let samples = generate_dataset(4, 4, 2);
        let ds = build_dual_mode(&synthetic_corpora(&samples, dims.vocab, dims.reason_len), &SeedBank::default(), 0);
        for (r, s) in ds.records.iter().zip(&samples) {
            let from_record = SftTarget::from_record(r, &dims).unwrap();
            assert_eq!(from_record, SftTarget::for_sample(s, &dims));
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(run_hft(&[], &HftConfig::default()).is_err());
    }

    #[test]
    fn mismatched_target_is_rejected() {
        let dims = PolicyDims::default();
        let mut samples = generate_dataset(1, 1, 2);
        let hard = samples.pop().unwrap();
        let easy = samples.pop().unwrap();
        let bad = SftExample {
            target: SftTarget::for_sample(&hard, &dims),
            sample: easy,
        };
        assert!(run_hft(&[bad], &HftConfig::default()).is_err());
    }

    #[test]
    fn divergent_learning_rate_aborts() {
        let dims = PolicyDims::default();
        let mut samples = generate_dataset(8, 8, 2);
        for s in &mut samples {
            s.features.iter_mut().for_each(|f| *f *= 1e200);
        }
        let ex: Vec<_> = samples.into_iter().map(|s| SftExample::from_sample(s, &dims)).collect();
        let cfg = HftConfig { learning_rate: 1e200, epochs: 2, ..HftConfig::default() };
        let r = run_hft(&ex, &cfg);
        assert!(matches!(r, Err(Error::Numerical(_))), "{:?}", r.map(|o| o.final_mean_loss));
    }

    #[test]
    fn training_makes_progress() {
        let dims = PolicyDims::default();
        let ex: Vec<_> = generate_dataset(200, 200, 3)
            .into_iter()
            .map(|s| SftExample::from_sample(s, &dims))
            .collect();
        let out = run_hft(&ex, &HftConfig { epochs: 2, ..HftConfig::default() }).unwrap();
        assert!(out.final_mean_loss < out.initial_mean_loss);
        assert_eq!(out.loss_curve.len(), 2 * 400usize.div_ceil(32));
    }
}
