//! Stage two: group-relative policy optimization with the hybrid reward.
//!
//! For every prompt the behaviour policy samples a group of `G` responses.
//! Each response is scored by the rule-based reward, rewards are normalized
//! within the group, and the policy ascends the clipped surrogate
//!
//! ```text
//! J(θ) = 1/G Σ_i [ min(ρ_i A_i, clip(ρ_i, 1-ε, 1+ε) A_i) - β KL_i ]
//! ρ_i  = π_θ(o_i | x) / π_old(o_i | x)            (whole-sequence ratio)
//! KL_i = exp(Δ_i) - Δ_i - 1,  Δ_i = log π_sft(o_i | x) - log π_θ(o_i | x)
//! ```
//!
//! No critic is involved; the group mean is the baseline.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::ThinkMode;
use crate::optim::{AdamW, AdamWConfig};
use crate::policy::{accumulate_logprob_grad, logprob, sample_response, PolicyParams, PolicySnapshot, Rollout};
use crate::reward::{score_group, RewardBreakdown, RewardWeights};
use crate::rng::{derive_rng, stream, Rng};
use crate::task::DetectionSample;
use crate::types::QueryClass;

/// Largest |log ρ| tolerated before the step is aborted.
const MAX_LOG_RATIO: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// Divide by G.
    Population,
    /// Divide by G - 1.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroStdPolicy {
    /// A group with identical rewards contributes no policy gradient.
    ZeroAdvantage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub reward_weights: RewardWeights,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub rl_epochs: usize,
    pub batch_size: usize,
    pub inner_updates: usize,
    pub seed: u64,
    pub advantage_std_mode: StdMode,
    pub zero_std_policy: ZeroStdPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::with_learning_rate(1e-2);
        TrainConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            reward_weights: RewardWeights::default(),
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            rl_epochs: 3,
            batch_size: 32,
            inner_updates: 1,
            seed: 0,
            advantage_std_mode: StdMode::Population,
            zero_std_policy: ZeroStdPolicy::ZeroAdvantage,
        }
    }
}

impl TrainConfig {
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
        let w = self.reward_weights;
        let reals = [
            self.clip_eps,
            self.kl_beta,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
            w.accuracy,
            w.format,
            w.hybrid,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("train config values must be finite".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config("clip_eps must lie in (0, 1)".into()));
        }
        if self.kl_beta < 0.0 {
            return Err(Error::Config("kl_beta must be non-negative".into()));
        }
        if self.batch_size == 0 || self.inner_updates == 0 {
            return Err(Error::Config("batch_size and inner_updates must be at least 1".into()));
        }
        Ok(())
    }
}

/// Group-normalized advantages. Groups whose rewards are all equal get zero
/// advantages.
pub fn compute_advantages(rewards: &[f64], std_mode: StdMode) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::invalid(format!("advantages need a group of at least 2, got {g}")));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("rewards must be finite"));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; g]);
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = match std_mode {
        StdMode::Population => g as f64,
        StdMode::Sample => (g - 1) as f64,
    };
    let std = (ss / denom).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Non-negative per-sample KL estimate `exp(Δ) - Δ - 1`.
pub fn kl_estimate(logprob_theta: f64, logprob_sft: f64) -> f64 {
    let delta = logprob_sft - logprob_theta;
    delta.exp_m1() - delta
}

/// Everything recorded about one prompt's group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub sample_id: String,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<RewardBreakdown>,
    pub advantages: Vec<f64>,
    pub old_logprobs: Vec<f64>,
    pub sft_logprobs: Vec<f64>,
}

/// Samples and scores a group from the behaviour policy.
pub fn build_group(
    sample: &DetectionSample,
    behaviour: &PolicySnapshot,
    reference: &PolicySnapshot,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<GroupRecord> {
    let rollouts: Vec<Rollout> = (0..config.group_size)
        .map(|_| sample_response(behaviour.params(), sample, rng))
        .collect::<Result<_>>()?;
    let responses: Vec<_> = rollouts.iter().map(Rollout::response).collect();
    let mut rewards = score_group(sample.gold, sample.query_class, &responses, &config.reward_weights)?;
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let advantages = compute_advantages(&totals, config.advantage_std_mode)?;
    for (r, a) in rewards.iter_mut().zip(&advantages) {
        r.advantage = Some(*a);
    }
    let old_logprobs = rollouts.iter().map(|r| r.logprob_sum).collect();
    let sft_logprobs = rollouts
        .iter()
        .map(|r| reference.logprob(sample, &r.tokens))
        .collect::<Result<_>>()?;
    Ok(GroupRecord {
        sample_id: sample.id.clone(),
        rollouts,
        rewards,
        advantages,
        old_logprobs,
        sft_logprobs,
    })
}

/// Clipped surrogate of one response, `min(ρA, clip(ρ)A)`, and the
/// coefficient `c` with `∂/∂θ = c ∇log π_θ`. The clipped branch carries no
/// gradient when it is the smaller one.
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        (unclipped, ratio * advantage)
    } else {
        (clipped, 0.0)
    }
}

/// Per-term pieces of the objective, exposed for telemetry and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateTerm {
    pub ratio: f64,
    pub policy_term: f64,
    pub kl: f64,
}

/// Objective value for one group and its analytic gradient.
pub fn surrogate_objective(
    params: &PolicyParams,
    sample: &DetectionSample,
    group: &GroupRecord,
    config: &TrainConfig,
) -> Result<(f64, PolicyParams)> {
    let (value, grad, _) = surrogate_with_terms(params, sample, group, config)?;
    Ok((value, grad))
}

pub fn surrogate_with_terms(
    params: &PolicyParams,
    sample: &DetectionSample,
    group: &GroupRecord,
    config: &TrainConfig,
) -> Result<(f64, PolicyParams, Vec<SurrogateTerm>)> {
    if group.sample_id != sample.id {
        return Err(Error::invalid(format!(
            "group for {} evaluated on sample {}",
            group.sample_id, sample.id
        )));
    }
    let g = group.rollouts.len();
    if g == 0 || group.advantages.len() != g || group.old_logprobs.len() != g || group.sft_logprobs.len() != g {
        return Err(Error::invalid("group record fields have inconsistent lengths"));
    }
    let mut grad = PolicyParams::zeros(params.dims);
    let mut value = 0.0;
    let mut terms = Vec::with_capacity(g);
    for i in 0..g {
        let tokens = &group.rollouts[i].tokens;
        let lp = logprob(params, sample, tokens)?;
        let log_ratio = lp - group.old_logprobs[i];
        if !log_ratio.is_finite() || log_ratio.abs() > MAX_LOG_RATIO {
            return Err(Error::numerical(format!(
                "log-ratio {log_ratio} for {} response {i} exceeds {MAX_LOG_RATIO}",
                sample.id
            )));
        }
        let ratio = log_ratio.exp();
        let (policy_term, policy_coef) = clipped_term(ratio, group.advantages[i], config.clip_eps);
        let delta = group.sft_logprobs[i] - lp;
        let kl = kl_estimate(lp, group.sft_logprobs[i]);
        if !kl.is_finite() {
            return Err(Error::numerical(format!("non-finite kl estimate for {} response {i}", sample.id)));
        }
        value += policy_term - config.kl_beta * kl;
        // d/dθ [-β (e^Δ - Δ - 1)] = β (e^Δ - 1) ∇log π_θ
        let coef = policy_coef + config.kl_beta * delta.exp_m1();
        if coef != 0.0 {
            accumulate_logprob_grad(params, sample, tokens, &mut grad, coef / g as f64)?;
        }
        terms.push(SurrogateTerm { ratio, policy_term, kl });
    }
    Ok((value / g as f64, grad, terms))
}

/// Per-step training telemetry; one JSON object per line in the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTelemetry {
    pub step: usize,
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_acc: f64,
    pub mean_fmt: f64,
    pub mean_hyb: f64,
    pub kl: f64,
    pub objective: f64,
    pub simple_nonreasoning_rate: Option<f64>,
    pub hard_reasoning_rate: Option<f64>,
    /// Largest |mean advantage| over the step's groups.
    pub advantage_mean_max_abs: f64,
    /// Largest |std - 1| over the step's groups with non-zero reward variance.
    pub advantage_std_max_err: f64,
    pub min_kl: f64,
}

fn advantage_checks(groups: &[GroupRecord], std_mode: StdMode) -> (f64, f64) {
    let mut mean_err: f64 = 0.0;
    let mut std_err: f64 = 0.0;
    for g in groups {
        let n = g.advantages.len() as f64;
        let mean = g.advantages.iter().sum::<f64>() / n;
        mean_err = mean_err.max(mean.abs());
        let first = g.rewards[0].total;
        if g.rewards.iter().any(|r| r.total != first) {
            let denom = match std_mode {
                StdMode::Population => n,
                StdMode::Sample => n - 1.0,
            };
            let std = (g.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / denom).sqrt();
            std_err = std_err.max((std - 1.0).abs());
        }
    }
    (mean_err, std_err)
}

fn telemetry(step: usize, epoch: usize, groups: &[GroupRecord], samples: &[&DetectionSample], objective: f64, kls: &[f64], config: &TrainConfig) -> StepTelemetry {
    let mut n = 0.0;
    let (mut reward, mut acc, mut fmt, mut hyb) = (0.0, 0.0, 0.0, 0.0);
    let mut simple = (0usize, 0usize);
    let mut hard = (0usize, 0usize);
    for (g, s) in groups.iter().zip(samples) {
        for (r, o) in g.rewards.iter().zip(&g.rollouts) {
            n += 1.0;
            reward += r.total;
            acc += f64::from(r.accuracy);
            fmt += f64::from(r.format);
            hyb += f64::from(r.hybrid);
            match s.query_class {
                QueryClass::SimpleBank => {
                    simple.1 += 1;
                    simple.0 += usize::from(o.mode() == ThinkMode::NonReasoning);
                }
                QueryClass::HardBank => {
                    hard.1 += 1;
                    hard.0 += usize::from(o.mode() == ThinkMode::Reasoning);
                }
            }
        }
    }
    let rate = |(k, total): (usize, usize)| (total > 0).then(|| k as f64 / total as f64);
    let (advantage_mean_max_abs, advantage_std_max_err) = advantage_checks(groups, config.advantage_std_mode);
    StepTelemetry {
        step,
        epoch,
        mean_reward: reward / n,
        mean_acc: acc / n,
        mean_fmt: fmt / n,
        mean_hyb: hyb / n,
        kl: kls.iter().sum::<f64>() / kls.len().max(1) as f64,
        objective,
        simple_nonreasoning_rate: rate(simple),
        hard_reasoning_rate: rate(hard),
        advantage_mean_max_abs,
        advantage_std_max_err,
        min_kl: kls.iter().cloned().fold(f64::INFINITY, f64::min),
    }
}

/// Online RL state: current parameters, optimizer, frozen reference.
#[derive(Debug, Clone)]
pub struct HgrpoTrainer {
    params: PolicyParams,
    optimizer: AdamW,
    reference: PolicySnapshot,
    config: TrainConfig,
    step: usize,
}

impl HgrpoTrainer {
    /// Starts from the reference policy's parameters.
    pub fn new(reference: PolicySnapshot, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = reference.params().clone();
        let optimizer = AdamW::new(config.adam(), params.values.len());
        Ok(HgrpoTrainer {
            params,
            optimizer,
            reference,
            config,
            step: 0,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One RL step on a batch: sample groups from the current policy (which
    /// serves as the behaviour policy for this step), then take
    /// `inner_updates` AdamW ascent steps on the mean surrogate. Parameters
    /// are left untouched if any part of the step fails.
    pub fn rl_step(&mut self, batch: &[&DetectionSample], epoch: usize) -> Result<(StepTelemetry, Vec<GroupRecord>)> {
        if batch.is_empty() {
            return Err(Error::invalid("rl_step needs a non-empty batch"));
        }
        let behaviour = PolicySnapshot::new(self.params.clone());
        let step = self.step;
        let seed = self.config.seed;
        let groups: Vec<GroupRecord> = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = derive_rng(seed, &[stream::HGRPO, step as u64, i as u64]);
                build_group(s, &behaviour, &self.reference, &self.config, &mut rng)
            })
            .collect::<Result<_>>()?;

        let mut params = self.params.clone();
        let mut optimizer = self.optimizer.clone();
        let mut first_objective = None;
        let mut kls = Vec::new();
        for inner in 0..self.config.inner_updates {
            let parts: Vec<(f64, PolicyParams, Vec<SurrogateTerm>)> = groups
                .par_iter()
                .zip(batch.par_iter())
                .map(|(g, s)| surrogate_with_terms(&params, s, g, &self.config))
                .collect::<Result<_>>()?;
            let n = parts.len() as f64;
            let mut grad = PolicyParams::zeros(params.dims);
            let mut objective = 0.0;
            for (v, g, terms) in &parts {
                objective += v;
                grad.add_scaled(g, -1.0 / n);
                if inner == 0 {
                    kls.extend(terms.iter().map(|t| t.kl));
                }
            }
            objective /= n;
            if !grad.is_finite() {
                return Err(Error::numerical(format!("non-finite surrogate gradient at step {step}")));
            }
            first_objective.get_or_insert(objective);
            optimizer.step(&mut params, &grad);
        }
        if !params.is_finite() {
            return Err(Error::numerical(format!("parameters diverged at step {step}")));
        }
        self.params = params;
        self.optimizer = optimizer;
        self.step += 1;
        let t = telemetry(step, epoch, &groups, batch, first_objective.unwrap_or(0.0), &kls, &self.config);
        Ok((t, groups))
    }

    /// Runs `rl_epochs` passes over shuffled batches, calling `observe`
    /// after every step.
    pub fn train<F>(&mut self, dataset: &[DetectionSample], mut observe: F) -> Result<Rng>
    where
        F: FnMut(&StepTelemetry, &[GroupRecord]),
    {
        let mut rng = derive_rng(self.config.seed, &[stream::HGRPO]);
        if self.config.rl_epochs > 0 && dataset.is_empty() {
            return Err(Error::invalid("hgrpo needs a non-empty dataset"));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for epoch in 0..self.config.rl_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&DetectionSample> = chunk.iter().map(|&i| &dataset[i]).collect();
                let (t, groups) = self.rl_step(&batch, epoch)?;
                observe(&t, &groups);
            }
        }
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct HgrpoOutcome {
    pub snapshot: PolicySnapshot,
    pub telemetry: Vec<StepTelemetry>,
    pub rng_state: Rng,
}

pub fn run_hgrpo(dataset: &[DetectionSample], reference: &PolicySnapshot, config: &TrainConfig) -> Result<HgrpoOutcome> {
    let mut trainer = HgrpoTrainer::new(reference.clone(), *config)?;
    let mut log = Vec::new();
    let rng_state = trainer.train(dataset, |t, _| log.push(t.clone()))?;
    Ok(HgrpoOutcome {
        snapshot: PolicySnapshot::new(trainer.params().clone()),
        telemetry: log,
        rng_state,
    })
}
