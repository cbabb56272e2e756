//! End-to-end experiment: generate data, fine-tune, filter by rejection
//! sampling, run RL, and evaluate both checkpoints on a held-out split.

use serde::{Deserialize, Serialize};

use crate::data::{
    build_dual_mode_with_prompt, default_system_prompt, policy_scorer, rejection_sample, synthetic_corpora,
    QuarantinedRecord, SeedBank, TrainingRecord,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, mean_expected_reward, EvalResult};
use crate::format::ThinkMode;
use crate::hft::{mode_agreement, run_hft, HftConfig, SftExample};
use crate::hgrpo::{run_hgrpo, StepTelemetry, TrainConfig};
use crate::policy::{Decoding, ModeControl, PolicyParams, PolicySnapshot};
use crate::task::{DetectionSample, Difficulty, SyntheticTask, TaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds data generation and both training stages.
    pub seed: u64,
    pub n_easy: usize,
    pub n_hard: usize,
    /// Held-out samples per difficulty.
    pub n_heldout: usize,
    pub task: TaskConfig,
    pub hft: HftConfig,
    pub train: TrainConfig,
    pub reject_k: usize,
    pub rejection: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            n_easy: 1000,
            n_hard: 1000,
            n_heldout: 250,
            task: TaskConfig::default(),
            hft: HftConfig::default(),
            train: TrainConfig::default(),
            reject_k: 5,
            rejection: true,
        }
    }
}

impl ExperimentConfig {
    /// Copy with the run seed pushed into both training stages.
    pub fn seeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.hft.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.hft.validate()?;
        self.train.validate()?;
        let dims = self.hft.policy;
        if dims.feature_dim != self.task.feature_dim || dims.hidden_dim != self.task.hidden_dim {
            return Err(Error::Config(format!(
                "policy expects feature dims ({}, {}) but the task produces ({}, {})",
                dims.feature_dim, dims.hidden_dim, self.task.feature_dim, self.task.hidden_dim
            )));
        }
        if dims.vocab == 0 || dims.reason_len == 0 {
            return Err(Error::Config("policy needs vocab >= 1 and reason_len >= 1".into()));
        }
        if !(self.task.separation.is_finite() && self.task.separation >= 0.0) {
            return Err(Error::Config("task separation must be finite and non-negative".into()));
        }
        if self.reject_k == 0 {
            return Err(Error::Config("reject_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Evaluation of one checkpoint on the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    /// Greedy decoding, policy picks the mode.
    pub auto: EvalResult,
    pub forced_reasoning: EvalResult,
    pub forced_nonreasoning: EvalResult,
    /// Greedy auto-mode accuracy on easy / hard samples.
    pub easy_accuracy: f64,
    pub hard_accuracy: f64,
    /// Mean exact expected reward of a temperature-1 sample.
    pub expected_reward: f64,
}

pub fn evaluate_checkpoint(params: &PolicyParams, heldout: &[DetectionSample], train: &TrainConfig, seed: u64) -> Result<CheckpointEval> {
    let auto = evaluate_policy(params, heldout, ModeControl::Auto, Decoding::Greedy, seed)?.result;
    let forced_reasoning =
        evaluate_policy(params, heldout, ModeControl::Forced(ThinkMode::Reasoning), Decoding::Greedy, seed)?.result;
    let forced_nonreasoning =
        evaluate_policy(params, heldout, ModeControl::Forced(ThinkMode::NonReasoning), Decoding::Greedy, seed)?.result;
    let subset = |d: Difficulty| -> Vec<DetectionSample> {
        heldout.iter().filter(|s| s.difficulty == d).cloned().collect()
    };
    let acc = |d: Difficulty| -> Result<f64> {
        let s = subset(d);
        if s.is_empty() {
            return Ok(0.0);
        }
        Ok(evaluate_policy(params, &s, ModeControl::Auto, Decoding::Greedy, seed)?.result.overall_acc)
    };
    Ok(CheckpointEval {
        auto,
        forced_reasoning,
        forced_nonreasoning,
        easy_accuracy: acc(Difficulty::Easy)?,
        hard_accuracy: acc(Difficulty::Hard)?,
        expected_reward: mean_expected_reward(params, heldout, &train.reward_weights)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub train_records: usize,
    pub rl_records: usize,
    pub rejected: usize,
    pub hft_initial_loss: f64,
    pub hft_final_loss: f64,
    pub hft_mode_agreement: f64,
    pub sft: CheckpointEval,
    pub hrl: CheckpointEval,
    pub telemetry: Vec<StepTelemetry>,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub report: ExperimentReport,
    pub sft: PolicySnapshot,
    pub hrl: PolicySnapshot,
    pub rl_samples: Vec<DetectionSample>,
    pub heldout: Vec<DetectionSample>,
    pub records: Vec<TrainingRecord>,
}

/// Training records and the held-out split for one configuration.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub records: Vec<TrainingRecord>,
    pub quarantine: Vec<QuarantinedRecord>,
    pub heldout: Vec<DetectionSample>,
}

pub fn prepare_data(config: &ExperimentConfig, bank: &SeedBank, system_prompt: &str) -> PreparedData {
    let dims = config.hft.policy;
    let task = SyntheticTask::new(config.seed, config.task);
    let train_samples = task.generate(config.n_easy, config.n_hard, 0, bank);
    let heldout = task.generate(config.n_heldout, config.n_heldout, 1, bank);
    let corpora = synthetic_corpora(&train_samples, dims.vocab, dims.reason_len);
    let built = build_dual_mode_with_prompt(&corpora, bank, config.seed, system_prompt);
    PreparedData {
        records: built.records,
        quarantine: built.quarantine,
        heldout,
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Experiment> {
    config.validate()?;
    let dims = config.hft.policy;
    let PreparedData { records, heldout, .. } = prepare_data(config, &SeedBank::default(), default_system_prompt());
    let examples: Vec<SftExample> = records
        .iter()
        .map(|r| SftExample::from_record(r, &dims))
        .collect::<Result<_>>()?;
    let hft = run_hft(&examples, &config.hft)?;
    let agreement = mode_agreement(hft.snapshot.params(), &examples)?;

    let samples: Vec<DetectionSample> = examples.into_iter().map(|e| e.sample).collect();
    let n_train = samples.len();
    let rl_samples = if config.rejection {
        let scorer = policy_scorer(&hft.snapshot, ModeControl::Auto);
        rejection_sample(samples, scorer, config.reject_k, config.seed)?.0
    } else {
        samples
    };

    let hgrpo = run_hgrpo(&rl_samples, &hft.snapshot, &config.train)?;
    let sft_eval = evaluate_checkpoint(hft.snapshot.params(), &heldout, &config.train, config.seed)?;
    let hrl_eval = evaluate_checkpoint(hgrpo.snapshot.params(), &heldout, &config.train, config.seed)?;

    Ok(Experiment {
        report: ExperimentReport {
            train_records: n_train,
            rl_records: rl_samples.len(),
            rejected: n_train - rl_samples.len(),
            hft_initial_loss: hft.initial_mean_loss,
            hft_final_loss: hft.final_mean_loss,
            hft_mode_agreement: agreement,
            sft: sft_eval,
            hrl: hrl_eval,
            telemetry: hgrpo.telemetry,
        },
        sft: hft.snapshot,
        hrl: hgrpo.snapshot,
        rl_samples,
        heldout,
        records,
    })
}
