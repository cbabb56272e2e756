use std::path::{Path, PathBuf};

use hybrid_core::data::{default_system_prompt, SeedBank};
use hybrid_core::hft::HftConfig;
use hybrid_core::hgrpo::TrainConfig;
use hybrid_core::pipeline::ExperimentConfig;
use hybrid_core::task::TaskConfig;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Which stages `run` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stages {
    pub hft: bool,
    pub reject: bool,
    pub hgrpo: bool,
    pub eval: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            hft: true,
            reject: true,
            hgrpo: true,
            eval: true,
        }
    }
}

/// Everything a run needs. Stored verbatim in every stage manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub n_easy: usize,
    pub n_hard: usize,
    pub n_heldout: usize,
    pub task: TaskConfig,
    pub hft: HftConfig,
    pub train: TrainConfig,
    pub reject_k: usize,
    /// Plain-text seed bank with `[simple]` and `[hard]` sections.
    pub seed_bank: Option<PathBuf>,
    pub system_prompt: Option<PathBuf>,
    /// Existing training / held-out JSONL files; generated when absent.
    pub train_data: Option<PathBuf>,
    pub heldout_data: Option<PathBuf>,
    pub stages: Stages,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        RunConfig {
            seed: e.seed,
            n_easy: e.n_easy,
            n_hard: e.n_hard,
            n_heldout: e.n_heldout,
            task: e.task,
            hft: e.hft,
            train: e.train,
            reject_k: e.reject_k,
            seed_bank: None,
            system_prompt: None,
            train_data: None,
            heldout_data: None,
            stages: Stages::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the run seed and pushes it into both training stages.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.hft.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            n_easy: self.n_easy,
            n_hard: self.n_hard,
            n_heldout: self.n_heldout,
            task: self.task,
            hft: self.hft,
            train: self.train,
            reject_k: self.reject_k,
            rejection: self.stages.reject,
        }
    }

    /// Checks hyperparameters and that every referenced path exists.
    pub fn validate(&self) -> Result<(), Failure> {
        self.experiment().validate()?;
        for path in [&self.seed_bank, &self.system_prompt, &self.train_data, &self.heldout_data]
            .into_iter()
            .flatten()
        {
            if !path.is_file() {
                return Err(Failure::Config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String, Failure> {
        Ok(hybrid_core::checkpoint::config_hash(self)?)
    }

    pub fn bank(&self) -> Result<SeedBank, Failure> {
        match &self.seed_bank {
            Some(p) => Ok(SeedBank::load(p)?),
            None => Ok(SeedBank::default()),
        }
    }

    pub fn prompt(&self) -> Result<String, Failure> {
        match &self.system_prompt {
            Some(p) => std::fs::read_to_string(p)
                .map(|s| s.trim_end_matches('\n').to_string())
                .map_err(|e| Failure::Config(format!("{}: {e}", p.display()))),
            None => Ok(default_system_prompt().to_string()),
        }
    }
}
