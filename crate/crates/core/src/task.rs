//! Synthetic detection task.
//!
//! Easy instances are linearly separable from their visible features. Hard
//! instances carry no label signal in the visible features; the label lives
//! in a hidden feature block that the policy only sees after committing to
//! reasoning mode. Both blocks place the label along a fixed random unit
//! direction per seed, with margin at least `separation`.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::SeedBank;
use crate::rng::{derive_rng, stream, Rng};
use crate::types::{Label, QueryClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn query_class(self) -> QueryClass {
        match self {
            Difficulty::Easy => QueryClass::SimpleBank,
            Difficulty::Hard => QueryClass::HardBank,
        }
    }
}

/// One labelled instance with the query it was posed with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSample {
    pub id: String,
    pub features: Vec<f64>,
    pub hidden_features: Vec<f64>,
    pub gold: Label,
    pub difficulty: Difficulty,
    pub query_text: String,
    pub query_class: QueryClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub separation: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            feature_dim: 8,
            hidden_dim: 4,
            separation: 1.0,
        }
    }
}

/// A task instance: the label directions drawn from one seed. Samples drawn
/// from different streams of the same task share those directions, which is
/// what makes a held-out split meaningful.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    config: TaskConfig,
    seed: u64,
    feature_direction: Vec<f64>,
    hidden_direction: Vec<f64>,
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian noise whose projection on `direction` is replaced by a signed
/// offset of magnitude `separation + 0.5|z|`.
fn with_margin(rng: &mut Rng, direction: &[f64], sign: f64, separation: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..direction.len()).map(|_| rng.sample(StandardNormal)).collect();
    let along = dot(&v, direction);
    let z: f64 = rng.sample(StandardNormal);
    let target = sign * (separation + 0.5 * z.abs());
    for (x, d) in v.iter_mut().zip(direction) {
        *x += (target - along) * d;
    }
    v
}

impl SyntheticTask {
    pub fn new(seed: u64, config: TaskConfig) -> Self {
        let mut rng = derive_rng(seed, &[stream::DATA, 0]);
        let feature_direction = random_unit(&mut rng, config.feature_dim);
        let hidden_direction = random_unit(&mut rng, config.hidden_dim);
        SyntheticTask {
            config,
            seed,
            feature_direction,
            hidden_direction,
        }
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn feature_direction(&self) -> &[f64] {
        &self.feature_direction
    }

    pub fn hidden_direction(&self) -> &[f64] {
        &self.hidden_direction
    }

    /// Draws `n_easy` then `n_hard` samples from the given stream. Stream 0
    /// is the training split; other streams give disjoint held-out splits.
    pub fn generate(&self, n_easy: usize, n_hard: usize, split: u64, bank: &SeedBank) -> Vec<DetectionSample> {
        let sep = self.config.separation;
        let mut out = Vec::with_capacity(n_easy + n_hard);
        for (difficulty, count) in [(Difficulty::Easy, n_easy), (Difficulty::Hard, n_hard)] {
            let tag = match difficulty {
                Difficulty::Easy => 0,
                Difficulty::Hard => 1,
            };
            for i in 0..count {
                let mut rng = derive_rng(self.seed, &[stream::DATA, 1 + split, tag, i as u64]);
                let gold = if rng.random_bool(0.5) { Label::Fake } else { Label::Real };
                let sign = match gold {
                    Label::Fake => 1.0,
                    Label::Real => -1.0,
                };
                let features = match difficulty {
                    Difficulty::Easy => with_margin(&mut rng, &self.feature_direction, sign, sep),
                    Difficulty::Hard => (0..self.config.feature_dim)
                        .map(|_| rng.sample(StandardNormal))
                        .collect(),
                };
                let hidden_features = with_margin(&mut rng, &self.hidden_direction, sign, sep);
                let query_class = difficulty.query_class();
                let query_text = bank
                    .questions(query_class)
                    .choose(&mut rng)
                    .cloned()
                    .unwrap_or_default();
                let prefix = match difficulty {
                    Difficulty::Easy => "easy",
                    Difficulty::Hard => "hard",
                };
                out.push(DetectionSample {
                    id: format!("{prefix}-{split}-{i:05}"),
                    features,
                    hidden_features,
                    gold,
                    difficulty,
                    query_text,
                    query_class,
                });
            }
        }
        out
    }
}

/// Abstract reasoning trace for a sample: hidden feature `j mod d_h`
/// quantized into `vocab` equal bins over [-3, 3].
pub fn reasoning_trace(sample: &DetectionSample, vocab: usize, reason_len: usize) -> Vec<u16> {
    let hidden = &sample.hidden_features;
    (0..reason_len)
        .map(|j| {
            let h = hidden.get(j % hidden.len().max(1)).copied().unwrap_or(0.0);
            let bin = ((h + 3.0) / 6.0 * vocab as f64).floor();
            bin.clamp(0.0, (vocab - 1) as f64) as u16
        })
        .collect()
}

/// Training split of the default task for `seed`.
pub fn generate_dataset(n_easy: usize, n_hard: usize, seed: u64) -> Vec<DetectionSample> {
    SyntheticTask::new(seed, TaskConfig::default()).generate(n_easy, n_hard, 0, &SeedBank::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traces_stay_in_vocabulary() {
        for s in generate_dataset(20, 20, 1) {
            let t = reasoning_trace(&s, 6, 4);
            assert_eq!(t.len(), 4);
            assert!(t.iter().all(|&v| v < 6));
        }
    }

    #[test]
    fn empty_counts_give_empty_dataset() {
        assert!(generate_dataset(0, 0, 3).is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = serde_json::to_string(&generate_dataset(100, 100, 42)).unwrap();
        let b = serde_json::to_string(&generate_dataset(100, 100, 42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_dataset(100, 100, 42).len(), 200);
        assert_ne!(a, serde_json::to_string(&generate_dataset(100, 100, 43)).unwrap());
    }

    #[test]
    fn margins_hold_along_label_directions() {
        let task = SyntheticTask::new(5, TaskConfig::default());
        let bank = SeedBank::default();
        for s in task.generate(200, 200, 0, &bank) {
            let sign = if s.gold == Label::Fake { 1.0 } else { -1.0 };
            let h = sign * dot(&s.hidden_features, task.hidden_direction());
            assert!(h >= 1.0 - 1e-12, "hidden margin {h}");
            if s.difficulty == Difficulty::Easy {
                let m = sign * dot(&s.features, task.feature_direction());
                assert!(m >= 1.0 - 1e-12, "feature margin {m}");
                assert_eq!(s.query_class, QueryClass::SimpleBank);
            } else {
                assert_eq!(s.query_class, QueryClass::HardBank);
            }
            assert!(bank.questions(s.query_class).contains(&s.query_text));
        }
    }

    #[test]
    fn splits_share_directions_but_not_samples() {
        let task = SyntheticTask::new(5, TaskConfig::default());
        let bank = SeedBank::default();
        let train = task.generate(5, 5, 0, &bank);
        let test = task.generate(5, 5, 1, &bank);
        assert_ne!(train[0].features, test[0].features);
        assert_ne!(train[0].id, test[0].id);
    }
}
