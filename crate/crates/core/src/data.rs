//! Dual-mode data construction.
//!
//! Source corpora come in three kinds. Corpora that already hold both kinds
//! of response are split by parsing each response. Label-only corpora get
//! queries from the simple seed bank and direct-answer targets.
//! Reasoning-heavy corpora get hard-bank queries and reasoning targets.
//! Every output record remembers which bank its query came from.
//!
//! Records are exchanged as JSONL, one [`TrainingRecord`] per line.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{parse_response, render_response, ResponseMode, ThinkMode};
use crate::policy::{sample_rollout, Decoding, ModeControl, PolicySnapshot};
use crate::reward::accuracy_reward;
use crate::rng::{derive_rng, stream, Rng};
use crate::task::{reasoning_trace, DetectionSample, Difficulty};
use crate::types::{Label, QueryClass};

const DEFAULT_SEED_BANKS: &str = include_str!("../resources/seed_banks.txt");
const DEFAULT_SYSTEM_PROMPT: &str = include_str!("../resources/system_prompt.txt");

/// The system prompt used for training and evaluation.
pub fn default_system_prompt() -> &'static str {
    DEFAULT_SYSTEM_PROMPT.trim_end_matches('\n')
}

/// Simple and hard query phrasings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedBank {
    pub simple: Vec<String>,
    pub hard: Vec<String>,
}

impl Default for SeedBank {
    fn default() -> Self {
        SeedBank::parse(DEFAULT_SEED_BANKS).expect("bundled seed banks are valid")
    }
}

impl SeedBank {
    pub fn new(simple: Vec<String>, hard: Vec<String>) -> Result<Self> {
        if simple.is_empty() || hard.is_empty() {
            return Err(Error::invalid("seed banks must be non-empty"));
        }
        let s: BTreeSet<_> = simple.iter().collect();
        if hard.iter().any(|q| s.contains(q)) {
            return Err(Error::invalid("simple and hard seed banks must be disjoint"));
        }
        Ok(SeedBank { simple, hard })
    }

    /// Parses the plain-text format: one question per line under `[simple]`
    /// and `[hard]` section headers. Blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut simple = Vec::new();
        let mut hard = Vec::new();
        let mut section: Option<QueryClass> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[simple]" => section = Some(QueryClass::SimpleBank),
                "[hard]" => section = Some(QueryClass::HardBank),
                q => match section {
                    Some(QueryClass::SimpleBank) => simple.push(q.to_string()),
                    Some(QueryClass::HardBank) => hard.push(q.to_string()),
                    None => {
                        return Err(Error::invalid(format!(
                            "seed bank line {} appears before any section header",
                            n + 1
                        )))
                    }
                },
            }
        }
        SeedBank::new(simple, hard)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SeedBank::parse(&std::fs::read_to_string(path)?)
    }

    pub fn questions(&self, class: QueryClass) -> &[String] {
        match class {
            QueryClass::SimpleBank => &self.simple,
            QueryClass::HardBank => &self.hard,
        }
    }

    pub fn contains(&self, class: QueryClass, query: &str) -> bool {
        self.questions(class).iter().any(|q| q == query)
    }

    fn draw(&self, class: QueryClass, rng: &mut Rng) -> String {
        self.questions(class).choose(rng).cloned().expect("non-empty bank")
    }
}

/// What a source record points at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Payload {
    Image(String),
    Features { features: Vec<f64>, hidden: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub id: String,
    pub payload: Payload,
    pub label: Label,
    pub response: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusKind {
    /// Records already carry reasoning or direct responses.
    HasDualResponses,
    /// Records carry only a label.
    BinaryOnly,
    /// Records carry reasoning explanations.
    ReasoningIntensive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceCorpus {
    pub name: String,
    pub kind: CorpusKind,
    pub records: Vec<SourceRecord>,
}

/// One line of a training JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub id: String,
    pub image: Option<String>,
    pub features: Option<Vec<f64>>,
    /// Evidence only visible in reasoning mode (synthetic data only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_features: Option<Vec<f64>>,
    pub query: String,
    pub query_class: QueryClass,
    pub label: Label,
    pub mode: ThinkMode,
    pub response: Option<String>,
    pub system_prompt: String,
}

impl TrainingRecord {
    /// Rebuilds the detection sample for a synthetic record.
    pub fn to_sample(&self) -> Result<DetectionSample> {
        let (Some(features), Some(hidden)) = (&self.features, &self.hidden_features) else {
            return Err(Error::invalid(format!(
                "record {} has no feature payload; only synthetic records can drive the policy",
                self.id
            )));
        };
        Ok(DetectionSample {
            id: self.id.clone(),
            features: features.clone(),
            hidden_features: hidden.clone(),
            gold: self.label,
            difficulty: match self.query_class {
                QueryClass::SimpleBank => Difficulty::Easy,
                QueryClass::HardBank => Difficulty::Hard,
            },
            query_text: self.query.clone(),
            query_class: self.query_class,
        })
    }
}

/// A response paired with the system prompt it is trained under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedRecord {
    pub system_prompt: String,
    pub response: String,
}

/// The mode a query class calls for.
pub fn mode_for_class(class: QueryClass) -> ThinkMode {
    match class {
        QueryClass::SimpleBank => ThinkMode::NonReasoning,
        QueryClass::HardBank => ThinkMode::Reasoning,
    }
}

/// Renders the training response for a record in its designated mode.
pub fn format_record(
    query_class: QueryClass,
    label: Label,
    mode: ThinkMode,
    reasoning: Option<&str>,
    system_prompt: &str,
) -> Result<FormattedRecord> {
    if mode != mode_for_class(query_class) {
        return Err(Error::invalid(format!(
            "mode {mode:?} is inconsistent with query class {query_class}"
        )));
    }
    let reasoning = match mode {
        ThinkMode::Reasoning => reasoning,
        ThinkMode::NonReasoning => None,
    };
    Ok(FormattedRecord {
        system_prompt: system_prompt.to_string(),
        response: render_response(mode, reasoning, label.as_str())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantinedRecord {
    pub corpus: String,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DualModeDataset {
    pub records: Vec<TrainingRecord>,
    pub quarantine: Vec<QuarantinedRecord>,
}

fn payload_fields(payload: &Payload) -> (Option<String>, Option<Vec<f64>>, Option<Vec<f64>>) {
    match payload {
        Payload::Image(path) => (Some(path.clone()), None, None),
        Payload::Features { features, hidden } => (None, Some(features.clone()), Some(hidden.clone())),
    }
}

/// Applies the data-oriented and query-oriented heuristics to every corpus.
/// Output order follows input order; unusable records go to quarantine.
pub fn build_dual_mode(sources: &[SourceCorpus], banks: &SeedBank, seed: u64) -> DualModeDataset {
    build_dual_mode_with_prompt(sources, banks, seed, default_system_prompt())
}

pub fn build_dual_mode_with_prompt(
    sources: &[SourceCorpus],
    banks: &SeedBank,
    seed: u64,
    system_prompt: &str,
) -> DualModeDataset {
    let mut out = DualModeDataset::default();
    for (ci, corpus) in sources.iter().enumerate() {
        for (ri, record) in corpus.records.iter().enumerate() {
            let quarantine = |reason: String| QuarantinedRecord {
                corpus: corpus.name.clone(),
                id: record.id.clone(),
                reason,
            };
            let routed = route(corpus.kind, record);
            let (mode, reasoning) = match routed {
                Ok(r) => r,
                Err(reason) => {
                    out.quarantine.push(quarantine(reason));
                    continue;
                }
            };
            let class = match mode {
                ThinkMode::NonReasoning => QueryClass::SimpleBank,
                ThinkMode::Reasoning => QueryClass::HardBank,
            };
            let mut rng = derive_rng(seed, &[stream::PIPELINE, ci as u64, ri as u64]);
            let query = banks.draw(class, &mut rng);
            let formatted = match format_record(class, record.label, mode, reasoning.as_deref(), system_prompt) {
                Ok(f) => f,
                Err(e) => {
                    out.quarantine.push(quarantine(e.to_string()));
                    continue;
                }
            };
            let (image, features, hidden_features) = payload_fields(&record.payload);
            out.records.push(TrainingRecord {
                id: record.id.clone(),
                image,
                features,
                hidden_features,
                query,
                query_class: class,
                label: record.label,
                mode,
                response: Some(formatted.response),
                system_prompt: formatted.system_prompt,
            });
        }
    }
    out
}

/// Decides the mode and reasoning text of a source record.
fn route(kind: CorpusKind, record: &SourceRecord) -> std::result::Result<(ThinkMode, Option<String>), String> {
    match kind {
        CorpusKind::BinaryOnly => Ok((ThinkMode::NonReasoning, None)),
        CorpusKind::HasDualResponses => {
            let Some(text) = &record.response else {
                return Err("missing response".into());
            };
            let parsed = parse_response(text);
            match parsed.mode {
                ResponseMode::Malformed => Err("response has no well-formed think tags".into()),
                ResponseMode::NonReasoning => Ok((ThinkMode::NonReasoning, None)),
                ResponseMode::Reasoning => Ok((ThinkMode::Reasoning, parsed.think)),
            }
        }
        CorpusKind::ReasoningIntensive => {
            let Some(text) = &record.response else {
                return Err("missing reasoning".into());
            };
            let parsed = parse_response(text);
            let reasoning = match parsed.mode {
                ResponseMode::Reasoning => parsed.think.unwrap_or_default(),
                ResponseMode::Malformed => parsed.answer,
                ResponseMode::NonReasoning => String::new(),
            };
            if reasoning.trim().is_empty() {
                Err("empty reasoning".into())
            } else {
                Ok((ThinkMode::Reasoning, Some(reasoning)))
            }
        }
    }
}

/// Wraps synthetic samples as source corpora: easy samples as a label-only
/// corpus and hard samples as a reasoning corpus whose explanations are the
/// abstract traces of their hidden evidence.
pub fn synthetic_corpora(samples: &[DetectionSample], vocab: usize, reason_len: usize) -> Vec<SourceCorpus> {
    let record = |s: &DetectionSample, response: Option<String>| SourceRecord {
        id: s.id.clone(),
        payload: Payload::Features {
            features: s.features.clone(),
            hidden: s.hidden_features.clone(),
        },
        label: s.gold,
        response,
    };
    let binary = samples
        .iter()
        .filter(|s| s.difficulty == Difficulty::Easy)
        .map(|s| record(s, None))
        .collect();
    let reasoning = samples
        .iter()
        .filter(|s| s.difficulty == Difficulty::Hard)
        .map(|s| {
            let trace = crate::policy::render_reasoning(&reasoning_trace(s, vocab, reason_len));
            record(s, Some(trace))
        })
        .collect();
    vec![
        SourceCorpus {
            name: "synthetic-binary".into(),
            kind: CorpusKind::BinaryOnly,
            records: binary,
        },
        SourceCorpus {
            name: "synthetic-reasoning".into(),
            kind: CorpusKind::ReasoningIntensive,
            records: reasoning,
        },
    ]
}

/// Anything rejection sampling can identify in its report.
pub trait Keyed {
    fn key(&self) -> &str;
}

impl Keyed for TrainingRecord {
    fn key(&self) -> &str {
        &self.id
    }
}

impl Keyed for DetectionSample {
    fn key(&self) -> &str {
        &self.id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordTally {
    pub id: String,
    pub correct: usize,
    pub trials: usize,
    /// Trials where the scorer failed; counted as incorrect.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub k: usize,
    pub kept: Vec<String>,
    pub discarded: Vec<String>,
    pub tallies: Vec<RecordTally>,
}

/// Scores every item `k` times and discards the ones solved in all `k`
/// trials. Each trial gets its own RNG stream keyed by item position and
/// trial index. A scorer error counts as an incorrect trial.
pub fn rejection_sample<T, F, E>(dataset: Vec<T>, scorer: F, k: usize, seed: u64) -> Result<(Vec<T>, RejectionReport)>
where
    T: Keyed + Sync,
    F: Fn(&T, &mut Rng) -> std::result::Result<bool, E> + Sync,
{
    if k == 0 {
        return Err(Error::invalid("rejection sampling needs k >= 1"));
    }
    let tallies: Vec<RecordTally> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut correct = 0;
            let mut failures = 0;
            for trial in 0..k {
                let mut rng = derive_rng(seed, &[stream::REJECT, i as u64, trial as u64]);
                match scorer(item, &mut rng) {
                    Ok(true) => correct += 1,
                    Ok(false) => {}
                    Err(_) => failures += 1,
                }
            }
            RecordTally {
                id: item.key().to_string(),
                correct,
                trials: k,
                failures,
            }
        })
        .collect();

    let mut kept_items = Vec::new();
    let mut kept = Vec::new();
    let mut discarded = Vec::new();
    for (item, tally) in dataset.into_iter().zip(&tallies) {
        if tally.correct == k {
            discarded.push(tally.id.clone());
        } else {
            kept.push(tally.id.clone());
            kept_items.push(item);
        }
    }
    Ok((
        kept_items,
        RejectionReport {
            k,
            kept,
            discarded,
            tallies,
        },
    ))
}

/// Scorer that samples one response from `policy` and checks its answer.
pub fn policy_scorer(policy: &PolicySnapshot, control: ModeControl) -> impl Fn(&DetectionSample, &mut Rng) -> Result<bool> + Sync + '_ {
    move |sample, rng| {
        let rollout = sample_rollout(policy.params(), sample, control, Decoding::Sample, rng)?;
        Ok(accuracy_reward(&rollout.response(), sample.gold) == 1)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}
