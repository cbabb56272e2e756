//! The pipeline stages behind each subcommand. Every stage reads its inputs
//! from files, writes its outputs under the run directory and leaves a
//! manifest next to its main output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hybrid_core::checkpoint::Checkpoint;
use hybrid_core::data::{policy_scorer, read_jsonl, rejection_sample, write_jsonl, TrainingRecord};
use hybrid_core::eval::{histogram_csv, markdown_table, EvalResult};
use hybrid_core::hft::{mode_agreement, run_hft, SftExample};
use hybrid_core::hgrpo::{HgrpoTrainer, StepTelemetry};
use hybrid_core::pipeline::{evaluate_checkpoint, prepare_data, CheckpointEval};
use hybrid_core::policy::ModeControl;
use hybrid_core::task::DetectionSample;
use serde::Serialize;

use crate::config::RunConfig;
use crate::failure::Failure;
use crate::manifest::Manifest;

/// Fixed run-directory layout.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub const SUBDIRS: [&'static str; 4] = ["data", "checkpoints", "telemetry", "reports"];

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn create(&self) -> Result<(), Failure> {
        for d in Self::SUBDIRS {
            std::fs::create_dir_all(self.root.join(d))?;
        }
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train(&self) -> PathBuf {
        self.data().join("train.jsonl")
    }
    pub fn heldout(&self) -> PathBuf {
        self.data().join("heldout.jsonl")
    }
    pub fn rl(&self) -> PathBuf {
        self.data().join("rl.jsonl")
    }
    pub fn sft(&self) -> PathBuf {
        self.root.join("checkpoints/sft.json")
    }
    pub fn hrl(&self) -> PathBuf {
        self.root.join("checkpoints/hrl.json")
    }
    pub fn telemetry(&self, name: &str) -> PathBuf {
        self.root.join("telemetry").join(name)
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn manifest_path_for(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    output.with_file_name(format!("{stem}.manifest.json"))
}

fn parent_dir(path: &Path) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{} does not exist", path.display())))
    }
}

fn load_checkpoint(path: &Path, config: &RunConfig) -> Result<Checkpoint, Failure> {
    require_file(path)?;
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config_hash != config.hash()? {
        eprintln!(
            "warning: {} was written under a different config; `report` will flag this run",
            path.display()
        );
    }
    Ok(ckpt)
}

fn read_samples(path: &Path) -> Result<Vec<DetectionSample>, Failure> {
    require_file(path)?;
    Ok(read_jsonl(path)?)
}

fn records_to_samples(records: &[TrainingRecord]) -> Result<Vec<DetectionSample>, Failure> {
    Ok(records.iter().map(|r| r.to_sample()).collect::<Result<_, _>>()?)
}

/// Writes `train.jsonl`, `heldout.jsonl` and `quarantine.jsonl` into `out`.
pub fn gen_data(config: &RunConfig, layout: &Layout, out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out)?;
    let train = out.join("train.jsonl");
    let heldout = out.join("heldout.jsonl");
    let quarantine = out.join("quarantine.jsonl");
    let prepared = prepare_data(&config.experiment(), &config.bank()?, &config.prompt()?);
    write_jsonl(&train, &prepared.records)?;
    write_jsonl(&heldout, &prepared.heldout)?;
    write_jsonl(&quarantine, &prepared.quarantine)?;
    let mut inputs: Vec<&Path> = Vec::new();
    inputs.extend(config.seed_bank.as_deref());
    inputs.extend(config.system_prompt.as_deref());
    Manifest::build("gen-data", config, &layout.root, &inputs, &[&train, &heldout, &quarantine])?
        .write(&out.join("gen-data.manifest.json"))?;
    eprintln!(
        "gen-data: {} training records, {} held-out samples, {} quarantined",
        prepared.records.len(),
        prepared.heldout.len(),
        prepared.quarantine.len()
    );
    Ok(())
}

/// Copies user-supplied datasets into the run directory.
pub fn import_data(config: &RunConfig, layout: &Layout, train: &Path, heldout: &Path) -> Result<(), Failure> {
    let records: Vec<TrainingRecord> = read_jsonl(train)?;
    let samples = read_samples(heldout)?;
    write_jsonl(&layout.train(), &records)?;
    write_jsonl(&layout.heldout(), &samples)?;
    Manifest::build(
        "gen-data",
        config,
        &layout.root,
        &[train, heldout],
        &[&layout.train(), &layout.heldout()],
    )?
    .write(&layout.data().join("gen-data.manifest.json"))
}

pub fn hft(config: &RunConfig, layout: &Layout, data: &Path, out: &Path) -> Result<(), Failure> {
    require_file(data)?;
    let records: Vec<TrainingRecord> = read_jsonl(data)?;
    if records.is_empty() {
        return Err(Failure::Empty(format!("{} has no training records; no checkpoint written", data.display())));
    }
    let dims = config.hft.policy;
    let examples: Vec<SftExample> = records
        .iter()
        .map(|r| SftExample::from_record(r, &dims))
        .collect::<Result<_, _>>()?;
    let outcome = run_hft(&examples, &config.hft)?;
    let agreement = mode_agreement(outcome.snapshot.params(), &examples)?;

    parent_dir(out)?;
    Checkpoint::new("hft", config.hash()?, outcome.snapshot.params().clone(), outcome.rng_state).save(out)?;
    let curve = layout.telemetry("hft_loss.csv");
    parent_dir(&curve)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.loss_curve.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    std::fs::write(&curve, csv)?;
    Manifest::build("hft", config, &layout.root, &[data], &[out, &curve])?.write(&manifest_path_for(out))?;
    eprintln!(
        "hft: loss {:.4} -> {:.4} over {} steps, mode agreement {:.3}",
        outcome.initial_mean_loss,
        outcome.final_mean_loss,
        outcome.loss_curve.len(),
        agreement
    );
    Ok(())
}

pub fn reject(config: &RunConfig, layout: &Layout, data: &Path, checkpoint: &Path, k: usize, out: &Path) -> Result<(), Failure> {
    require_file(data)?;
    let ckpt = load_checkpoint(checkpoint, config)?;
    let snapshot = ckpt.snapshot();
    let records: Vec<TrainingRecord> = read_jsonl(data)?;
    let samples = records_to_samples(&records)?;
    let scorer = policy_scorer(&snapshot, ModeControl::Auto);
    let (kept, report) = rejection_sample(samples, scorer, k, config.seed)?;
    let kept_ids: std::collections::BTreeSet<&str> = kept.iter().map(|s| s.id.as_str()).collect();
    let kept_records: Vec<&TrainingRecord> = records.iter().filter(|r| kept_ids.contains(r.id.as_str())).collect();

    parent_dir(out)?;
    write_jsonl(out, &kept_records)?;
    let report_path = layout.reports().join("rejection.json");
    parent_dir(&report_path)?;
    write_json(&report_path, &report)?;
    Manifest::build("reject", config, &layout.root, &[data, checkpoint], &[out, &report_path])?
        .write(&manifest_path_for(out))?;
    eprintln!("reject: kept {}, discarded {} (k = {k})", report.kept.len(), report.discarded.len());
    if kept_records.is_empty() {
        return Err(Failure::Empty(format!(
            "every record was solved in all {k} trials; {} is empty",
            out.display()
        )));
    }
    Ok(())
}

fn write_telemetry(path: &Path, log: &[StepTelemetry]) -> Result<(), Failure> {
    parent_dir(path)?;
    write_jsonl(path, log)?;
    Ok(())
}

pub fn hgrpo(config: &RunConfig, layout: &Layout, data: &Path, sft_checkpoint: &Path, out: &Path) -> Result<(), Failure> {
    require_file(data)?;
    let sft = load_checkpoint(sft_checkpoint, config)?;
    let records: Vec<TrainingRecord> = read_jsonl(data)?;
    if records.is_empty() {
        return Err(Failure::Empty(format!("{} has no records; no checkpoint written", data.display())));
    }
    let samples = records_to_samples(&records)?;
    let mut trainer = HgrpoTrainer::new(sft.snapshot(), config.train)?;
    let mut log = Vec::new();
    let telemetry = layout.telemetry("hgrpo.jsonl");
    parent_dir(out)?;
    let rng = match trainer.train(&samples, |t, _| log.push(t.clone())) {
        Ok(rng) => rng,
        Err(e) => {
            write_telemetry(&telemetry, &log)?;
            let failure = Failure::from(e);
            if let Failure::Numerical(msg) = failure {
                let partial = out.with_extension("partial.json");
                Checkpoint::new("hgrpo-partial", config.hash()?, trainer.params().clone(), sft.rng_state.clone()).save(&partial)?;
                return Err(Failure::Numerical(format!(
                    "{msg}; last good parameters after {} steps saved to {}",
                    trainer.steps_taken(),
                    partial.display()
                )));
            }
            return Err(failure);
        }
    };
    Checkpoint::new("hgrpo", config.hash()?, trainer.params().clone(), rng).save(out)?;
    write_telemetry(&telemetry, &log)?;
    Manifest::build("hgrpo", config, &layout.root, &[data, sft_checkpoint], &[out, &telemetry])?
        .write(&manifest_path_for(out))?;
    if let Some(last) = log.last() {
        eprintln!(
            "hgrpo: {} steps, final batch reward {:.4}, kl {:.4}",
            log.len(),
            last.mean_reward,
            last.kl
        );
    }
    Ok(())
}

fn checkpoint_name(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string()
}

/// Evaluates each checkpoint on the held-out split and writes
/// `metrics.json`, `table.md` and per-mode token-length histograms.
pub fn eval(config: &RunConfig, layout: &Layout, checkpoints: &[PathBuf], data: &Path, out: &Path) -> Result<(), Failure> {
    let heldout = read_samples(data)?;
    if heldout.is_empty() {
        return Err(Failure::Empty(format!("{} has no samples; nothing to evaluate", data.display())));
    }
    if checkpoints.is_empty() {
        return Err(Failure::Config("no checkpoints to evaluate".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut metrics: BTreeMap<String, CheckpointEval> = BTreeMap::new();
    let mut outputs = Vec::new();
    for path in checkpoints {
        let name = checkpoint_name(path);
        if metrics.contains_key(&name) {
            return Err(Failure::Config(format!("two checkpoints are both named {name}")));
        }
        let params = load_checkpoint(path, config)?.params;
        let m = evaluate_checkpoint(&params, &heldout, &config.train, config.seed)?;
        for (mode, result) in [("auto", &m.auto), ("reasoning", &m.forced_reasoning), ("noreasoning", &m.forced_nonreasoning)] {
            let csv = out.join(format!("lengths_{name}_{mode}.csv"));
            std::fs::write(&csv, histogram_csv(&result.token_lengths))?;
            outputs.push(csv);
        }
        metrics.insert(name, m);
    }

    let metrics_path = out.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    let table_path = out.join("table.md");
    std::fs::write(&table_path, table(&metrics))?;
    outputs.push(metrics_path);
    outputs.push(table_path);

    let mut inputs: Vec<&Path> = vec![data];
    inputs.extend(checkpoints.iter().map(PathBuf::as_path));
    let outputs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    Manifest::build("eval", config, &layout.root, &inputs, &outputs)?.write(&out.join("eval.manifest.json"))?;
    print!("{}", table(&metrics));
    Ok(())
}

fn table(metrics: &BTreeMap<String, CheckpointEval>) -> String {
    let rows: Vec<(String, &EvalResult)> = metrics
        .iter()
        .flat_map(|(name, m)| {
            [
                (format!("{name}_auto"), &m.auto),
                (format!("{name}_reasoning"), &m.forced_reasoning),
                (format!("{name}_noreasoning"), &m.forced_nonreasoning),
            ]
        })
        .collect();
    let mut out = markdown_table(&rows);
    out.push('\n');
    out.push_str("| Checkpoint | Easy Acc | Hard Acc | Simple non-reasoning rate | Hard reasoning rate | Expected reward |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    let rate = |r: Option<f64>| r.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"));
    for (name, m) in metrics {
        let _ = writeln!(
            out,
            "| {name} | {:.3} | {:.3} | {} | {} | {:.4} |",
            m.easy_accuracy,
            m.hard_accuracy,
            rate(m.auto.simple_nonreasoning_rate),
            rate(m.auto.hard_reasoning_rate),
            m.expected_reward
        );
    }
    out
}

/// Re-checks every manifest in the run directory and prints the report.
pub fn report(layout: &Layout) -> Result<(), Failure> {
    let mut manifests = Vec::new();
    for dir in Layout::SUBDIRS {
        let Ok(entries) = std::fs::read_dir(layout.root.join(dir)) else {
            continue;
        };
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_str().is_some_and(|s| s.ends_with(".manifest.json")))
            .collect();
        paths.sort();
        for p in paths {
            manifests.push((p.clone(), Manifest::read(&p)?));
        }
    }
    if manifests.is_empty() {
        return Err(Failure::Config(format!("no manifests under {}", layout.root.display())));
    }

    let mut problems: Vec<String> = manifests.iter().flat_map(|(_, m)| m.verify(&layout.root)).collect();
    if layout.config().is_file() {
        let current = RunConfig::load(&layout.config())?.hash()?;
        for (p, m) in &manifests {
            if m.config_hash != current {
                problems.push(format!("{} was produced under config {} but config.json hashes to {current}", p.display(), m.config_hash));
            }
        }
    } else {
        let first = &manifests[0].1.config_hash;
        for (p, m) in &manifests[1..] {
            if &m.config_hash != first {
                problems.push(format!("{} has config hash {} but {} has {first}", p.display(), m.config_hash, manifests[0].0.display()));
            }
        }
    }
    for ckpt_path in [layout.sft(), layout.hrl()] {
        if ckpt_path.is_file() {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            if let Some((_, m)) = manifests.iter().find(|(_, m)| m.outputs.keys().any(|k| layout.root.join(k) == ckpt_path)) {
                if ckpt.config_hash != m.config_hash {
                    problems.push(format!("{} carries config hash {} but its manifest records {}", ckpt_path.display(), ckpt.config_hash, m.config_hash));
                }
            }
        }
    }
    if !problems.is_empty() {
        return Err(Failure::Config(format!("manifest check failed:\n  {}", problems.join("\n  "))));
    }

    println!("run directory: {}", layout.root.display());
    for (p, m) in &manifests {
        println!("  {} ok: stage {}, seed {}, config {}", p.display(), m.stage, m.seed, &m.config_hash[..12]);
    }
    let table = layout.reports().join("table.md");
    if table.is_file() {
        println!();
        print!("{}", std::fs::read_to_string(table)?);
    }
    Ok(())
}
