//! Prints one PASS/FAIL line per acceptance criterion and exits non-zero if
//! any fails. Run with `cargo test -p hybrid-cli --test acceptance`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use hybrid_core::data::{rejection_sample, Keyed};
use hybrid_core::eval::{compute_metrics, evaluate_policy, Prediction};
use hybrid_core::format::{parse_response, render_response, ResponseMode, ThinkMode};
use hybrid_core::hgrpo::{compute_advantages, StdMode};
use hybrid_core::pipeline::{run_experiment, Experiment, ExperimentConfig};
use hybrid_core::policy::{Decoding, ModeControl};
use hybrid_core::reward::{score_group, RewardWeights};
use hybrid_core::rng::{derive_rng, Rng};
use hybrid_core::{Label, QueryClass};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let lp = support::check_logprob_gradients(120, 101);
    let sft = support::check_sft_gradients(120, 102);
    let sur = support::check_surrogate_gradients(120, 103);
    let elapsed = start.elapsed();
    let straddle = [sur.below_lower, sur.inside_lower, sur.inside_upper, sur.above_upper];
    let detail = format!(
        "logprob {} worst {:.2e}, sft {} worst {:.2e}, surrogate {} worst {:.2e} (terms per clip band {:?}), {}",
        lp.instances,
        lp.worst,
        sft.instances,
        sft.worst,
        sur.instances,
        sur.worst,
        straddle,
        secs(elapsed)
    );
    let ok = [lp.worst, sft.worst, sur.worst].iter().all(|&w| w <= 1e-4)
        && straddle.iter().all(|&n| n > 0)
        && elapsed < Duration::from_secs(10);
    check(ok, detail)
}

fn advantages() -> Outcome {
    let start = Instant::now();
    let close = |a: &[f64], b: &[f64], tol: f64| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol);
    let pop = |r: &[f64]| compute_advantages(r, StdMode::Population).unwrap();
    let s = 0.205f64.sqrt();
    let examples = [
        close(&pop(&[1.0, 0.0, 1.0, 0.0]), &[1.0, -1.0, 1.0, -1.0], 0.0),
        close(&pop(&[0.9; 4]), &[0.0; 4], 0.0),
        close(&pop(&[1.0, 0.9, 0.1, 0.0]), &[0.5 / s, 0.4 / s, -0.4 / s, -0.5 / s], 1e-12)
            && close(&pop(&[1.0, 0.9, 0.1, 0.0]), &[1.1043, 0.8834, -0.8834, -1.1043], 1e-4),
    ];
    let mut rng = derive_rng(2, &[0]);
    let mut violations = 0;
    for _ in 0..10_000 {
        let g = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = pop(&rewards);
        let mean = a.iter().sum::<f64>() / g as f64;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        if mean.abs() > 1e-9 || (std - 1.0).abs() > 1e-6 {
            violations += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        examples.iter().all(|&b| b) && violations == 0 && elapsed < Duration::from_secs(5),
        format!("examples {examples:?}, 10000 random groups with {violations} violations, {}", secs(elapsed)),
    )
}

fn reward_oracle() -> Outcome {
    let weights = RewardWeights::default();
    let mut cells = 0;
    let mut mismatches = Vec::new();
    for gold in Label::ALL {
        for class in QueryClass::ALL {
            for shape in support::SHAPES {
                for answer in Label::ALL {
                    let text = support::render_shape(shape, answer);
                    let filler = support::render_shape(support::Shape::EmptyThink, answer.other());
                    let got = score_group(gold, class, &[parse_response(&text), parse_response(&filler)], &weights).unwrap();
                    let (acc, fmt, hyb, total) = support::oracle_reward(shape, answer, gold, class);
                    if (got[0].accuracy, got[0].format, got[0].hybrid, got[0].total) != (acc, fmt, hyb, total) {
                        mismatches.push(format!("{shape:?}/{answer:?}/{gold:?}/{class:?}"));
                    }
                    cells += 1;
                }
            }
        }
    }
    check(cells >= 48 && mismatches.is_empty(), format!("{cells} cells, mismatches {mismatches:?}"))
}

fn mode_emergence(run: &Experiment) -> Outcome {
    let hrl = &run.report.hrl;
    let simple = hrl.auto.simple_nonreasoning_rate.unwrap_or(0.0);
    let hard = hrl.auto.hard_reasoning_rate.unwrap_or(0.0);
    check(
        simple >= 0.9 && hard >= 0.9 && hrl.easy_accuracy >= 0.95 && hrl.hard_accuracy >= 0.85,
        format!(
            "simple non-reasoning {simple:.3}, hard reasoning {hard:.3}, easy acc {:.3}, hard acc {:.3}",
            hrl.easy_accuracy, hrl.hard_accuracy
        ),
    )
}

fn rl_gain(runs: &[(u64, f64, f64)]) -> Outcome {
    let ok = runs.iter().all(|(_, sft, hrl)| hrl - sft >= 0.05);
    let detail = runs
        .iter()
        .map(|(seed, sft, hrl)| format!("seed {seed}: {sft:.4} -> {hrl:.4} (+{:.4})", hrl - sft))
        .collect::<Vec<_>>()
        .join(", ");
    check(ok, detail)
}

struct Item {
    id: String,
    /// Trials this item is solved on, out of five.
    solved: usize,
    /// Per-trial solve probability for the stochastic half.
    p: f64,
}

impl Keyed for Item {
    fn key(&self) -> &str {
        &self.id
    }
}

fn constructed_items() -> Vec<Item> {
    let mut items = Vec::new();
    for solved in 0..=5 {
        for copy in 0..4 {
            items.push(Item { id: format!("exact-{solved}-{copy}"), solved, p: f64::NAN });
        }
    }
    for (i, p) in [0.0, 0.2, 0.5, 0.8, 0.95, 1.0].into_iter().cycle().take(60).enumerate() {
        items.push(Item { id: format!("prob-{i}"), solved: usize::MAX, p });
    }
    items
}

fn rejection() -> Outcome {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let run = |seed: u64| {
        let items = constructed_items();
        let trials: Vec<AtomicUsize> = items.iter().map(|_| AtomicUsize::new(0)).collect();
        let index: std::collections::HashMap<String, usize> =
            items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        let scorer = |item: &Item, rng: &mut Rng| -> Result<bool, ()> {
            if item.solved == usize::MAX {
                Ok(rng.random_bool(item.p))
            } else {
                Ok(trials[index[&item.id]].fetch_add(1, Ordering::SeqCst) < item.solved)
            }
        };
        rejection_sample(items, scorer, 5, seed).unwrap()
    };
    let (kept, report) = run(6);
    let (kept_again, report_again) = run(6);
    let kept_ids: BTreeSet<&str> = kept.iter().map(|i| i.id.as_str()).collect();
    let mut wrong = Vec::new();
    for item in constructed_items() {
        let tally = report.tallies.iter().find(|t| t.id == item.id).unwrap();
        let expect_discard = if item.solved == usize::MAX {
            tally.correct == 5
        } else {
            item.solved == 5
        };
        let forced = item.p == 1.0 || item.p == 0.0;
        if forced && (item.p == 1.0) != expect_discard {
            wrong.push(item.id.clone());
        }
        if kept_ids.contains(item.id.as_str()) == expect_discard {
            wrong.push(item.id.clone());
        }
    }
    let deterministic = report == report_again && kept.len() == kept_again.len();
    check(
        wrong.is_empty() && deterministic,
        format!(
            "{} kept, {} discarded, wrong {wrong:?}, deterministic {deterministic}",
            report.kept.len(),
            report.discarded.len()
        ),
    )
}

fn constant_length(run: &Experiment) -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for (name, snap) in [("sft", &run.sft), ("hrl", &run.hrl)] {
        let e = evaluate_policy(
            snap.params(),
            &run.heldout,
            ModeControl::Forced(ThinkMode::NonReasoning),
            Decoding::Sample,
            7,
        )
        .unwrap();
        let lengths: BTreeSet<usize> = e.rollouts.iter().map(|r| r.response().token_count).collect();
        ok &= e.result.constant_length_nonreasoning && lengths.len() == 1;
        details.push(format!("{name}: lengths {lengths:?} over {}", e.rollouts.len()));
    }
    check(ok, details.join(", "))
}

fn metrics() -> Outcome {
    let pred = |text: &str, gold| Prediction { response: parse_response(text), gold, query_class: QueryClass::SimpleBank };
    let worked = compute_metrics(&[
        pred("<think></think>fake", Label::Fake),
        pred("<think></think>real", Label::Fake),
        pred("<think></think>real", Label::Real),
        pred("<think></think>real", Label::Real),
    ])
    .unwrap();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let worked_ok = close(worked.fake_f1, 2.0 / 3.0)
        && close(worked.real_f1, 0.8)
        && close(worked.overall_acc, 0.75)
        && close(worked.overall_f1, (2.0 / 3.0 + 0.8) / 2.0);

    let mut rng = derive_rng(8, &[0]);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..50);
        let mut preds = Vec::new();
        let mut pairs = Vec::new();
        for _ in 0..n {
            let gold = if rng.random_bool(0.5) { Label::Fake } else { Label::Real };
            let (text, p) = match rng.random_range(0..6) {
                0 => ("fake and real", None),
                1 => ("<think></think>fake", Some(Label::Fake)),
                2 => ("<think></think>Real", Some(Label::Real)),
                3 => ("<think>\nr3 r1\n</think>\n\nfake.", Some(Label::Fake)),
                4 => ("<think>\nr2\n</think>real", Some(Label::Real)),
                _ => ("<think></think>unsure", None),
            };
            preds.push(Prediction { response: parse_response(text), gold, query_class: QueryClass::HardBank });
            pairs.push((p, gold));
        }
        let r = compute_metrics(&preds).unwrap();
        let c = support::oracle_confusion(&pairs);
        let (tp, fn_, tn, fp) = (c.tp_fake as f64, c.fn_fake as f64, c.tn_fake as f64, c.fp_fake as f64);
        let ok = r.confusion == c
            && close(r.fake_f1, support::f1(tp, fp, fn_))
            && close(r.real_f1, support::f1(tn, fn_, fp))
            && close(r.overall_acc, (tp + tn) / n as f64);
        if !ok {
            mismatches += 1;
        }
    }
    check(
        worked_ok && mismatches == 0,
        format!(
            "worked example fake F1 {:.4}, real F1 {:.4}, acc {:.4}; 1000 random comparisons with {mismatches} mismatches",
            worked.fake_f1, worked.real_f1, worked.overall_acc
        ),
    )
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let run = dir.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_hybrid"))
            .arg("--run-dir")
            .arg(&run)
            .args(["--seed", "1", "run"])
            .env_remove("HYBRID_RUN_DIR")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{name} run failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        outputs.push(std::fs::read(run.join("reports/metrics.json")).map_err(|e| e.to_string())?);
    }
    check(
        !outputs[0].is_empty() && outputs[0] == outputs[1],
        format!("two default runs with seed 1, metrics.json {} bytes, identical {}", outputs[0].len(), outputs[0] == outputs[1]),
    )
}

fn random_reasoning(rng: &mut Rng) -> String {
    const WORDS: [&str; 8] = ["r0", "r3", "edges", "<think>", "look", "odd", "\n", "light"];
    let n = rng.random_range(1..10);
    let mut s: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    s.insert(0, "step");
    s.join(" ")
}

fn random_string(rng: &mut Rng) -> String {
    const PIECES: [&str; 9] = ["<think>", "</think>", "<", ">", "/", "fake", "real", "\n", " "];
    let n = rng.random_range(0..16);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                PIECES[rng.random_range(0..PIECES.len())].to_string()
            } else {
                (0..rng.random_range(1..4)).map(|_| rng.random::<char>()).collect()
            }
        })
        .collect()
}

fn grammar() -> Outcome {
    let mut rng = derive_rng(10, &[0]);
    let mut broken = 0;
    for i in 0..10_000 {
        let mode = if i % 2 == 0 { ThinkMode::Reasoning } else { ThinkMode::NonReasoning };
        let answer = if rng.random_bool(0.5) { Label::Fake } else { Label::Real };
        let reasoning = random_reasoning(&mut rng);
        let text = render_response(mode, Some(&reasoning), answer.as_str()).unwrap();
        let parsed = parse_response(&text);
        if parsed.mode != ResponseMode::from(mode) || Label::from_answer(&parsed.answer) != Some(answer) {
            broken += 1;
        }
    }
    let mut panics = 0;
    let mut inconsistent = 0;
    for _ in 0..100_000 {
        let s = random_string(&mut rng);
        match catch_unwind(AssertUnwindSafe(|| parse_response(&s))) {
            Ok(r) => {
                if r.raw_text != s || (r.mode == ResponseMode::Malformed) != r.think.is_none() {
                    inconsistent += 1;
                }
            }
            Err(_) => panics += 1,
        }
    }
    check(
        broken == 0 && panics == 0 && inconsistent == 0,
        format!("10000 round-trips with {broken} failures; 100000 fuzz strings with {panics} panics, {inconsistent} inconsistent"),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let experiments: Vec<Result<Experiment, String>> = [1u64, 2, 3]
        .into_iter()
        .map(|seed| run_experiment(&ExperimentConfig::default().seeded(seed)).map_err(|e| e.to_string()))
        .collect();
    let first = || experiments[0].as_ref().map_err(|e| e.clone());

    let results: Vec<Outcome> = vec![
        guarded(gradients),
        guarded(advantages),
        guarded(reward_oracle),
        guarded(|| mode_emergence(first()?)),
        guarded(|| {
            let mut rows = Vec::new();
            for (seed, e) in [1u64, 2, 3].into_iter().zip(&experiments) {
                let e = e.as_ref().map_err(|e| e.clone())?;
                rows.push((seed, e.report.sft.expected_reward, e.report.hrl.expected_reward));
            }
            rl_gain(&rows)
        }),
        guarded(rejection),
        guarded(|| constant_length(first()?)),
        guarded(metrics),
        guarded(cli_determinism),
        guarded(grammar),
    ];

    let mut failed = 0;
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("criterion {}: PASS: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
