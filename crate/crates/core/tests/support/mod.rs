//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls the code under test to compute an expected value.

#![allow(dead_code)]

use hybrid_core::eval::Confusion;
use hybrid_core::format::ThinkMode;
use hybrid_core::hft::{sft_loss, SftTarget};
use hybrid_core::hgrpo::{build_group, surrogate_objective, GroupRecord, TrainConfig};
use hybrid_core::policy::{logprob, logprob_grad, PolicyDims, PolicyParams, PolicySnapshot, Token};
use hybrid_core::rng::{derive_rng, Rng};
use hybrid_core::task::{DetectionSample, SyntheticTask, TaskConfig};
use hybrid_core::data::SeedBank;
use hybrid_core::{Label, QueryClass};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

/// Central differences of `f` at `params`, one coordinate at a time.
pub fn central_difference<F>(params: &PolicyParams, mut f: F) -> Vec<f64>
where
    F: FnMut(&PolicyParams) -> f64,
{
    let mut p = params.clone();
    (0..params.values.len())
        .map(|i| {
            let x = p.values[i];
            p.values[i] = x + FD_STEP;
            let up = f(&p);
            p.values[i] = x - FD_STEP;
            let down = f(&p);
            p.values[i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn random_samples(seed: u64, n: usize) -> Vec<DetectionSample> {
    let task = SyntheticTask::new(seed, TaskConfig::default());
    task.generate(n, n, 0, &SeedBank::default())
}

pub fn random_tokens(dims: &PolicyDims, rng: &mut Rng) -> Vec<Token> {
    let mode = if rng.random_bool(0.5) { ThinkMode::Reasoning } else { ThinkMode::NonReasoning };
    let mut t = vec![Token::Mode(mode)];
    if mode == ThinkMode::Reasoning {
        t.extend((0..dims.reason_len).map(|_| Token::Reason(rng.random_range(0..dims.vocab) as u16)));
    }
    t.push(Token::Answer(if rng.random_bool(0.5) { Label::Fake } else { Label::Real }));
    t
}

pub struct GradCheck {
    pub instances: usize,
    pub worst: f64,
}

pub fn check_logprob_gradients(instances: usize, seed: u64) -> GradCheck {
    let dims = PolicyDims::default();
    let samples = random_samples(seed, 16);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = derive_rng(seed, &[1, k as u64]);
        let params = PolicyParams::random(dims, 1.0, &mut rng);
        let sample = &samples[rng.random_range(0..samples.len())];
        let tokens = random_tokens(&dims, &mut rng);
        let analytic = logprob_grad(&params, sample, &tokens).unwrap().values;
        let numeric = central_difference(&params, |p| logprob(p, sample, &tokens).unwrap());
        worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
    }
    GradCheck { instances, worst }
}

pub fn check_sft_gradients(instances: usize, seed: u64) -> GradCheck {
    let dims = PolicyDims::default();
    let samples = random_samples(seed, 16);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = derive_rng(seed, &[2, k as u64]);
        let params = PolicyParams::random(dims, 1.0, &mut rng);
        let sample = &samples[rng.random_range(0..samples.len())];
        let target = SftTarget::for_sample(sample, &dims);
        let (_, grad) = hybrid_core::hft::sft_loss_grad(&params, &target, sample).unwrap();
        let numeric = central_difference(&params, |p| sft_loss(p, &target, sample).unwrap());
        worst = worst.max(relative_error(&grad.values, &numeric, 1e-8));
    }
    GradCheck { instances, worst }
}

/// Where a term's ratio sits relative to the clip interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioBand {
    BelowLower,
    JustInsideLower,
    JustInsideUpper,
    AboveUpper,
    Interior,
}

pub fn band(ratio: f64, eps: f64) -> RatioBand {
    if ratio < 1.0 - eps {
        RatioBand::BelowLower
    } else if ratio < 1.0 - eps / 2.0 {
        RatioBand::JustInsideLower
    } else if ratio > 1.0 + eps {
        RatioBand::AboveUpper
    } else if ratio > 1.0 + eps / 2.0 {
        RatioBand::JustInsideUpper
    } else {
        RatioBand::Interior
    }
}

pub struct SurrogateCheck {
    pub instances: usize,
    pub worst: f64,
    /// Terms whose ratio sat on each side of each clip edge.
    pub below_lower: usize,
    pub inside_lower: usize,
    pub inside_upper: usize,
    pub above_upper: usize,
}

/// Builds a group from a behaviour policy, then moves the behaviour
/// log-probabilities so each term's ratio lands at a chosen offset from a
/// clip edge (at least 1e-3 away, so finite differences never cross it).
pub fn check_surrogate_gradients(instances: usize, seed: u64) -> SurrogateCheck {
    let dims = PolicyDims::default();
    let samples = random_samples(seed, 16);
    let mut out = SurrogateCheck {
        instances,
        worst: 0.0,
        below_lower: 0,
        inside_lower: 0,
        inside_upper: 0,
        above_upper: 0,
    };
    for k in 0..instances {
        let mut rng = derive_rng(seed, &[3, k as u64]);
        let config = TrainConfig {
            group_size: rng.random_range(2..=8),
            kl_beta: if k % 5 == 0 { 0.0 } else { rng.random_range(0.0..0.5) },
            clip_eps: rng.random_range(0.1..0.3),
            ..TrainConfig::default()
        };
        let theta = PolicyParams::random(dims, 1.0, &mut rng);
        let behaviour = PolicySnapshot::new(PolicyParams::random(dims, 1.0, &mut rng));
        let reference = PolicySnapshot::new(PolicyParams::random(dims, 1.0, &mut rng));
        let sample = &samples[rng.random_range(0..samples.len())];
        let mut group: GroupRecord = build_group(sample, &behaviour, &reference, &config, &mut rng).unwrap();
        // Spread advantages so both signs appear even when rewards tie.
        for a in group.advantages.iter_mut() {
            *a = rng.random_range(-2.0..2.0);
        }
        let eps = config.clip_eps;
        for (i, rollout) in group.rollouts.iter().enumerate() {
            let lp = logprob(&theta, sample, &rollout.tokens).unwrap();
            let offset = rng.random_range(1e-3..0.05);
            let target_ratio = match rng.random_range(0..4) {
                0 => 1.0 - eps - offset,
                1 => 1.0 - eps + offset,
                2 => 1.0 + eps - offset,
                _ => 1.0 + eps + offset,
            };
            match band(target_ratio, eps) {
                RatioBand::BelowLower => out.below_lower += 1,
                RatioBand::JustInsideLower => out.inside_lower += 1,
                RatioBand::JustInsideUpper => out.inside_upper += 1,
                RatioBand::AboveUpper => out.above_upper += 1,
                RatioBand::Interior => {}
            }
            group.old_logprobs[i] = lp - target_ratio.ln();
        }
        let (_, grad) = surrogate_objective(&theta, sample, &group, &config).unwrap();
        let numeric = central_difference(&theta, |p| surrogate_objective(p, sample, &group, &config).unwrap().0);
        out.worst = out.worst.max(relative_error(&grad.values, &numeric, 1e-8));
    }
    out
}

/// Reward for a response shape, written from the rules directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// `<think></think>` then an answer.
    EmptyThink,
    /// `<think>\n\n</think>` then an answer (whitespace-only think).
    BlankThink,
    /// A non-empty think segment then an answer.
    Reasoned,
    /// No tags at all.
    NoTags,
    /// An opening tag with no closing tag.
    Unclosed,
    /// Well-formed tags but an answer that is neither label.
    BadAnswer,
}

pub const SHAPES: [Shape; 6] = [
    Shape::EmptyThink,
    Shape::BlankThink,
    Shape::Reasoned,
    Shape::NoTags,
    Shape::Unclosed,
    Shape::BadAnswer,
];

pub fn render_shape(shape: Shape, answer: Label) -> String {
    let a = match answer {
        Label::Real => "real",
        Label::Fake => "fake",
    };
    match shape {
        Shape::EmptyThink => format!("<think></think>{a}"),
        Shape::BlankThink => format!("<think>\n\n</think>\n\n{a}"),
        Shape::Reasoned => format!("<think>\nedges look smooth\n</think>\n\n{a}"),
        Shape::NoTags => a.to_string(),
        Shape::Unclosed => format!("<think>\nhmm {a}"),
        Shape::BadAnswer => "<think></think>maybe".to_string(),
    }
}

/// `(acc, fmt, hyb, total)` straight from the rules. A tag-free answer
/// still earns accuracy; an unclosed tag leaves no recognizable answer.
pub fn oracle_reward(shape: Shape, answer: Label, gold: Label, class: QueryClass) -> (u8, u8, u8, f64) {
    let well_formed = !matches!(shape, Shape::NoTags | Shape::Unclosed);
    let answered = !matches!(shape, Shape::Unclosed | Shape::BadAnswer);
    let acc = u8::from(answered && answer == gold);
    let fmt = u8::from(well_formed);
    let reasoning = shape == Shape::Reasoned;
    let hyb = u8::from(match class {
        QueryClass::SimpleBank => well_formed && !reasoning,
        QueryClass::HardBank => well_formed && reasoning,
    });
    let total = 0.8 * acc as f64 + 0.1 * fmt as f64 + 0.1 * hyb as f64;
    (acc, fmt, hyb, total)
}

/// Confusion counts with fake as the positive class, from raw
/// (predicted, gold) pairs. Unparseable predictions are `None` and count
/// as the opposite of gold.
pub fn oracle_confusion(pairs: &[(Option<Label>, Label)]) -> Confusion {
    let mut c = Confusion::default();
    for (pred, gold) in pairs {
        let pred = pred.unwrap_or(match gold {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        });
        match (pred, gold) {
            (Label::Fake, Label::Fake) => c.tp_fake += 1,
            (Label::Real, Label::Fake) => c.fn_fake += 1,
            (Label::Real, Label::Real) => c.tn_fake += 1,
            (Label::Fake, Label::Real) => c.fp_fake += 1,
        }
    }
    c
}

pub fn f1(tp: f64, fp: f64, fn_: f64) -> f64 {
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}
