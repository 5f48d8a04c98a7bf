//! Self-check batteries for the score functions, gradients, presets and the
//! logit-averaging theory.

use std::fmt;
use std::time::Instant;

use anyhow::Result;
use clap::ValueEnum;
use rand::Rng;

use integral_core::analysis::{
    draw_mean_logits, geometric_mean_identity, oversmoothing_demo, signal_average_sweep,
};
use integral_core::attention::{
    multi_head_attention, score_matrix, AttentionSettings, AttentionVars, ScoreVariant,
};
use integral_core::autodiff::Tape;
use integral_core::backbone::{layer_schedule, param_count, Model, ModelConfig, Placement};
use integral_core::tensor::{seeded_rng, Mask, Tensor};
use integral_core::training::model_grad_check;

pub const IDENTITY_INSTANCES: usize = 1000;
pub const MAX_SEQ: usize = 16;
pub const SUM_TOL: f64 = 1e-10;
pub const DEGENERACY_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;
pub const PRESET_TOL: f64 = 0.03;
pub const OVERSMOOTH_SAMPLES: usize = 100_000;
pub const SWEEP_SIGNALS: [usize; 4] = [1, 4, 16, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    AtMost,
    Equal,
    Above,
    Below,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::AtMost => "<=",
            Relation::Equal => "==",
            Relation::Above => ">",
            Relation::Below => "<",
        })
    }
}

/// One measured quantity against its threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub relation: Relation,
    pub passed: bool,
    pub secs: f64,
}

impl Check {
    pub fn new(name: impl Into<String>, measured: f64, relation: Relation, tolerance: f64) -> Self {
        let passed = match relation {
            Relation::AtMost => measured <= tolerance,
            Relation::Equal => measured == tolerance,
            Relation::Above => measured > tolerance,
            Relation::Below => measured < tolerance,
        };
        Check {
            name: name.into(),
            measured,
            tolerance,
            relation,
            passed,
            secs: 0.0,
        }
    }

    fn timed(mut self, started: Instant) -> Self {
        self.secs = started.elapsed().as_secs_f64();
        self
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<50} {:.3e} {} {:.3e}  ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.relation,
            self.tolerance,
            self.secs
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Identities,
    Grad,
    Params,
    Oversmooth,
    All,
}

pub fn run_scope(scope: Scope, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Identities | Scope::All) {
        out.extend(score_identities(IDENTITY_INSTANCES, seed)?);
        out.extend(degeneracies(IDENTITY_INSTANCES, seed)?);
    }
    if matches!(scope, Scope::Grad | Scope::All) {
        out.extend(gradient_checks()?);
    }
    if matches!(scope, Scope::Params | Scope::All) {
        out.extend(parameter_checks()?);
    }
    if matches!(scope, Scope::Oversmooth | Scope::All) {
        out.extend(theory_checks(seed)?);
    }
    Ok(out)
}

fn random_logits(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..n * n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![n, n], data).expect("n x n logits")
}

fn row_sum_gap(t: &Tensor, target: f64, abs: bool) -> f64 {
    (0..t.rows())
        .map(|r| {
            let s: f64 = t
                .row(r)
                .iter()
                .map(|v| if abs { v.abs() } else { *v })
                .sum();
            (s - target).abs()
        })
        .fold(0.0, f64::max)
}

fn masked_max(t: &Tensor, mask: &Mask) -> f64 {
    let n = t.rows();
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in 0..t.cols() {
            if !mask.allows(r, c) {
                worst = worst.max(t.get(r, c).abs());
            }
        }
    }
    worst
}

/// Row sums and causal zeros of every variant on random causal instances.
pub fn score_identities(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let started = Instant::now();
    let mut rng = seeded_rng(seed);
    let (mut vanilla, mut cog, mut diff, mut intg, mut masked) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let n = rng.random_range(1..=MAX_SEQ);
        let mask = Mask::causal(n);
        let z = random_logits(&mut rng, n, -6.0, 6.0);
        let z2 = random_logits(&mut rng, n, -6.0, 6.0);
        let lambda = rng.random_range(0.0..1.0);
        let s = rng.random_range(1..=8);
        let zs: Vec<Tensor> = (0..s)
            .map(|_| random_logits(&mut rng, n, -6.0, 6.0))
            .collect();

        let v = score_matrix(
            ScoreVariant::Vanilla,
            std::slice::from_ref(&z),
            0.0,
            Some(&mask),
        )?
        .values;
        let c = score_matrix(
            ScoreVariant::Cog,
            std::slice::from_ref(&z),
            0.0,
            Some(&mask),
        )?
        .values;
        let d = score_matrix(ScoreVariant::Diff, &[z, z2], lambda, Some(&mask))?.values;
        let i = score_matrix(ScoreVariant::intg(s), &zs, 0.0, Some(&mask))?.values;
        vanilla = vanilla.max(row_sum_gap(&v, 1.0, false));
        cog = cog.max(row_sum_gap(&c, 1.0, true));
        diff = diff.max(row_sum_gap(&d, 1.0 - lambda, false));
        intg = intg.max(row_sum_gap(&i, 1.0, false));
        for t in [&v, &c, &d, &i] {
            masked = masked.max(masked_max(t, &mask));
        }
    }
    Ok(vec![
        Check::new("vanilla rows sum to 1", vanilla, Relation::AtMost, SUM_TOL).timed(started),
        Check::new("cog absolute rows sum to 1", cog, Relation::AtMost, SUM_TOL).timed(started),
        Check::new(
            "diff rows sum to 1 - lambda",
            diff,
            Relation::AtMost,
            SUM_TOL,
        )
        .timed(started),
        Check::new("intg rows sum to 1", intg, Relation::AtMost, SUM_TOL).timed(started),
        Check::new("causal entries are exactly 0", masked, Relation::Equal, 0.0).timed(started),
    ])
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn attention_layer(
    variant: ScoreVariant,
    x: &Tensor,
    weights: &[Tensor; 4],
    n_heads: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let [wq, wk, wv, wo] = weights.clone().map(|w| tape.constant(w));
    let vars = AttentionVars {
        wq,
        wk,
        wv,
        wo,
        lambda: None,
    };
    let cfg = AttentionSettings {
        variant,
        n_heads,
        seq_len: x.rows(),
        rope_theta: Some(10_000.0),
        causal: true,
        diff_head_norm: None,
    };
    let out = multi_head_attention(&mut tape, xv, &vars, &cfg, None)?;
    Ok(tape.value(out).clone())
}

/// Variants that collapse to softmax attention under a degenerate setting.
///
/// Intg with one signal is compared as a whole attention layer on the same
/// weights. Diff with λ = 0 and Cog on nonnegative logits are compared on
/// the same logit matrices.
pub fn degeneracies(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let started = Instant::now();
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let (d_m, n_heads) = (8, 2);
    let (mut intg, mut diff, mut cog) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let n = rng.random_range(1..=MAX_SEQ);
        let x = Tensor::new(
            vec![n, d_m],
            (0..n * d_m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let weights: [Tensor; 4] = std::array::from_fn(|_| {
            Tensor::new(
                vec![d_m, d_m],
                (0..d_m * d_m)
                    .map(|_| rng.random_range(-0.8..0.8))
                    .collect(),
            )
            .expect("square weights")
        });
        let a = attention_layer(ScoreVariant::intg(1), &x, &weights, n_heads)?;
        let b = attention_layer(ScoreVariant::Vanilla, &x, &weights, n_heads)?;
        intg = intg.max(max_abs_diff(&a, &b));

        let mask = Mask::causal(n);
        let z = random_logits(&mut rng, n, -6.0, 6.0);
        let z2 = random_logits(&mut rng, n, -6.0, 6.0);
        let v = score_matrix(
            ScoreVariant::Vanilla,
            std::slice::from_ref(&z),
            0.0,
            Some(&mask),
        )?
        .values;
        let d = score_matrix(ScoreVariant::Diff, &[z, z2], 0.0, Some(&mask))?.values;
        diff = diff.max(max_abs_diff(&v, &d));

        let pos = random_logits(&mut rng, n, 0.0, 6.0);
        let v = score_matrix(
            ScoreVariant::Vanilla,
            std::slice::from_ref(&pos),
            0.0,
            Some(&mask),
        )?
        .values;
        let c = score_matrix(ScoreVariant::Cog, &[pos], 0.0, Some(&mask))?.values;
        cog = cog.max(max_abs_diff(&v, &c));
    }
    Ok(vec![
        Check::new(
            "intg(S=1) layer equals vanilla",
            intg,
            Relation::AtMost,
            DEGENERACY_TOL,
        )
        .timed(started),
        Check::new(
            "diff(lambda=0) equals vanilla",
            diff,
            Relation::AtMost,
            DEGENERACY_TOL,
        )
        .timed(started),
        Check::new(
            "cog on nonnegative logits equals vanilla",
            cog,
            Relation::AtMost,
            DEGENERACY_TOL,
        )
        .timed(started),
    ])
}

/// The toy model used for gradient checks: two layers, matrices widened to
/// std 0.5 so every gradient entry is well above the difference noise.
pub fn grad_check_model(variant: ScoreVariant) -> Result<Model> {
    let cfg = ModelConfig::with_dims(8, 2, 2, 12, 9, 8).with_schedule(vec![variant; 2]);
    let mut model = Model::init(cfg, 5)?;
    for (_, t) in model.params_mut() {
        if t.shape().len() == 2 {
            t.data_mut().iter_mut().for_each(|v| *v *= 25.0);
        }
    }
    Ok(model)
}

pub fn gradient_checks() -> Result<Vec<Check>> {
    let batch = vec![vec![1, 4, 7, 2, 8, 3], vec![1, 6, 6, 5, 0, 2]];
    [
        ScoreVariant::Vanilla,
        ScoreVariant::Cog,
        ScoreVariant::Diff,
        ScoreVariant::intg(2),
    ]
    .into_iter()
    .map(|variant| {
        let started = Instant::now();
        let model = grad_check_model(variant)?;
        let r = model_grad_check(&model, &batch, GRAD_STEP)?;
        Ok(Check::new(
            format!("{} gradients vs finite differences", variant.name()),
            r.max_rel_error,
            Relation::AtMost,
            GRAD_TOL,
        )
        .timed(started))
    })
    .collect()
}

/// Spread of `param_count` over every variant and partial-depth schedule.
pub fn parity_spread(base: &ModelConfig) -> Result<usize> {
    let mut counts = Vec::new();
    for variant in [
        ScoreVariant::Vanilla,
        ScoreVariant::Cog,
        ScoreVariant::Diff,
        ScoreVariant::intg(2),
        ScoreVariant::intg(4),
    ] {
        for ratio in [0.0, 0.5, 1.0] {
            for placement in [Placement::Top, Placement::Bottom] {
                let schedule = layer_schedule(base.n_layers, ratio, placement, variant)?;
                let cfg = base.clone().with_schedule(schedule);
                cfg.validate()?;
                counts.push(param_count(&cfg));
            }
        }
    }
    let max = counts.iter().max().copied().unwrap_or(0);
    let min = counts.iter().min().copied().unwrap_or(0);
    Ok(max - min)
}

pub fn parameter_checks() -> Result<Vec<Check>> {
    let started = Instant::now();
    let desk = parity_spread(&ModelConfig::desk(64))?;
    let m125 = parity_spread(&ModelConfig::preset_125m())?;
    let count = param_count(&ModelConfig::preset_125m());
    let rel = (count as f64 - 125e6).abs() / 125e6;
    Ok(vec![
        Check::new(
            "param parity across schedules (desk)",
            desk as f64,
            Relation::Equal,
            0.0,
        )
        .timed(started),
        Check::new(
            "param parity across schedules (125m)",
            m125 as f64,
            Relation::Equal,
            0.0,
        )
        .timed(started),
        Check::new(
            format!("125m preset size ({count} params) vs 125M"),
            rel,
            Relation::AtMost,
            PRESET_TOL,
        )
        .timed(started),
    ])
}

pub fn theory_checks(seed: u64) -> Result<Vec<Check>> {
    let started = Instant::now();
    let mut rng = seeded_rng(seed ^ 0x6e0);
    let mut geo = 0.0f64;
    for _ in 0..IDENTITY_INSTANCES {
        let s = rng.random_range(1..=8);
        let dim = rng.random_range(1..=MAX_SEQ);
        let signals: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..dim).map(|_| rng.random_range(-6.0..6.0)).collect())
            .collect();
        geo = geo.max(geometric_mean_identity(&signals)?);
    }
    let geo = Check::new("geometric-mean identity", geo, Relation::AtMost, SUM_TOL).timed(started);

    let started = Instant::now();
    let mean = draw_mean_logits(8, seed);
    let demo = oversmoothing_demo(&mean, 1.0, OVERSMOOTH_SAMPLES, seed)?;
    let smooth = Check::new(
        "post-softmax averaging entropy gain (vs 3 sigma)",
        demo.entropy_gap(),
        Relation::Above,
        3.0 * demo.entropy_mc_std,
    )
    .timed(started);

    let started = Instant::now();
    let clean = random_logits(&mut rng, 8, -3.0, 3.0);
    let sweep = signal_average_sweep(&clean, 1.0, &SWEEP_SIGNALS, seed..seed + 32)?;
    let at = |s: usize| {
        sweep
            .iter()
            .find(|(k, _)| *k == s)
            .map_or(f64::NAN, |(_, v)| *v)
    };
    let consistency = Check::new(
        "logit-average deviation at S=64 (vs S=1)",
        at(64),
        Relation::Below,
        at(1),
    )
    .timed(started);
    Ok(vec![geo, smooth, consistency])
}
