//! Attention-map analyses: [BOS] profiles, token-category shares, entropy,
//! negative-score fractions, effective rank, and the logit-averaging demos.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{LayerScores, Model};
use crate::data::{build_prompt, categorize_sequence, MCTask, TokenCategory, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, shannon_entropy, softmax, Tensor};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_RANK_TOL: f64 = 1e-6;
pub const DEFAULT_LAST_LAYERS: usize = 3;

/// Score matrices of one prompt, with the token metadata the metrics need.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub layers: Vec<LayerScores>,
    pub ids: Vec<usize>,
    pub categories: Vec<TokenCategory>,
    pub continuation: Range<usize>,
    pub causal: bool,
}

impl AttentionCapture {
    pub fn new(
        layers: Vec<LayerScores>,
        ids: Vec<usize>,
        categories: Vec<TokenCategory>,
        continuation: Range<usize>,
    ) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::data("capture has no tokens"));
        }
        if categories.len() != n {
            return Err(Error::data(format!(
                "{} categories for {n} tokens",
                categories.len()
            )));
        }
        if continuation.start > continuation.end || continuation.end > n {
            return Err(Error::data(format!(
                "continuation {continuation:?} outside a sequence of {n}"
            )));
        }
        let heads = layers.first().map_or(0, |l| l.heads.len());
        for (l, layer) in layers.iter().enumerate() {
            if layer.heads.len() != heads || heads == 0 {
                return Err(Error::data(format!(
                    "layer {l} has {} heads, expected {heads}",
                    layer.heads.len()
                )));
            }
            if layer.heads.iter().any(|m| m.shape() != [n, n]) {
                return Err(Error::data(format!(
                    "layer {l} has a score matrix that is not {n}×{n}"
                )));
            }
        }
        Ok(AttentionCapture {
            layers,
            ids,
            categories,
            continuation,
            causal: true,
        })
    }

    /// Run `model` on the gold-continuation prompt of `task` and keep every score matrix.
    pub fn record(model: &Model, vocab: &Vocabulary, task: &MCTask) -> Result<Self> {
        task.validate()?;
        let prompt = build_prompt(vocab, task, task.gold)?;
        let mut layers = Vec::new();
        model.forward_lm(&prompt.ids, Some(&mut layers))?;
        let categories = categorize_sequence(vocab, &prompt.ids);
        AttentionCapture::new(layers, prompt.ids, categories, prompt.continuation)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.heads.len())
    }

    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    fn permitted(&self, row: usize) -> usize {
        if self.causal {
            row + 1
        } else {
            self.seq_len()
        }
    }
}

/// Fixed-seed subset of at most `per_group` tasks from every task group, in input order.
pub fn select_samples(tasks: &[MCTask], per_group: usize, seed: u64) -> Vec<MCTask> {
    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == t.group()) {
            Some((_, v)) => v.push(i),
            None => groups.push((t.group(), vec![i])),
        }
    }
    let mut rng = seeded_rng(seed);
    let mut keep: Vec<usize> = groups
        .iter()
        .flat_map(|(_, idx)| {
            idx.choose_multiple(&mut rng, per_group)
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| tasks[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<Point>,
}

/// A metric as (mean, std) curves over layers or positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub metric: String,
    pub model_tag: String,
    /// Meaning of `Point::x`: "layer" (1-based) or "position".
    pub x_label: String,
    pub sample_count: usize,
    pub series: Vec<Series>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl AnalysisReport {
    pub fn new(metric: &str, x_label: &str, sample_count: usize) -> Self {
        AnalysisReport {
            schema_version: REPORT_SCHEMA_VERSION,
            metric: metric.to_string(),
            model_tag: String::new(),
            x_label: x_label.to_string(),
            sample_count,
            series: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.model_tag = tag.into();
        self
    }

    pub fn series(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.name == name)
    }

    /// Check the structural contract of a report.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "report schema {} is not {REPORT_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        for s in &self.series {
            if s.name.is_empty() || s.name.contains([',', '\n', '"']) {
                return Err(Error::Format(format!("bad series name {:?}", s.name)));
            }
            for p in &s.points {
                if !p.mean.is_finite() || !p.std.is_finite() || p.std < 0.0 {
                    return Err(Error::Format(format!(
                        "series {} at {} has mean {} std {}",
                        s.name, p.x, p.mean, p.std
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn point(x: usize, values: &[f64]) -> Point {
    let (mean, std) = mean_std(values);
    Point { x, mean, std }
}

fn check_captures(captures: &[AttentionCapture]) -> Result<(usize, usize)> {
    let first = captures
        .first()
        .ok_or_else(|| Error::data("no attention captures to analyze"))?;
    let (l, h) = (first.n_layers(), first.n_heads());
    if l == 0 {
        return Err(Error::data("capture has no layers"));
    }
    if let Some(c) = captures
        .iter()
        .find(|c| c.n_layers() != l || c.n_heads() != h)
    {
        return Err(Error::data(format!(
            "captures disagree on shape: {l}×{h} vs {}×{}",
            c.n_layers(),
            c.n_heads()
        )));
    }
    Ok((l, h))
}

fn check_layer(layers: usize, layer: usize) -> Result<()> {
    if layer == 0 || layer > layers {
        return Err(Error::config(format!(
            "layer {layer} is not in 1..={layers}"
        )));
    }
    Ok(())
}

/// Attention to position 0 from every source position `i ≥ 1` of `layer`
/// (1-based), pooled over heads and samples.
pub fn bos_profile(captures: &[AttentionCapture], layer: usize) -> Result<AnalysisReport> {
    let (layers, _) = check_captures(captures)?;
    check_layer(layers, layer)?;
    let n_max = captures.iter().map(|c| c.seq_len()).max().unwrap_or(0);
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); n_max];
    for c in captures {
        for phi in &c.layers[layer - 1].heads {
            for (i, bucket) in pooled.iter_mut().enumerate().take(c.seq_len()).skip(1) {
                bucket.push(phi.get(i, 0));
            }
        }
    }
    let points = pooled
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, v)| !v.is_empty())
        .map(|(i, v)| point(i, v))
        .collect();
    let mut report = AnalysisReport::new("bos_profile", "position", captures.len());
    report.series.push(Series {
        name: format!("layer{layer}"),
        points,
    });
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShareNormalization {
    /// Divide by the total so the shares sum to one.
    #[default]
    Linear,
    Softmax,
}

/// Per-head category masses of one capture and layer: the mean over
/// continuation rows of the score mass landing on each category.
fn head_category_mass(c: &AttentionCapture, phi: &Tensor) -> [f64; 4] {
    let mut mass = [0.0; 4];
    let n = c.seq_len();
    for i in c.continuation.clone() {
        let row = &phi.data()[i * n..(i + 1) * n];
        for (j, &v) in row.iter().enumerate() {
            mass[c.categories[j].index()] += v;
        }
    }
    let len = c.continuation.len() as f64;
    mass.map(|m| m / len)
}

fn normalize_shares(raw: [f64; 4], how: ShareNormalization) -> Result<[f64; 4]> {
    match how {
        ShareNormalization::Linear => {
            let total: f64 = raw.iter().sum();
            if total.abs() < 1e-12 {
                return Err(Error::Numerical(
                    "category masses sum to zero and cannot be normalized".into(),
                ));
            }
            Ok(raw.map(|v| v / total))
        }
        ShareNormalization::Softmax => Ok(softmax(&raw).try_into().unwrap()),
    }
}

/// Share of continuation-token attention given to each token category, per layer.
pub fn category_distribution(
    captures: &[AttentionCapture],
    how: ShareNormalization,
) -> Result<AnalysisReport> {
    let (layers, heads) = check_captures(captures)?;
    if let Some(c) = captures.iter().find(|c| c.continuation.is_empty()) {
        return Err(Error::data(format!(
            "capture of {} tokens has an empty continuation span",
            c.seq_len()
        )));
    }
    let mut series: Vec<Series> = TokenCategory::ALL
        .iter()
        .map(|c| Series {
            name: c.name().to_string(),
            points: Vec::new(),
        })
        .collect();
    for l in 0..layers {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut acc = [0.0; 4];
            for c in captures {
                let m = head_category_mass(c, &c.layers[l].heads[h]);
                for k in 0..4 {
                    acc[k] += m[k];
                }
            }
            let mean = acc.map(|v| v / captures.len() as f64);
            per_head.push(normalize_shares(mean, how)?);
        }
        for (k, s) in series.iter_mut().enumerate() {
            let vals: Vec<f64> = per_head.iter().map(|sh| sh[k]).collect();
            s.points.push(point(l + 1, &vals));
        }
    }
    let mut report = AnalysisReport::new("categories", "layer", captures.len());
    report.series = series;
    if how == ShareNormalization::Softmax {
        report
            .notes
            .push("softmax normalization across categories".into());
    }
    Ok(report)
}

/// Entropy of a score row after shifting by its minimum and dividing by the sum.
///
/// Returns `(entropy, degenerate)`; an all-equal row has no mass after the
/// shift and gets `ln(len)`.
pub fn shifted_entropy(row: &[f64]) -> (f64, bool) {
    if row.is_empty() {
        return (0.0, true);
    }
    let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = row.iter().map(|v| v - min).collect();
    let total: f64 = shifted.iter().sum();
    if !(total > 0.0) {
        return ((row.len() as f64).ln(), true);
    }
    let p: Vec<f64> = shifted.iter().map(|v| v / total).collect();
    (shannon_entropy(&p), false)
}

/// Entropy of the last continuation token's score row, per layer.
pub fn attention_entropy(captures: &[AttentionCapture]) -> Result<AnalysisReport> {
    let (layers, _) = check_captures(captures)?;
    let mut degenerate = 0usize;
    let mut series = Series {
        name: "entropy".into(),
        points: Vec::with_capacity(layers),
    };
    for l in 0..layers {
        let mut per_sample = Vec::with_capacity(captures.len());
        for c in captures {
            if c.continuation.is_empty() {
                return Err(Error::data("capture has an empty continuation span"));
            }
            let r = c.continuation.end - 1;
            let n = c.seq_len();
            let width = c.permitted(r);
            let mut sum = 0.0;
            for phi in &c.layers[l].heads {
                let (e, flag) = shifted_entropy(&phi.data()[r * n..r * n + width]);
                degenerate += flag as usize;
                sum += e;
            }
            per_sample.push(sum / c.n_heads() as f64);
        }
        series.points.push(point(l + 1, &per_sample));
    }
    let mut report = AnalysisReport::new("entropy", "layer", captures.len());
    report.series.push(series);
    if degenerate > 0 {
        report
            .notes
            .push(format!("{degenerate} degenerate rows scored as uniform"));
    }
    Ok(report)
}

/// Percentage of heads whose score from token `i ≥ 1` to position 0 is negative, per layer.
pub fn negative_fraction_bos(captures: &[AttentionCapture]) -> Result<AnalysisReport> {
    let (layers, heads) = check_captures(captures)?;
    let mut series = Series {
        name: "negative_bos".into(),
        points: Vec::with_capacity(layers),
    };
    for l in 0..layers {
        let mut per_sample = Vec::with_capacity(captures.len());
        for c in captures {
            let n = c.seq_len();
            if n < 2 {
                continue;
            }
            let mut total = 0.0;
            for i in 1..n {
                let neg = c.layers[l]
                    .heads
                    .iter()
                    .filter(|phi| phi.get(i, 0) < 0.0)
                    .count();
                total += neg as f64 / heads as f64;
            }
            per_sample.push(100.0 * total / (n - 1) as f64);
        }
        if per_sample.is_empty() {
            return Err(Error::data("every capture is shorter than two tokens"));
        }
        series.points.push(point(l + 1, &per_sample));
    }
    let mut report = AnalysisReport::new("neg_fraction", "layer", captures.len());
    report.series.push(series);
    Ok(report)
}

/// Singular values by one-sided Jacobi rotations, largest first.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = a.ensure_matrix("singular_values")?;
    if !a.all_finite() {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    // Work on the orientation with at least as many rows as columns.
    let (rows, cols, mut w) = if m >= n {
        (m, n, a.transpose().into_data())
    } else {
        (n, m, a.data().to_vec())
    };
    // `w` holds the working columns contiguously: column j is w[j*rows..].
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (cp, cq) = {
                    let (lo, hi) = w.split_at_mut(q * rows);
                    (&mut lo[p * rows..(p + 1) * rows], &mut hi[..rows])
                };
                let alpha: f64 = cp.iter().map(|v| v * v).sum();
                let beta: f64 = cq.iter().map(|v| v * v).sum();
                let gamma: f64 = cp.iter().zip(cq.iter()).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|j| {
            w[j * rows..(j + 1) * rows]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

/// Number of singular values above `rel_tol` times the largest.
pub fn effective_rank(phi: &Tensor, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0) {
        return Err(Error::config(format!(
            "rank tolerance must be positive, got {rel_tol}"
        )));
    }
    let sv = singular_values(phi)?;
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * top).count())
}

/// `exp` of the entropy of the normalized singular-value spectrum.
pub fn entropy_effective_rank(phi: &Tensor) -> Result<f64> {
    let sv = singular_values(phi)?;
    let total: f64 = sv.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let p: Vec<f64> = sv.iter().map(|s| s / total).collect();
    Ok(shannon_entropy(&p).exp())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median effective rank across the heads of one layer.
pub fn median_head_rank(layer: &LayerScores, rel_tol: f64) -> Result<f64> {
    let mut ranks = layer
        .heads
        .iter()
        .map(|phi| effective_rank(phi, rel_tol).map(|r| r as f64))
        .collect::<Result<Vec<_>>>()?;
    if ranks.is_empty() {
        return Err(Error::data("layer has no heads"));
    }
    Ok(median(&mut ranks))
}

/// Median-across-heads effective rank per layer, mean and std over samples.
pub fn rank_profile(captures: &[AttentionCapture], rel_tol: f64) -> Result<AnalysisReport> {
    let (layers, _) = check_captures(captures)?;
    let mut series = Series {
        name: "median_rank".into(),
        points: Vec::with_capacity(layers),
    };
    for l in 0..layers {
        let per_sample = captures
            .iter()
            .map(|c| median_head_rank(&c.layers[l], rel_tol))
            .collect::<Result<Vec<_>>>()?;
        series.points.push(point(l + 1, &per_sample));
    }
    let mut report = AnalysisReport::new("rank", "layer", captures.len());
    report.series.push(series);
    Ok(report)
}

/// Percentage of samples where model A's median head rank strictly exceeds
/// model B's, for each of the last `last_k` layers.
pub fn rank_compare(
    a: &[AttentionCapture],
    b: &[AttentionCapture],
    last_k: usize,
    rel_tol: f64,
) -> Result<AnalysisReport> {
    let (la, _) = check_captures(a)?;
    let (lb, _) = check_captures(b)?;
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "sample mismatch: {} captures vs {}",
            a.len(),
            b.len()
        )));
    }
    if let Some(i) = (0..a.len()).find(|&i| a[i].ids != b[i].ids) {
        return Err(Error::data(format!(
            "sample {i} differs between the two captures"
        )));
    }
    let k = last_k.min(la).min(lb);
    if k == 0 {
        return Err(Error::config("rank comparison needs at least one layer"));
    }
    let mut series = Series {
        name: "a_exceeds_b".into(),
        points: Vec::with_capacity(k),
    };
    for back in 1..=k {
        let wins = a
            .iter()
            .zip(b)
            .map(|(ca, cb)| {
                let ra = median_head_rank(&ca.layers[la - back], rel_tol)?;
                let rb = median_head_rank(&cb.layers[lb - back], rel_tol)?;
                Ok(if ra > rb { 100.0 } else { 0.0 })
            })
            .collect::<Result<Vec<f64>>>()?;
        series.points.push(point(la + 1 - back, &wins));
    }
    let mut report = AnalysisReport::new("rank_compare", "layer", a.len());
    report.series.push(series);
    Ok(report)
}

/// Monte Carlo comparison of `E[softmax(z)]` with `softmax(E[z])` for Gaussian `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OversmoothingReport {
    pub mean_logits: Vec<f64>,
    pub std: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub mc_estimate: Vec<f64>,
    pub entropy_mc: f64,
    pub entropy_softmax_mean: f64,
    /// Bootstrap standard error of `entropy_mc`.
    pub entropy_mc_std: f64,
    /// Temperature `T` for which `softmax(E[z] / T)` is closest to the estimate.
    pub fitted_temperature: f64,
    /// `sqrt(T² − 1)`, or 0 when `T ≤ 1`.
    pub sigma_eff: f64,
}

impl OversmoothingReport {
    pub fn entropy_gap(&self) -> f64 {
        self.entropy_mc - self.entropy_softmax_mean
    }

    /// True when the entropy gain exceeds three bootstrap standard errors.
    pub fn significant(&self) -> bool {
        self.entropy_gap() > 3.0 * self.entropy_mc_std
    }
}

pub const BOOTSTRAP_ROUNDS: usize = 100;

/// Mean logits for the oversmoothing demo, drawn from a standard normal.
pub fn draw_mean_logits(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn fit_temperature(target: &[f64], mean: &[f64]) -> f64 {
    let loss = |log_t: f64| {
        let t = log_t.exp();
        let scaled: Vec<f64> = mean.iter().map(|v| v / t).collect();
        kl(target, &softmax(&scaled))
    };
    let (mut lo, mut hi) = ((0.05f64).ln(), (100.0f64).ln());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (loss(c), loss(d));
    for _ in 0..200 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = loss(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = loss(d);
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    (0.5 * (lo + hi)).exp()
}

pub fn oversmoothing_demo(
    mean_logits: &[f64],
    std: f64,
    n_samples: usize,
    seed: u64,
) -> Result<OversmoothingReport> {
    if n_samples == 0 || mean_logits.is_empty() {
        return Err(Error::config(
            "oversmoothing demo needs samples and a non-empty mean",
        ));
    }
    if !(std >= 0.0) {
        return Err(Error::config(format!(
            "noise std must be non-negative, got {std}"
        )));
    }
    let dim = mean_logits.len();
    let base = softmax(mean_logits);
    let entropy_softmax_mean = shannon_entropy(&base);
    if std == 0.0 {
        // A point mass: every draw is the mean itself.
        return Ok(OversmoothingReport {
            mean_logits: mean_logits.to_vec(),
            std,
            n_samples,
            seed,
            mc_estimate: base.clone(),
            entropy_mc: entropy_softmax_mean,
            entropy_softmax_mean,
            entropy_mc_std: 0.0,
            fitted_temperature: 1.0,
            sigma_eff: 0.0,
        });
    }
    let mut rng = seeded_rng(seed);
    let mut draws = Vec::with_capacity(n_samples * dim);
    let mut z = vec![0.0; dim];
    for _ in 0..n_samples {
        for (zi, m) in z.iter_mut().zip(mean_logits) {
            *zi = m + std * rng.sample::<f64, _>(StandardNormal);
        }
        draws.extend(softmax(&z));
    }
    let average = |pick: &mut dyn FnMut() -> usize| {
        let mut acc = vec![0.0; dim];
        for _ in 0..n_samples {
            let s = pick();
            for (a, v) in acc.iter_mut().zip(&draws[s * dim..(s + 1) * dim]) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n_samples as f64);
        acc
    };
    let mut next = 0usize;
    let mc_estimate = average(&mut || {
        next += 1;
        next - 1
    });
    let entropy_mc = shannon_entropy(&mc_estimate);
    let boot: Vec<f64> = (0..BOOTSTRAP_ROUNDS)
        .map(|_| shannon_entropy(&average(&mut || rng.random_range(0..n_samples))))
        .collect();
    let (_, entropy_mc_std) = mean_std(&boot);
    let t = fit_temperature(&mc_estimate, mean_logits);
    Ok(OversmoothingReport {
        mean_logits: mean_logits.to_vec(),
        std,
        n_samples,
        seed,
        mc_estimate,
        entropy_mc,
        entropy_softmax_mean,
        entropy_mc_std,
        fitted_temperature: t,
        sigma_eff: if t > 1.0 { (t * t - 1.0).sqrt() } else { 0.0 },
    })
}

/// Largest entry-wise gap between `softmax(mean_s(Z + ε_s))` and `softmax(Z)`
/// over `S` zero-mean Gaussian perturbations.
pub fn signal_average_consistency(
    clean: &Tensor,
    noise_std: f64,
    signals: usize,
    seed: u64,
) -> Result<f64> {
    let (rows, cols) = clean.ensure_matrix("signal_average_consistency")?;
    if signals == 0 {
        return Err(Error::config("at least one signal is required"));
    }
    let mut rng = seeded_rng(seed);
    let mut noise = vec![0.0; rows * cols];
    for _ in 0..signals {
        for e in noise.iter_mut() {
            *e += noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut worst = 0.0f64;
    for r in 0..rows {
        let z = &clean.data()[r * cols..(r + 1) * cols];
        let avg: Vec<f64> = z
            .iter()
            .zip(&noise[r * cols..(r + 1) * cols])
            .map(|(v, e)| v + e / signals as f64)
            .collect();
        let (p, q) = (softmax(&avg), softmax(z));
        for (a, b) in p.iter().zip(&q) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Mean deviation over a family of seeds, for each signal count.
pub fn signal_average_sweep(
    clean: &Tensor,
    noise_std: f64,
    signal_counts: &[usize],
    seeds: Range<u64>,
) -> Result<Vec<(usize, f64)>> {
    let n = seeds.end.saturating_sub(seeds.start);
    if n == 0 {
        return Err(Error::config("empty seed family"));
    }
    signal_counts
        .iter()
        .map(|&s| {
            let total = seeds
                .clone()
                .map(|seed| signal_average_consistency(clean, noise_std, s, seed))
                .sum::<Result<f64>>()?;
            Ok((s, total / n as f64))
        })
        .collect()
}

/// Largest gap between `softmax(mean_s z_s)` and the renormalized geometric
/// mean of the per-signal softmax vectors.
pub fn geometric_mean_identity(signals: &[Vec<f64>]) -> Result<f64> {
    let first = signals
        .first()
        .ok_or_else(|| Error::config("at least one signal is required"))?;
    let dim = first.len();
    if dim == 0 || signals.iter().any(|s| s.len() != dim) {
        return Err(Error::config(
            "signals must be non-empty and of equal length",
        ));
    }
    let s = signals.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|i| signals.iter().map(|z| z[i]).sum::<f64>() / s)
        .collect();
    let lhs = softmax(&mean);
    let probs: Vec<Vec<f64>> = signals.iter().map(|z| softmax(z)).collect();
    let geo: Vec<f64> = (0..dim)
        .map(|i| probs.iter().map(|p| p[i].powf(1.0 / s)).product())
        .collect();
    let total: f64 = geo.iter().sum();
    Ok(lhs
        .iter()
        .zip(&geo)
        .map(|(a, g)| (a - g / total).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Svg,
    Json,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Svg => "svg",
            ExportFormat::Json => "json",
        }
    }
}

/// One row per point: `{x_label},series,mean,std`.
pub fn to_csv(report: &AnalysisReport) -> String {
    let label = if report.x_label.is_empty() {
        "layer"
    } else {
        &report.x_label
    };
    let mut out = format!("{label},series,mean,std\n");
    for s in &report.series {
        for p in &s.points {
            let _ = writeln!(out, "{},{},{},{}", p.x, s.name, p.mean, p.std);
        }
    }
    out
}

/// Rows of a report CSV as `(x, series, mean, std)`.
pub fn parse_csv(text: &str) -> Result<Vec<(usize, String, f64, f64)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() != 4 || cols[1..] != ["series", "mean", "std"] {
        return Err(Error::Format(format!("unexpected CSV header {header:?}")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("CSV line {}: {line:?}", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].to_string(),
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Line chart of every series with a shaded ±1 std band.
pub fn to_svg(report: &AnalysisReport) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let points: Vec<&Point> = report.series.iter().flat_map(|s| &s.points).collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        (left + w - right) / 2.0,
        escape_xml(format!("{} {}", report.metric, report.model_tag).trim())
    );
    if points.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let xmin = points.iter().map(|p| p.x).min().unwrap() as f64;
    let mut xmax = points.iter().map(|p| p.x).max().unwrap() as f64;
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    let mut ymin = points
        .iter()
        .map(|p| p.mean - p.std)
        .fold(f64::INFINITY, f64::min);
    let mut ymax = points
        .iter()
        .map(|p| p.mean + p.std)
        .fold(f64::NEG_INFINITY, f64::max);
    if ymax - ymin < 1e-12 {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let pad = 0.05 * (ymax - ymin);
    let (ymin, ymax) = (ymin - pad, ymax + pad);
    let px = |x: f64| left + (x - xmin) / (xmax - xmin) * (w - left - right);
    let py = |y: f64| h - bottom - (y - ymin) / (ymax - ymin) * (h - top - bottom);
    let _ = writeln!(
        svg,
        "<g stroke=\"black\" stroke-width=\"1\"><line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\"/><line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\"/></g>",
        h - bottom,
        w - right,
        h - bottom,
        h - bottom
    );
    for i in 0..=4 {
        let y = ymin + (ymax - ymin) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>",
            left - 6.0,
            py(y) + 4.0,
            y
        );
    }
    let step = ((xmax - xmin) / 8.0).ceil().max(1.0) as usize;
    let mut x = xmin as usize;
    while x as f64 <= xmax {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{x}</text>",
            px(x as f64),
            h - bottom + 16.0
        );
        x += step;
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        (left + w - right) / 2.0,
        h - 12.0,
        escape_xml(&report.x_label)
    );
    for (k, s) in report.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if s.points.is_empty() {
            continue;
        }
        let upper = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.x as f64), py(p.mean + p.std)));
        let lower = s
            .points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", px(p.x as f64), py(p.mean - p.std)));
        let band: Vec<String> = upper.chain(lower).collect();
        let line: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.x as f64), py(p.mean)))
            .collect();
        let _ = writeln!(
            svg,
            "<polygon class=\"band\" points=\"{}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>",
            band.join(" ")
        );
        let _ = writeln!(
            svg,
            "<polyline class=\"mean\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            line.join(" ")
        );
        let ly = top + 18.0 * k as f64;
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            w - right + 12.0,
            ly,
            w - right + 30.0,
            ly + 10.0,
            escape_xml(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn to_json(report: &AnalysisReport) -> String {
    serde_json::to_string_pretty(report).expect("reports serialize")
}

pub fn from_json(text: &str) -> Result<AnalysisReport> {
    let r: AnalysisReport =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report JSON: {e}")))?;
    r.validate()?;
    Ok(r)
}

pub fn export(report: &AnalysisReport, format: ExportFormat, path: &Path) -> Result<()> {
    report.validate()?;
    let body = match format {
        ExportFormat::Csv => to_csv(report),
        ExportFormat::Svg => to_svg(report),
        ExportFormat::Json => to_json(report),
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ScoreVariant;
    use crate::tensor::Mask;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn layer(variant: ScoreVariant, heads: Vec<Tensor>) -> LayerScores {
        LayerScores { variant, heads }
    }

    fn random_causal_rows(n: usize, rng: &mut impl Rng, signed: bool) -> Tensor {
        let mask = Mask::causal(n);
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let row: Vec<f64> = (0..=i).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = softmax(&row);
            for j in 0..=i {
                let s = if signed && rng.random_bool(0.3) {
                    -1.0
                } else {
                    1.0
                };
                data[i * n + j] = s * p[j];
            }
            assert!(mask.allows(i, i));
        }
        Tensor::new(vec![n, n], data).unwrap()
    }

    fn toy_capture(
        seed: u64,
        n: usize,
        layers: usize,
        heads: usize,
        signed: bool,
    ) -> AttentionCapture {
        let mut rng = seeded_rng(seed);
        let ls = (0..layers)
            .map(|_| {
                layer(
                    ScoreVariant::Vanilla,
                    (0..heads)
                        .map(|_| random_causal_rows(n, &mut rng, signed))
                        .collect(),
                )
            })
            .collect();
        let cats = (0..n)
            .map(|i| {
                if i == 0 {
                    TokenCategory::SpecialPunct
                } else {
                    TokenCategory::ALL[rng.random_range(0..4)]
                }
            })
            .collect();
        AttentionCapture::new(ls, (0..n).collect(), cats, n / 2..n).unwrap()
    }

    #[test]
    fn bos_profile_single_observation() {
        let phi = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.7, 0.3]).unwrap();
        let c = AttentionCapture::new(
            vec![layer(ScoreVariant::Vanilla, vec![phi])],
            vec![1, 7],
            vec![TokenCategory::SpecialPunct, TokenCategory::Content],
            1..2,
        )
        .unwrap();
        let r = bos_profile(&[c], 1).unwrap();
        let p = r.series[0].points[0];
        assert_eq!((p.x, p.mean, p.std), (1, 0.7, 0.0));
        assert!(bos_profile(&[], 1).is_err());
    }

    #[test]
    fn bos_profile_matches_brute_force() {
        let caps: Vec<_> = (0..3).map(|s| toy_capture(s, 6, 2, 3, true)).collect();
        let r = bos_profile(&caps, 2).unwrap();
        for p in &r.series[0].points {
            let vals: Vec<f64> = caps
                .iter()
                .flat_map(|c| c.layers[1].heads.iter().map(|m| m.get(p.x, 0)))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert_relative_eq!(p.mean, m, epsilon = 1e-15);
            assert_relative_eq!(p.std, v.sqrt(), epsilon = 1e-15);
        }
        let vanilla: Vec<_> = (0..3).map(|s| toy_capture(s, 6, 2, 3, false)).collect();
        let r = bos_profile(&vanilla, 1).unwrap();
        assert!(r.series[0]
            .points
            .iter()
            .all(|p| (0.0..=1.0).contains(&p.mean)));
    }

    #[test]
    fn category_shares_concentrated_and_uniform() {
        let n = 4;
        let mut all_bos = vec![0.0; n * n];
        for i in 0..n {
            all_bos[i * n] = 1.0;
        }
        let cats = vec![
            TokenCategory::SpecialPunct,
            TokenCategory::Content,
            TokenCategory::Function,
            TokenCategory::NumSymOther,
        ];
        let c = AttentionCapture {
            causal: false,
            ..AttentionCapture::new(
                vec![layer(
                    ScoreVariant::Vanilla,
                    vec![Tensor::new(vec![n, n], all_bos).unwrap()],
                )],
                vec![0; n],
                cats.clone(),
                1..4,
            )
            .unwrap()
        };
        let r = category_distribution(&[c], ShareNormalization::Linear).unwrap();
        let share = |name: &str| r.series(name).unwrap().points[0].mean;
        assert_eq!(share("special_punct"), 1.0);
        assert_eq!(share("content"), 0.0);

        let uniform = Tensor::full(&[n, n], 0.25);
        let c = AttentionCapture::new(
            vec![layer(ScoreVariant::Vanilla, vec![uniform])],
            vec![0; n],
            cats,
            0..4,
        )
        .unwrap();
        let r = category_distribution(&[c], ShareNormalization::Linear).unwrap();
        for s in &r.series {
            assert_relative_eq!(s.points[0].mean, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn category_shares_match_per_token_recount() {
        let caps: Vec<_> = (10..14).map(|s| toy_capture(s, 7, 2, 3, false)).collect();
        let r = category_distribution(&caps, ShareNormalization::Linear).unwrap();
        for l in 0..2 {
            let mut total = 0.0;
            for (k, cat) in TokenCategory::ALL.iter().enumerate() {
                let mut per_head = Vec::new();
                for h in 0..3 {
                    let mut shares = [0.0; 4];
                    for c in &caps {
                        let phi = &c.layers[l].heads[h];
                        let mut mass = [0.0; 4];
                        for i in c.continuation.clone() {
                            for j in 0..c.seq_len() {
                                mass[c.categories[j].index()] += phi.get(i, j);
                            }
                        }
                        for q in 0..4 {
                            shares[q] += mass[q] / c.continuation.len() as f64 / caps.len() as f64;
                        }
                    }
                    let s: f64 = shares.iter().sum();
                    per_head.push(shares[k] / s);
                }
                let (m, sd) = mean_std(&per_head);
                let p = r.series(cat.name()).unwrap().points[l];
                assert_relative_eq!(p.mean, m, epsilon = 1e-12);
                assert_relative_eq!(p.std, sd, epsilon = 1e-12);
                total += p.mean;
            }
            assert!((total - 1.0).abs() < 1e-9);
        }
        let soft = category_distribution(&caps, ShareNormalization::Softmax).unwrap();
        let sum: f64 = soft.series.iter().map(|s| s.points[0].mean).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shifted_entropy_examples() {
        for n in 1..9 {
            let (e, flag) = shifted_entropy(&vec![1.0 / n as f64; n]);
            assert_eq!(e, (n as f64).ln());
            assert!(flag);
        }
        let (e, flag) = shifted_entropy(&[0.0, 1.0, 0.0]);
        assert_eq!((e, flag), (0.0, false));
        let (e, _) = shifted_entropy(&[0.5, -0.5, 1.0]);
        assert!((e - 0.6730116670092565).abs() < 1e-15);
    }

    #[test]
    fn entropy_is_bounded() {
        let caps: Vec<_> = (0..4).map(|s| toy_capture(s, 9, 2, 2, true)).collect();
        let r = attention_entropy(&caps).unwrap();
        let bound = 9f64.ln();
        for p in &r.series[0].points {
            assert!(p.mean >= 0.0 && p.mean <= bound);
        }
    }

    #[test]
    fn negative_fraction_examples() {
        let caps: Vec<_> = (0..3).map(|s| toy_capture(s, 6, 2, 4, false)).collect();
        let r = negative_fraction_bos(&caps).unwrap();
        assert!(r.series[0]
            .points
            .iter()
            .all(|p| p.mean == 0.0 && p.std == 0.0));

        let n = 3;
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n] = -0.1;
        }
        let c = AttentionCapture::new(
            vec![layer(
                ScoreVariant::Diff,
                vec![Tensor::new(vec![n, n], d).unwrap()],
            )],
            vec![0; n],
            vec![TokenCategory::Content; n],
            1..3,
        )
        .unwrap();
        assert_eq!(
            negative_fraction_bos(&[c]).unwrap().series[0].points[0].mean,
            100.0
        );

        let signed: Vec<_> = (5..8).map(|s| toy_capture(s, 6, 2, 4, true)).collect();
        let r = negative_fraction_bos(&signed).unwrap();
        for l in 0..2 {
            let per: Vec<f64> = signed
                .iter()
                .map(|c| {
                    let mut neg = 0;
                    for i in 1..6 {
                        for phi in &c.layers[l].heads {
                            if phi.get(i, 0) < 0.0 {
                                neg += 1;
                            }
                        }
                    }
                    100.0 * neg as f64 / (5 * 4) as f64
                })
                .collect();
            let (m, _) = mean_std(&per);
            assert_relative_eq!(r.series[0].points[l].mean, m, epsilon = 1e-12);
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(
            effective_rank(&Tensor::eye(7), DEFAULT_RANK_TOL).unwrap(),
            7
        );
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -1.0, 2.0];
        let outer: Vec<f64> = u
            .iter()
            .flat_map(|a| v.iter().map(move |b| a * b))
            .collect();
        let t = Tensor::new(vec![4, 4], outer).unwrap();
        assert_eq!(effective_rank(&t, DEFAULT_RANK_TOL).unwrap(), 1);
        assert_eq!(
            effective_rank(&Tensor::zeros(&[3, 3]), DEFAULT_RANK_TOL).unwrap(),
            0
        );
        assert!(effective_rank(&Tensor::eye(2), 0.0).is_err());
        let bad = Tensor::from_parts(vec![1, 1], vec![f64::NAN]);
        assert!(effective_rank(&bad, 1e-6).is_err());
        assert_relative_eq!(
            entropy_effective_rank(&Tensor::eye(5)).unwrap(),
            5.0,
            epsilon = 1e-12
        );
        let wide = Tensor::new(vec![2, 3], vec![3.0, 0.0, 0.0, 0.0, 4.0, 0.0]).unwrap();
        let sv = singular_values(&wide).unwrap();
        assert_relative_eq!(sv[0], 4.0, epsilon = 1e-14);
        assert_relative_eq!(sv[1], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn rank_compare_examples() {
        let caps: Vec<_> = (0..4).map(|s| toy_capture(s, 5, 3, 2, false)).collect();
        let r = rank_compare(&caps, &caps, 3, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(r.series[0].points.len(), 3);
        assert!(r.series[0].points.iter().all(|p| p.mean == 0.0));

        let low: Vec<_> = caps
            .iter()
            .map(|c| {
                let mut c = c.clone();
                for l in &mut c.layers {
                    for h in &mut l.heads {
                        *h = Tensor::full(&[5, 5], 0.2);
                    }
                }
                c
            })
            .collect();
        let full: Vec<_> = caps
            .iter()
            .map(|c| {
                let mut c = c.clone();
                for l in &mut c.layers {
                    for h in &mut l.heads {
                        *h = Tensor::eye(5);
                    }
                }
                c
            })
            .collect();
        let r = rank_compare(&full, &low, 3, DEFAULT_RANK_TOL).unwrap();
        assert!(r.series[0].points.iter().all(|p| p.mean == 100.0));
        assert!(rank_compare(&full, &low[..2], 3, DEFAULT_RANK_TOL).is_err());
    }

    #[test]
    fn oversmoothing_examples() {
        let r = oversmoothing_demo(&[0.3, -1.0, 2.0], 0.0, 10, 1).unwrap();
        assert_eq!(r.mc_estimate, softmax(&[0.3, -1.0, 2.0]));
        assert_eq!(r.entropy_mc, r.entropy_softmax_mean);

        let r = oversmoothing_demo(&[0.0, 0.0], 1.5, 20_000, 4).unwrap();
        assert!((r.mc_estimate[0] - 0.5).abs() < 0.01);

        let mean = draw_mean_logits(8, 11);
        let a = oversmoothing_demo(&mean, 1.0, 5_000, 3).unwrap();
        let b = oversmoothing_demo(&mean, 1.0, 5_000, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.significant(), "{a:?}");
        assert!(a.fitted_temperature > 1.0);
    }

    #[test]
    fn signal_average_examples() {
        let z = Tensor::new(vec![1, 2], vec![0.0, 2f64.ln()]).unwrap();
        let p = softmax(z.data());
        assert_relative_eq!(p[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 2.0 / 3.0, epsilon = 1e-15);
        for s in [1, 3, 7] {
            assert_eq!(signal_average_consistency(&z, 0.0, s, 9).unwrap(), 0.0);
        }
        let clean =
            Tensor::new(vec![2, 4], vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -0.5, 0.3]).unwrap();
        let sweep = signal_average_sweep(&clean, 1.0, &[1, 4, 16, 64], 0..32).unwrap();
        for w in sweep.windows(2) {
            assert!(w[1].1 <= w[0].1, "{sweep:?}");
        }
    }

    #[test]
    fn geometric_mean_examples() {
        let mut rng = seeded_rng(2);
        for _ in 0..50 {
            let sig: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..6).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            assert!(geometric_mean_identity(&sig).unwrap() < 1e-12);
        }
    }

    #[test]
    fn csv_and_json_round_trip() {
        let empty = AnalysisReport::new("entropy", "layer", 0);
        assert_eq!(to_csv(&empty), "layer,series,mean,std\n");
        let caps: Vec<_> = (0..3).map(|s| toy_capture(s, 6, 1, 2, false)).collect();
        let r = attention_entropy(&caps).unwrap().with_tag("toy");
        let rows = parse_csv(&to_csv(&r)).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].2 - r.series[0].points[0].mean).abs() < 1e-9);
        assert_eq!(from_json(&to_json(&r)).unwrap(), r);
        let mut awkward = AnalysisReport::new("rank", "layer", 1);
        awkward.series.push(Series {
            name: "median_rank".into(),
            points: vec![Point {
                x: 1,
                mean: 0.5011503765340429,
                std: 0.0024627671631423558,
            }],
        });
        assert_eq!(from_json(&to_json(&awkward)).unwrap(), awkward);
        let svg = to_svg(&r);
        assert!(svg.starts_with("<svg") && svg.contains("class=\"band\""));
    }

    #[test]
    fn capture_validation() {
        let phi = Tensor::eye(3);
        let bad = AttentionCapture::new(
            vec![layer(ScoreVariant::Vanilla, vec![phi])],
            vec![0; 2],
            vec![TokenCategory::Content; 2],
            0..1,
        );
        assert!(bad.is_err());
    }
}
