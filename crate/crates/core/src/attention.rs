//! Attention score functions and the multi-head layer that dispatches among them.
//!
//! Four score functions share one parameter layout. Query and key
//! projections are stored fused as `d_m × d_m` matrices; head `h` owns
//! columns `h·head_dim .. (h+1)·head_dim`, and within a head, signal `s`
//! owns a contiguous block of `d_h` columns. The score width `d_h` shrinks
//! with the signal count, so every variant has the same Q/K parameter budget:
//!
//! | variant | signals | `d_h`            | score                                  |
//! |---------|---------|------------------|----------------------------------------|
//! | Vanilla | 1       | `head_dim`       | `softmax(Z)`                           |
//! | Cog     | 1       | `head_dim`       | `sign(Z) ⊙ softmax(|Z|)`               |
//! | Diff    | 2       | `head_dim / 2`   | `softmax(Z¹) − λ·softmax(Z²)`          |
//! | Intg    | S       | `head_dim / S`   | `softmax((1/S) Σ_s Zˢ)`                |
//!
//! Each `Zˢ = (X Wˢ_Q)(X Wˢ_K / √d_h)ᵀ`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

pub const DEFAULT_SIGNALS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScoreVariant {
    Vanilla,
    Cog,
    Diff,
    Intg { signals: usize },
}

impl ScoreVariant {
    pub fn intg(signals: usize) -> Self {
        ScoreVariant::Intg { signals }
    }

    /// Number of independent Q/K projections per head.
    pub fn signals(self) -> usize {
        match self {
            ScoreVariant::Vanilla | ScoreVariant::Cog => 1,
            ScoreVariant::Diff => 2,
            ScoreVariant::Intg { signals } => signals,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScoreVariant::Vanilla => "vanilla",
            ScoreVariant::Cog => "cog",
            ScoreVariant::Diff => "diff",
            ScoreVariant::Intg { .. } => "intg",
        }
    }

    /// Whether scores can be negative.
    pub fn signed(self) -> bool {
        matches!(self, ScoreVariant::Cog | ScoreVariant::Diff)
    }

    pub fn parse(name: &str, signals: usize) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(ScoreVariant::Vanilla),
            "cog" => Ok(ScoreVariant::Cog),
            "diff" => Ok(ScoreVariant::Diff),
            "intg" => Ok(ScoreVariant::Intg { signals }),
            other => Err(Error::config(format!(
                "unknown attention variant `{other}` (expected vanilla, cog, diff or intg)"
            ))),
        }
    }
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreVariant::Intg { signals } => write!(f, "intg(S={signals})"),
            v => f.write_str(v.name()),
        }
    }
}

/// Score width `d_h` for a head of width `head_dim`.
pub fn head_dim_split(variant: ScoreVariant, head_dim: usize) -> Result<usize> {
    let s = variant.signals();
    if s == 0 {
        return Err(Error::config(
            "integral attention needs at least one signal",
        ));
    }
    if head_dim == 0 || !head_dim.is_multiple_of(s) {
        return Err(Error::config(format!(
            "{variant} cannot split head_dim {head_dim} into {s} equal signal blocks"
        )));
    }
    Ok(head_dim / s)
}

/// Initial value of the per-layer λ in differential layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[derive(Default)]
pub enum LambdaSchedule {
    /// `0.8 − 0.6·exp(−0.3·(layer − 1))` with 1-based layers.
    #[default]
    Depth,
    Constant {
        value: f64,
    },
}

impl LambdaSchedule {
    pub fn init(self, layer_index: usize) -> f64 {
        match self {
            LambdaSchedule::Depth => {
                let depth = layer_index.saturating_sub(1) as f64;
                0.8 - 0.6 * (-0.3 * depth).exp()
            }
            LambdaSchedule::Constant { value } => value,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("depth") || s.eq_ignore_ascii_case("default") {
            return Ok(LambdaSchedule::Depth);
        }
        let value = s
            .strip_prefix("constant:")
            .unwrap_or(s)
            .parse::<f64>()
            .map_err(|_| Error::config(format!("bad lambda_schedule `{s}`")))?;
        if !value.is_finite() {
            return Err(Error::config("lambda must be finite"));
        }
        Ok(LambdaSchedule::Constant { value })
    }
}

/// A materialized attention score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Tensor,
    pub variant: ScoreVariant,
    pub causal: bool,
}

/// `(X·Wq)(X·Wk/√d_h)ᵀ`.
pub fn qk_logits(tape: &mut Tape, x: Var, wq: Var, wk: Var, d_h: usize) -> Result<Var> {
    if d_h == 0 {
        return Err(Error::config("score width d_h must be at least 1"));
    }
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let k = tape.scale(k, 1.0 / (d_h as f64).sqrt())?;
    Ok(tape.matmul_nt(q, k)?)
}

pub fn score_vanilla(tape: &mut Tape, z: Var, mask: Option<&Mask>) -> Result<Var> {
    Ok(tape.softmax_rows(z, mask)?)
}

/// Signed softmax. Masked magnitudes are excluded before normalization and
/// `sign(0) = 0`.
pub fn score_cog(tape: &mut Tape, z: Var, mask: Option<&Mask>) -> Result<Var> {
    let signs: Vec<f64> = tape
        .value(z)
        .data()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let mag = tape.abs(z)?;
    let p = tape.softmax_rows(mag, mask)?;
    Ok(tape.mul_const(p, signs)?)
}

pub fn score_diff(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    lambda: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let p1 = tape.softmax_rows(z1, mask)?;
    let p2 = tape.softmax_rows(z2, mask)?;
    let p2 = tape.scale_by(p2, lambda)?;
    Ok(tape.sub(p1, p2)?)
}

/// Softmax of the mean of the signal logits.
pub fn score_intg(tape: &mut Tape, zs: &[Var], mask: Option<&Mask>) -> Result<Var> {
    if zs.is_empty() {
        return Err(Error::config("integral score needs at least one signal"));
    }
    let mean = tape.mean_of(zs)?;
    Ok(tape.softmax_rows(mean, mask)?)
}

/// Evaluate a score function on plain logit matrices.
///
/// `logits` holds one matrix per signal (two for Diff). `lambda` is only read
/// for Diff.
pub fn score_matrix(
    variant: ScoreVariant,
    logits: &[Tensor],
    lambda: f64,
    mask: Option<&Mask>,
) -> Result<ScoreMatrix> {
    let mut tape = Tape::new();
    let zs: Vec<Var> = logits.iter().map(|t| tape.constant(t.clone())).collect();
    let expect = variant.signals();
    if zs.len() != expect {
        return Err(Error::config(format!(
            "{variant} expects {expect} logit matrices, got {}",
            zs.len()
        )));
    }
    let out = match variant {
        ScoreVariant::Vanilla => score_vanilla(&mut tape, zs[0], mask)?,
        ScoreVariant::Cog => score_cog(&mut tape, zs[0], mask)?,
        ScoreVariant::Diff => {
            let l = tape.constant(Tensor::scalar(lambda));
            score_diff(&mut tape, zs[0], zs[1], l, mask)?
        }
        ScoreVariant::Intg { .. } => score_intg(&mut tape, &zs, mask)?,
    };
    let causal = mask.is_some_and(|m| {
        let (r, c) = m.shape();
        r == c && *m == Mask::causal(r)
    });
    Ok(ScoreMatrix {
        values: tape.value(out).clone(),
        variant,
        causal,
    })
}

/// Per-head view of the fused projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadWeights {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Tensor,
}

impl AttentionHeadWeights {
    pub fn qk_param_count(&self) -> usize {
        self.wq.iter().chain(&self.wk).map(Tensor::len).sum()
    }
}

fn col_block(w: &Tensor, start: usize, width: usize) -> Tensor {
    let rows = w.rows();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        data.extend_from_slice(&w.row(r)[start..start + width]);
    }
    Tensor::from_parts(vec![rows, width], data)
}

/// Split fused `d_m × d_m` projections into the per-head, per-signal matrices.
pub fn head_weights(
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    variant: ScoreVariant,
    n_heads: usize,
    head: usize,
) -> Result<AttentionHeadWeights> {
    let d_m = wq.cols();
    if n_heads == 0 || !d_m.is_multiple_of(n_heads) || head >= n_heads {
        return Err(Error::config(format!(
            "head {head} of {n_heads} does not tile width {d_m}"
        )));
    }
    let head_dim = d_m / n_heads;
    let d_h = head_dim_split(variant, head_dim)?;
    let base = head * head_dim;
    let per_signal = |w: &Tensor| {
        (0..variant.signals())
            .map(|s| col_block(w, base + s * d_h, d_h))
            .collect()
    };
    Ok(AttentionHeadWeights {
        wq: per_signal(wq),
        wk: per_signal(wk),
        wv: col_block(wv, base, head_dim),
    })
}

/// Handles to one layer's attention parameters on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    /// Learnable λ; required for Diff.
    pub lambda: Option<Var>,
}

/// Static settings for one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSettings {
    pub variant: ScoreVariant,
    pub n_heads: usize,
    /// Rows of the input form consecutive sequences of this length.
    pub seq_len: usize,
    /// Rotary base; `None` disables rotary embedding.
    pub rope_theta: Option<f64>,
    pub causal: bool,
    /// Per-head RMS normalization of Diff outputs, scaled by `1 − λ_init`.
    pub diff_head_norm: Option<f64>,
}

/// Multi-head attention over `x: [B·N × d_m]`, returning `[B·N × d_m]`.
///
/// When `capture` is given, each sequence's score matrices are appended to
/// it in `(sequence, head)` order.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    vars: &AttentionVars,
    cfg: &AttentionSettings,
    mut capture: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let (rows, d_m) = tape.value(x).ensure_matrix("multi_head_attention")?;
    if cfg.n_heads == 0 || d_m % cfg.n_heads != 0 {
        return Err(Error::config(format!(
            "model width {d_m} is not divisible by {} heads",
            cfg.n_heads
        )));
    }
    if cfg.seq_len == 0 || rows % cfg.seq_len != 0 {
        return Err(Error::config(format!(
            "{rows} rows do not split into sequences of {}",
            cfg.seq_len
        )));
    }
    let head_dim = d_m / cfg.n_heads;
    let d_h = head_dim_split(cfg.variant, head_dim)?;
    let n = cfg.seq_len;
    let signals = cfg.variant.signals();
    let lambda = match (cfg.variant, vars.lambda) {
        (ScoreVariant::Diff, None) => {
            return Err(Error::config(
                "differential attention needs a lambda parameter",
            ))
        }
        (_, l) => l,
    };

    let mut q = tape.matmul(x, vars.wq)?;
    let k = tape.matmul(x, vars.wk)?;
    let mut k = tape.scale(k, 1.0 / (d_h as f64).sqrt())?;
    let v = tape.matmul(x, vars.wv)?;
    if let Some(theta) = cfg.rope_theta {
        if d_h % 2 != 0 {
            return Err(Error::config(format!(
                "rotary embedding needs an even score width, got d_h = {d_h}"
            )));
        }
        let positions: Vec<usize> = (0..rows).map(|r| r % n).collect();
        q = tape.rope(q, &positions, theta, d_h)?;
        k = tape.rope(k, &positions, theta, d_h)?;
    }
    let mask = cfg.causal.then(|| Mask::causal(n));
    let mask = mask.as_ref();

    let n_seq = rows / n;
    let mut seq_outputs = Vec::with_capacity(n_seq);
    for b in 0..n_seq {
        let (qb, kb, vb) = if n_seq == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, b * n, n)?,
                tape.slice_rows(k, b * n, n)?,
                tape.slice_rows(v, b * n, n)?,
            )
        };
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let phi = if let ScoreVariant::Intg { .. } = cfg.variant {
                // The signal blocks are adjacent, so the summed logits are a
                // single product over the whole head slice.
                let qh = tape.slice_cols(qb, h * head_dim, head_dim)?;
                let kh = tape.slice_cols(kb, h * head_dim, head_dim)?;
                let total = tape.matmul_nt(qh, kh)?;
                let mean = tape.scale(total, 1.0 / signals as f64)?;
                tape.softmax_rows(mean, mask)?
            } else {
                let mut zs = Vec::with_capacity(signals);
                for s in 0..signals {
                    let off = h * head_dim + s * d_h;
                    let qs = tape.slice_cols(qb, off, d_h)?;
                    let ks = tape.slice_cols(kb, off, d_h)?;
                    zs.push(tape.matmul_nt(qs, ks)?);
                }
                match cfg.variant {
                    ScoreVariant::Cog => score_cog(tape, zs[0], mask)?,
                    ScoreVariant::Diff => score_diff(tape, zs[0], zs[1], lambda.unwrap(), mask)?,
                    _ => score_vanilla(tape, zs[0], mask)?,
                }
            };
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(tape.value(phi).clone());
            }
            let vh = if cfg.n_heads == 1 {
                vb
            } else {
                tape.slice_cols(vb, h * head_dim, head_dim)?
            };
            let mut out = tape.matmul(phi, vh)?;
            if let (ScoreVariant::Diff, Some(lambda_init)) = (cfg.variant, cfg.diff_head_norm) {
                let ones = tape.constant(Tensor::full(&[head_dim], 1.0));
                out = tape.rms_norm(out, ones, 1e-5)?;
                out = tape.scale(out, 1.0 - lambda_init)?;
            }
            heads.push(out);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        seq_outputs.push(joined);
    }
    let joined = if seq_outputs.len() == 1 {
        seq_outputs[0]
    } else {
        tape.concat_rows(&seq_outputs)?
    };
    Ok(tape.matmul(joined, vars.wo)?)
}
