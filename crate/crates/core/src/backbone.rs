//! Llama-style decoder-only language model with a per-layer attention variant.

use serde::{Deserialize, Serialize};

use crate::attention::{
    head_dim_split, multi_head_attention, AttentionSettings, AttentionVars, LambdaSchedule,
    ScoreVariant,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Which end of the stack receives the denoising variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Top,
    Bottom,
}

impl Placement {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "top" => Ok(Placement::Top),
            "bottom" => Ok(Placement::Bottom),
            other => Err(Error::config(format!(
                "placement must be top or bottom, got `{other}`"
            ))),
        }
    }
}

/// Per-layer variants: `round(ratio · n_layers)` layers at the chosen end use
/// `variant`, the rest are Vanilla. Index 0 is the layer nearest the embedding.
pub fn layer_schedule(
    n_layers: usize,
    denoise_ratio: f64,
    placement: Placement,
    variant: ScoreVariant,
) -> Result<Vec<ScoreVariant>> {
    if n_layers == 0 {
        return Err(Error::config("a model needs at least one layer"));
    }
    if !(0.0..=1.0).contains(&denoise_ratio) {
        return Err(Error::config(format!(
            "denoise_ratio must lie in [0, 1], got {denoise_ratio}"
        )));
    }
    let k = (denoise_ratio * n_layers as f64).round() as usize;
    Ok((0..n_layers)
        .map(|l| {
            let denoised = match placement {
                Placement::Top => l >= n_layers - k,
                Placement::Bottom => l < k,
            };
            if denoised {
                variant
            } else {
                ScoreVariant::Vanilla
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub variant_schedule: Vec<ScoreVariant>,
    pub tie_embeddings: bool,
    pub rope_theta: f64,
    pub norm_eps: f64,
    #[serde(default)]
    pub lambda_schedule: LambdaSchedule,
    #[serde(default)]
    pub diff_head_norm: bool,
}

impl ModelConfig {
    /// Dimensions without a variant schedule filled in (all Vanilla).
    pub fn with_dims(
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        intermediate_size: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Self {
        ModelConfig {
            d_model,
            n_layers,
            n_heads,
            intermediate_size,
            vocab_size,
            max_seq_len,
            variant_schedule: vec![ScoreVariant::Vanilla; n_layers],
            tie_embeddings: true,
            rope_theta: 10000.0,
            norm_eps: 1e-5,
            lambda_schedule: LambdaSchedule::Depth,
            diff_head_norm: false,
        }
    }

    /// Small model that trains in minutes on one core.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig::with_dims(64, 2, 4, 172, vocab_size, 256)
    }

    pub fn preset_125m() -> Self {
        ModelConfig::with_dims(768, 20, 8, 1155, 32000, 2048)
    }

    pub fn preset_1_2b() -> Self {
        ModelConfig::with_dims(2048, 22, 32, 5632, 32000, 2048)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn with_schedule(mut self, schedule: Vec<ScoreVariant>) -> Self {
        self.variant_schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((k, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.variant_schedule.len() != self.n_layers {
            return Err(Error::config(format!(
                "variant schedule has {} entries for {} layers",
                self.variant_schedule.len(),
                self.n_layers
            )));
        }
        for (l, v) in self.variant_schedule.iter().enumerate() {
            let d_h = head_dim_split(*v, self.head_dim())
                .map_err(|e| Error::config(format!("layer {}: {e}", l + 1)))?;
            if d_h % 2 != 0 {
                return Err(Error::config(format!(
                    "layer {}: {v} gives odd score width d_h = {d_h}; rotary embedding needs it even",
                    l + 1
                )));
            }
        }
        if !(self.norm_eps > 0.0) || !(self.rope_theta > 0.0) {
            return Err(Error::config("norm_eps and rope_theta must be positive"));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, i, v) = (self.d_model, self.intermediate_size, self.vocab_size);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("attn_norm"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((p(w), vec![d, d]));
            }
            out.push((p("mlp_norm"), vec![d]));
            out.push((p("w_gate"), vec![d, i]));
            out.push((p("w_up"), vec![d, i]));
            out.push((p("w_down"), vec![i, d]));
        }
        out.push(("final_norm".into(), vec![d]));
        if !self.tie_embeddings {
            out.push(("lm_head".into(), vec![d, v]));
        }
        out
    }
}

/// Exact count of weight-matrix and norm parameters.
///
/// The per-layer differential λ scalars are not included; see
/// [`lambda_param_count`].
pub fn param_count(config: &ModelConfig) -> usize {
    config
        .shapes()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

pub fn lambda_param_count(config: &ModelConfig) -> usize {
    config
        .variant_schedule
        .iter()
        .filter(|v| **v == ScoreVariant::Diff)
        .count()
}

/// Score matrices recorded from one layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScores {
    pub variant: ScoreVariant,
    /// One `N × N` matrix per head.
    pub heads: Vec<Tensor>,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, Copy)]
struct LayerIx {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    lambda: Option<usize>,
    mlp_norm: usize,
    w_gate: usize,
    w_up: usize,
    w_down: usize,
}

impl Model {
    /// Fresh weights: truncated normal (std 0.02) projections, unit norms,
    /// λ from the configured schedule.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = Vec::new();
        for (name, shape) in config.shapes() {
            let t = if name.ends_with("norm") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::trunc_normal(&shape, INIT_STD, &mut rng)
            };
            params.push((name, t));
        }
        for (l, v) in config.variant_schedule.iter().enumerate() {
            if *v == ScoreVariant::Diff {
                let value = config.lambda_schedule.init(l + 1);
                params.push((format!("layers.{l}.lambda"), Tensor::scalar(value)));
            }
        }
        Ok(Model { config, params })
    }

    /// Rebuild from stored tensors; names and shapes must match the config.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Model::init(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((tn, tt), (n, t)) in template.params.iter().zip(&params) {
            if tn != n || tt.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{n}` {:?} does not match expected `{tn}` {:?}",
                    t.shape(),
                    tt.shape()
                )));
            }
        }
        Ok(Model {
            config: template.config,
            params,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Current λ of a Diff layer (1-based index).
    pub fn lambda_value(&self, layer_index: usize) -> Option<f64> {
        self.param(&format!("layers.{}.lambda", layer_index.checked_sub(1)?))
            .map(Tensor::item)
    }

    fn index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("model has no parameter `{name}`"))
    }

    fn layer_index(&self, l: usize) -> LayerIx {
        let ix = |n: &str| self.index(&format!("layers.{l}.{n}"));
        LayerIx {
            attn_norm: ix("attn_norm"),
            wq: ix("wq"),
            wk: ix("wk"),
            wv: ix("wv"),
            wo: ix("wo"),
            lambda: (self.config.variant_schedule[l] == ScoreVariant::Diff).then(|| ix("lambda")),
            mlp_norm: ix("mlp_norm"),
            w_gate: ix("w_gate"),
            w_up: ix("w_up"),
            w_down: ix("w_down"),
        }
    }

    /// Put every parameter on the tape; `trainable` controls whether they receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_tokens(&self, batch: &[Vec<usize>]) -> Result<usize> {
        let n = batch
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::data("empty batch"))?;
        if n == 0 {
            return Err(Error::data("empty token sequence"));
        }
        if n > self.config.max_seq_len {
            return Err(Error::data(format!(
                "sequence of {n} tokens exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        for seq in batch {
            if seq.len() != n {
                return Err(Error::data("sequences in a batch must share one length"));
            }
            if let Some(bad) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::data(format!(
                    "token id {bad} is outside the vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(n)
    }

    /// Logits `[B·N × vocab]` for a batch of equal-length sequences.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &[Vec<usize>],
        mut capture: Option<&mut Vec<LayerScores>>,
    ) -> Result<Var> {
        let n = self.check_tokens(batch)?;
        let cfg = &self.config;
        let ids: Vec<usize> = batch.iter().flatten().copied().collect();
        let embed = vars[self.index("embed")];
        let mut x = tape.embedding(embed, &ids)?;
        for l in 0..cfg.n_layers {
            let ix = self.layer_index(l);
            let variant = cfg.variant_schedule[l];
            let settings = AttentionSettings {
                variant,
                n_heads: cfg.n_heads,
                seq_len: n,
                rope_theta: Some(cfg.rope_theta),
                causal: true,
                diff_head_norm: cfg.diff_head_norm.then(|| cfg.lambda_schedule.init(l + 1)),
            };
            let attn_vars = AttentionVars {
                wq: vars[ix.wq],
                wk: vars[ix.wk],
                wv: vars[ix.wv],
                wo: vars[ix.wo],
                lambda: ix.lambda.map(|i| vars[i]),
            };
            let h = tape.rms_norm(x, vars[ix.attn_norm], cfg.norm_eps)?;
            let mut heads = capture.is_some().then(Vec::new);
            let a = multi_head_attention(tape, h, &attn_vars, &settings, heads.as_mut())?;
            if let (Some(cap), Some(heads)) = (capture.as_deref_mut(), heads) {
                cap.push(LayerScores { variant, heads });
            }
            x = tape.add(x, a)?;

            let h = tape.rms_norm(x, vars[ix.mlp_norm], cfg.norm_eps)?;
            let gate = tape.matmul(h, vars[ix.w_gate])?;
            let gate = tape.silu(gate)?;
            let up = tape.matmul(h, vars[ix.w_up])?;
            let m = tape.mul(gate, up)?;
            let m = tape.matmul(m, vars[ix.w_down])?;
            x = tape.add(x, m)?;
        }
        let x = tape.rms_norm(x, vars[self.index("final_norm")], cfg.norm_eps)?;
        let logits = if cfg.tie_embeddings {
            tape.matmul_nt(x, embed)?
        } else {
            tape.matmul(x, vars[self.index("lm_head")])?
        };
        Ok(logits)
    }

    /// Inference forward pass of one sequence, returning `[N × vocab]` logits.
    pub fn forward_lm(
        &self,
        tokens: &[usize],
        capture: Option<&mut Vec<LayerScores>>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward_tape(&mut tape, &vars, &[tokens.to_vec()], capture)?;
        Ok(tape.value(out).clone())
    }
}
