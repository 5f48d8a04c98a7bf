//! Run configuration: preset defaults, an optional TOML file, and flag overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use integral_core::attention::{LambdaSchedule, ScoreVariant, DEFAULT_SIGNALS};
use integral_core::backbone::{layer_schedule, ModelConfig, Placement};
use integral_core::data::TokenizerMode;
use integral_core::training::TrainConfig;
use integral_core::Error;

pub const DEFAULT_CORPUS: &str = "data/corpus.txt";

/// Every configurable key. The same struct backs the TOML file and the
/// `--key value` flags, and unset keys fall through to the next layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// desk, 125m or 1.2b
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub intermediate_size: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// vanilla, cog, diff or intg
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub signals: Option<usize>,
    /// Fraction of layers that use the variant; the rest are vanilla.
    #[arg(long)]
    pub denoise_ratio: Option<f64>,
    /// top or bottom
    #[arg(long)]
    pub placement: Option<String>,
    /// "depth" or a constant such as 0.5
    #[arg(long)]
    pub lambda_schedule: Option<String>,
    #[arg(long)]
    pub tie_embeddings: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rope_theta: Option<f64>,
    #[arg(long)]
    pub diff_head_norm: Option<bool>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// char or word
    #[arg(long)]
    pub tokenizer: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($f:ident),* $(,)?) => {
        ConfigFile { $($f: $top.$f.clone().or_else(|| $base.$f.clone())),* }
    };
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// `top` wins wherever it sets a key.
    pub fn overlay(&self, top: &ConfigFile) -> ConfigFile {
        overlay!(
            self,
            top,
            preset,
            d_model,
            n_layers,
            n_heads,
            intermediate_size,
            vocab_size,
            max_seq_len,
            variant,
            signals,
            denoise_ratio,
            placement,
            lambda_schedule,
            tie_embeddings,
            seed,
            rope_theta,
            diff_head_norm,
            steps,
            batch_size,
            seq_len,
            grad_accum,
            max_lr,
            warmup_steps,
            clip_norm,
            weight_decay,
            corpus,
            tokenizer,
            checkpoint_every,
        )
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.corpus
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CORPUS))
    }

    pub fn tokenizer_mode(&self) -> Result<TokenizerMode, Error> {
        match self.tokenizer.as_deref().unwrap_or("char") {
            "char" => Ok(TokenizerMode::Char),
            "word" => Ok(TokenizerMode::Word),
            other => Err(Error::config(format!(
                "unknown tokenizer {other:?} (expected char or word)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    M125,
    B1_2,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "125m" => Ok(Preset::M125),
            "1.2b" | "1_2b" => Ok(Preset::B1_2),
            other => Err(Error::config(format!(
                "unknown preset {other:?} (expected desk, 125m or 1.2b)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::M125 => "125m",
            Preset::B1_2 => "1.2b",
        }
    }

    pub fn model(self, vocab_len: usize) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(vocab_len),
            Preset::M125 => ModelConfig::preset_125m(),
            Preset::B1_2 => ModelConfig::preset_1_2b(),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::M125 => TrainConfig::preset_125m(),
            Preset::B1_2 => TrainConfig::preset_1_2b(),
        }
    }
}

/// Fully resolved settings of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub checkpoint_every: Option<usize>,
    /// The effective configuration written back as a config file.
    pub file: ConfigFile,
}

pub fn resolve(cfg: &ConfigFile, vocab_len: usize) -> Result<Resolved, Error> {
    let preset = Preset::parse(cfg.preset.as_deref().unwrap_or("desk"))?;
    let mut model = preset.model(vocab_len);
    let mut train = preset.train();

    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(model.d_model, cfg.d_model);
    set!(model.n_layers, cfg.n_layers);
    set!(model.n_heads, cfg.n_heads);
    set!(model.intermediate_size, cfg.intermediate_size);
    set!(model.vocab_size, cfg.vocab_size);
    set!(model.max_seq_len, cfg.max_seq_len);
    set!(model.tie_embeddings, cfg.tie_embeddings);
    set!(model.rope_theta, cfg.rope_theta);
    set!(model.diff_head_norm, cfg.diff_head_norm);
    if model.vocab_size < vocab_len {
        return Err(Error::config(format!(
            "vocab_size {} is smaller than the tokenizer vocabulary ({vocab_len})",
            model.vocab_size
        )));
    }
    if let Some(s) = &cfg.lambda_schedule {
        model.lambda_schedule = LambdaSchedule::parse(s)?;
    }
    let signals = cfg.signals.unwrap_or(DEFAULT_SIGNALS);
    let variant_name = cfg.variant.as_deref().unwrap_or("vanilla");
    let variant = ScoreVariant::parse(variant_name, signals)?;
    let ratio = cfg.denoise_ratio.unwrap_or(1.0);
    let placement = Placement::parse(cfg.placement.as_deref().unwrap_or("top"))?;
    model.variant_schedule = layer_schedule(model.n_layers, ratio, placement, variant)?;
    model.validate()?;

    set!(train.steps, cfg.steps);
    set!(train.batch_size, cfg.batch_size);
    set!(train.seq_len, cfg.seq_len);
    set!(train.grad_accum, cfg.grad_accum);
    set!(train.max_lr, cfg.max_lr);
    set!(train.warmup_steps, cfg.warmup_steps);
    set!(train.adam.weight_decay, cfg.weight_decay);
    if let Some(c) = cfg.clip_norm {
        train.clip_norm = (c > 0.0).then_some(c);
    }
    // A short run keeps the preset's warmup share instead of failing.
    if cfg.warmup_steps.is_none() && train.warmup_steps > train.steps {
        train.warmup_steps = train.steps / 5;
    }
    let seed = cfg.seed.unwrap_or(0);
    train.seed = seed;
    train.validate()?;
    if train.seq_len > model.max_seq_len {
        return Err(Error::config(format!(
            "seq_len {} exceeds max_seq_len {}",
            train.seq_len, model.max_seq_len
        )));
    }
    if cfg.checkpoint_every == Some(0) {
        return Err(Error::config("checkpoint_every must be positive"));
    }

    let file = ConfigFile {
        preset: Some(preset.name().into()),
        d_model: Some(model.d_model),
        n_layers: Some(model.n_layers),
        n_heads: Some(model.n_heads),
        intermediate_size: Some(model.intermediate_size),
        vocab_size: Some(model.vocab_size),
        max_seq_len: Some(model.max_seq_len),
        variant: Some(variant.name().into()),
        signals: Some(signals),
        denoise_ratio: Some(ratio),
        placement: Some(cfg.placement.clone().unwrap_or_else(|| "top".into())),
        lambda_schedule: Some(match model.lambda_schedule {
            LambdaSchedule::Depth => "depth".into(),
            LambdaSchedule::Constant { value } => value.to_string(),
        }),
        tie_embeddings: Some(model.tie_embeddings),
        seed: Some(seed),
        rope_theta: Some(model.rope_theta),
        diff_head_norm: Some(model.diff_head_norm),
        steps: Some(train.steps),
        batch_size: Some(train.batch_size),
        seq_len: Some(train.seq_len),
        grad_accum: Some(train.grad_accum),
        max_lr: Some(train.max_lr),
        warmup_steps: Some(train.warmup_steps),
        clip_norm: Some(train.clip_norm.unwrap_or(0.0)),
        weight_decay: Some(train.adam.weight_decay),
        corpus: Some(cfg.corpus_path()),
        tokenizer: Some(cfg.tokenizer.clone().unwrap_or_else(|| "char".into())),
        checkpoint_every: cfg.checkpoint_every,
    };
    Ok(Resolved {
        preset,
        model,
        train,
        seed,
        checkpoint_every: cfg.checkpoint_every,
        file,
    })
}

pub fn to_toml(cfg: &ConfigFile) -> String {
    toml::to_string(cfg).expect("config serializes")
}
