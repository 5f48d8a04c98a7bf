use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use log::info;

use integral_core::analysis::{
    self, AnalysisReport, AttentionCapture, ExportFormat, ShareNormalization, DEFAULT_LAST_LAYERS,
    DEFAULT_RANK_TOL,
};
use integral_core::backbone::Model;
use integral_core::data::{load_tasks, pack_sequences, score_mc_task, Vocabulary};
use integral_core::training::{write_loss_csv, Checkpoint, StepRecord, Trainer};
use integral_core::Error;

use crate::config::{resolve, to_toml, ConfigFile};
use crate::manifest::Run;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// TOML file with any of the configuration keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Continue from a checkpoint; its model and schedule are kept.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigFile,
}

impl TrainArgs {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        TrainArgs {
            config: None,
            out: out.into(),
            resume: None,
            overrides: ConfigFile::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub curve: Vec<StepRecord>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let cfg = file.overlay(&args.overrides);
    let corpus_path = cfg.corpus_path();
    let text = std::fs::read_to_string(&corpus_path)
        .map_err(|e| Error::io(&corpus_path, e))
        .context("reading the training corpus")?;
    let vocab = Vocabulary::build(&text, cfg.tokenizer_mode()?);
    let stream = vocab.tokenize(&text);
    if stream.len() < 2 {
        return Err(Error::data(format!(
            "corpus {} has fewer than two tokens",
            corpus_path.display()
        ))
        .into());
    }

    let mut trainer = match &args.resume {
        Some(path) => {
            let mut ck = Checkpoint::load_with_vocab(path, &vocab.hash())?;
            if let Some(steps) = cfg.steps {
                ck.train.steps = steps;
                ck.train.validate()?;
            }
            Trainer::from_checkpoint(ck)
        }
        None => {
            let resolved = resolve(&cfg, vocab.len())?;
            let model = Model::init(resolved.model.clone(), resolved.seed)?;
            Trainer::new(model, resolved.train.clone())?
        }
    };
    let packed = pack_sequences(&stream, trainer.config.seq_len)?;

    let mut run = Run::create(&args.out, "train")?;
    let resolved_file = match &args.resume {
        Some(_) => None,
        None => Some(resolve(&cfg, vocab.len())?.file),
    };
    run.manifest.config = serde_json::json!({
        "model": trainer.model.config,
        "train": trainer.config,
        "file": resolved_file,
    });
    run.manifest.seed = Some(trainer.config.seed);
    run.manifest.inputs.push(corpus_path.clone());
    run.manifest.inputs.extend(args.config.iter().cloned());
    run.manifest.inputs.extend(args.resume.iter().cloned());
    if let Some(f) = &resolved_file {
        let p = run.output(run.path("config.toml"));
        std::fs::write(&p, to_toml(f)).map_err(|e| Error::io(&p, e))?;
    }
    let vocab_path = run.output(run.path("vocab.json"));
    vocab.save(&vocab_path)?;
    let hash = Some(vocab.hash());

    info!(
        "training {} layers {:?} for {} steps on {} windows of {}",
        trainer.model.config.n_layers,
        trainer
            .model
            .config
            .variant_schedule
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>(),
        trainer.config.steps,
        packed.len(),
        packed.seq_len
    );
    let loss_path = run.output(run.path("loss.csv"));
    let mut curve = Vec::new();
    while trainer.step < trainer.config.steps {
        match trainer.train_step(&packed) {
            Ok(rec) => {
                if rec.step % 25 == 0 || rec.step == 1 || rec.step == trainer.config.steps {
                    info!(
                        "step {:>5}  lr {:.3e}  loss {:.5}",
                        rec.step, rec.lr, rec.loss
                    );
                }
                curve.push(rec);
            }
            Err(e) => {
                let p = run.output(run.path("ckpt-abort.iatl"));
                trainer.checkpoint(hash.clone()).save(&p)?;
                write_loss_csv(&loss_path, &curve)?;
                run.finish(&format!("aborted: {e}"))?;
                return Err(anyhow::Error::new(e).context(format!(
                    "training stopped at step {}; diagnostic checkpoint in {}",
                    trainer.step + 1,
                    p.display()
                )));
            }
        }
        if let Some(every) = resolve_every(&cfg) {
            if trainer.step % every == 0 && trainer.step < trainer.config.steps {
                let p = run.output(run.path(&format!("ckpt-step{:06}.iatl", trainer.step)));
                trainer.checkpoint(hash.clone()).save(&p)?;
            }
        }
    }
    write_loss_csv(&loss_path, &curve)?;
    let ckpt = run.output(run.path("ckpt-final.iatl"));
    trainer.checkpoint(hash).save(&ckpt)?;
    run.finish("ok")?;
    Ok(TrainOutcome {
        run_dir: run.dir,
        checkpoint: ckpt,
        vocab: vocab_path,
        curve,
    })
}

fn resolve_every(cfg: &ConfigFile) -> Option<usize> {
    cfg.checkpoint_every.filter(|&n| n > 0)
}

/// The vocabulary saved next to a checkpoint, unless one is given.
fn vocab_for(checkpoint: &Path, explicit: Option<&Path>) -> Result<Vocabulary> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.json"),
    };
    Ok(Vocabulary::load(&path)?)
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// JSONL file of multiple-choice tasks.
    pub tasks: PathBuf,
    /// Vocabulary file; defaults to vocab.json beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskAccuracy {
    pub task: String,
    pub total: usize,
    pub correct: usize,
}

impl TaskAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub run_dir: PathBuf,
    pub tasks: Vec<TaskAccuracy>,
    /// Unweighted mean of the per-task accuracies.
    pub average: f64,
    pub predictions: Vec<usize>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let vocab = vocab_for(&args.checkpoint, args.vocab.as_deref())?;
    let ck = Checkpoint::load_with_vocab(&args.checkpoint, &vocab.hash())?;
    let tasks = load_tasks(&args.tasks)?;
    if tasks.is_empty() {
        return Err(Error::data(format!("task file {} has no tasks", args.tasks.display())).into());
    }
    let mut run = Run::create(&args.out, "eval")?;
    run.manifest.inputs = vec![args.checkpoint.clone(), args.tasks.clone()];
    run.manifest.config = serde_json::json!({ "model": ck.model.config });

    let mut groups: BTreeMap<String, TaskAccuracy> = BTreeMap::new();
    let mut predictions = Vec::with_capacity(tasks.len());
    let mut rows = String::from("index,task,gold,predicted\n");
    for (i, t) in tasks.iter().enumerate() {
        let score = score_mc_task(&ck.model, &vocab, t)?;
        predictions.push(score.predicted);
        rows.push_str(&format!(
            "{i},{},{},{}\n",
            t.group(),
            t.gold,
            score.predicted
        ));
        let g = groups.entry(t.group().to_string()).or_insert(TaskAccuracy {
            task: t.group().to_string(),
            total: 0,
            correct: 0,
        });
        g.total += 1;
        g.correct += (score.predicted == t.gold) as usize;
    }
    let tasks: Vec<TaskAccuracy> = groups.into_values().collect();
    let average = tasks.iter().map(|t| t.accuracy()).sum::<f64>() / tasks.len() as f64;

    let mut csv = String::from("task,n,correct,accuracy\n");
    println!("{:<24} {:>6} {:>8}", "task", "n", "acc");
    for t in &tasks {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            t.task,
            t.total,
            t.correct,
            t.accuracy()
        ));
        println!("{:<24} {:>6} {:>8.4}", t.task, t.total, t.accuracy());
    }
    csv.push_str(&format!("average,{},,{average}\n", predictions.len()));
    println!(
        "{:<24} {:>6} {:>8.4}",
        "average",
        predictions.len(),
        average
    );
    for (name, body) in [("accuracy.csv", csv), ("predictions.csv", rows)] {
        let p = run.output(run.path(name));
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    run.finish("ok")?;
    Ok(EvalOutcome {
        run_dir: run.dir,
        tasks,
        average,
        predictions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Metric {
    BosProfile,
    Categories,
    Entropy,
    NegFraction,
    Rank,
    RankCompare,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::BosProfile,
        Metric::Categories,
        Metric::Entropy,
        Metric::NegFraction,
        Metric::Rank,
        Metric::RankCompare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::BosProfile => "bos_profile",
            Metric::Categories => "categories",
            Metric::Entropy => "entropy",
            Metric::NegFraction => "neg_fraction",
            Metric::Rank => "rank",
            Metric::RankCompare => "rank_compare",
        }
    }

    pub fn parse(s: &str) -> Result<Metric, Error> {
        let s = s.trim();
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!(
                    "unknown metric {s:?}; valid metrics: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// One or more checkpoints; rank_compare needs exactly two (A then B).
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub tasks: PathBuf,
    /// Comma-separated metric names; defaults to every applicable metric.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<String>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Samples drawn from each task group.
    #[arg(long, default_value_t = 200)]
    pub samples_per_task: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layer (1-based) for the [BOS] profile; defaults to the last layer.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    pub rank_tol: f64,
    #[arg(long, default_value_t = DEFAULT_LAST_LAYERS)]
    pub last_k: usize,
    /// Category share normalization: linear or softmax.
    #[arg(long, default_value = "linear")]
    pub share_norm: String,
}

impl AnalyzeArgs {
    pub fn new(checkpoints: Vec<PathBuf>, tasks: PathBuf, out: PathBuf) -> Self {
        AnalyzeArgs {
            checkpoints,
            tasks,
            metrics: Vec::new(),
            out,
            samples_per_task: 200,
            seed: 0,
            layer: None,
            rank_tol: DEFAULT_RANK_TOL,
            last_k: DEFAULT_LAST_LAYERS,
            share_norm: "linear".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeOutcome {
    pub run_dir: PathBuf,
    pub reports: Vec<AnalysisReport>,
    pub files: Vec<PathBuf>,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<AnalyzeOutcome> {
    let metrics: Vec<Metric> = if args.metrics.is_empty() {
        Metric::ALL
            .into_iter()
            .filter(|m| *m != Metric::RankCompare || args.checkpoints.len() == 2)
            .collect()
    } else {
        let mut m = args
            .metrics
            .iter()
            .map(|s| Metric::parse(s))
            .collect::<Result<Vec<_>, _>>()?;
        m.sort();
        m.dedup();
        m
    };
    if metrics.contains(&Metric::RankCompare) && args.checkpoints.len() != 2 {
        bail!(Error::config(format!(
            "rank_compare needs exactly two checkpoints, got {}",
            args.checkpoints.len()
        )));
    }
    let share_norm = match args.share_norm.as_str() {
        "linear" => ShareNormalization::Linear,
        "softmax" => ShareNormalization::Softmax,
        other => bail!(Error::config(format!(
            "share normalization must be linear or softmax, got {other:?}"
        ))),
    };
    let tasks = load_tasks(&args.tasks)?;
    if tasks.is_empty() {
        return Err(Error::data(format!("task file {} has no tasks", args.tasks.display())).into());
    }
    let samples = analysis::select_samples(&tasks, args.samples_per_task, args.seed);

    let mut run = Run::create(&args.out, "analyze")?;
    run.manifest.seed = Some(args.seed);
    run.manifest.inputs = args.checkpoints.clone();
    run.manifest.inputs.push(args.tasks.clone());
    run.manifest.config = serde_json::json!({
        "metrics": metrics.iter().map(|m| m.name()).collect::<Vec<_>>(),
        "samples_per_task": args.samples_per_task,
        "samples": samples.len(),
        "rank_tol": args.rank_tol,
        "last_k": args.last_k,
        "share_norm": args.share_norm,
        "layer": args.layer,
    });

    let mut captured = Vec::with_capacity(args.checkpoints.len());
    for (i, path) in args.checkpoints.iter().enumerate() {
        let vocab = vocab_for(path, None)?;
        let ck = Checkpoint::load_with_vocab(path, &vocab.hash())?;
        let top = ck.model.config.variant_schedule.last().copied();
        let tag = format!(
            "{}-{}",
            (b'a' + (i % 26) as u8) as char,
            top.map_or("model", |v| v.name())
        );
        let caps = samples
            .iter()
            .map(|t| AttentionCapture::record(&ck.model, &vocab, t))
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("capturing attention of {}", path.display()))?;
        info!(
            "{tag}: captured {} samples from {}",
            caps.len(),
            path.display()
        );
        captured.push((tag, caps));
    }

    let mut reports = Vec::new();
    for &metric in &metrics {
        if metric == Metric::RankCompare {
            let (ta, a) = &captured[0];
            let (tb, b) = &captured[1];
            let r = analysis::rank_compare(a, b, args.last_k, args.rank_tol)?
                .with_tag(format!("{ta}-vs-{tb}"));
            reports.push(r);
            continue;
        }
        for (tag, caps) in &captured {
            let r = match metric {
                Metric::BosProfile => {
                    let layer = args.layer.unwrap_or(caps[0].n_layers());
                    analysis::bos_profile(caps, layer)?
                }
                Metric::Categories => analysis::category_distribution(caps, share_norm)?,
                Metric::Entropy => analysis::attention_entropy(caps)?,
                Metric::NegFraction => analysis::negative_fraction_bos(caps)?,
                Metric::Rank => analysis::rank_profile(caps, args.rank_tol)?,
                Metric::RankCompare => unreachable!(),
            };
            reports.push(r.with_tag(tag.clone()));
        }
    }
    let mut files = Vec::new();
    for r in &reports {
        for fmt in [ExportFormat::Csv, ExportFormat::Svg, ExportFormat::Json] {
            let p =
                run.output(run.path(&format!("{}-{}.{}", r.metric, r.model_tag, fmt.extension())));
            analysis::export(r, fmt, &p)?;
            files.push(p);
        }
    }
    run.finish("ok")?;
    Ok(AnalyzeOutcome {
        run_dir: run.dir,
        reports,
        files,
    })
}
