//! Causal-LM training: loss, AdamW, warmup + cosine schedule, deterministic
//! batching and the binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{Model, ModelConfig};
use crate::data::Packed;
use crate::error::{Error, Result};
use crate::tensor::{seeded_rng, Tensor};

/// Mean next-token negative log-likelihood over rows that have a target.
pub fn cross_entropy_lm(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::data("no targets to score"));
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, targets, 1.0 / count as f64)?;
    Ok(tape.value(loss).item())
}

/// Linear warmup to `max_lr`, then cosine decay to `0.1·max_lr` at `total_steps`.
pub fn lr_schedule(
    step: usize,
    warmup_steps: usize,
    max_lr: f64,
    total_steps: usize,
) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::config(format!(
            "warmup_steps {warmup_steps} exceeds total steps {total_steps}"
        )));
    }
    let floor = 0.1 * max_lr;
    if step < warmup_steps {
        return Ok(max_lr * step as f64 / warmup_steps as f64);
    }
    if step >= total_steps {
        return Ok(if total_steps == warmup_steps {
            max_lr
        } else {
            floor
        });
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(floor + (max_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamWConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        OptimizerState {
            hyper,
            step: 0,
            m,
            v,
        }
    }

    pub fn for_model(hyper: AdamWConfig, model: &Model) -> Self {
        OptimizerState::new(hyper, model.params().iter().map(|(_, t)| t.len()))
    }
}

/// One decoupled-weight-decay Adam update with bias correction.
///
/// `decay[i]` selects which tensors are decayed.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    decay: &[bool],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || decay.len() != params.len() {
        return Err(Error::config(
            "optimizer state does not match the parameter list",
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() {
            return Err(Error::config(format!("shape mismatch for parameter {i}")));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter {i} at entry {j}"
            )));
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let wd = if decay[i] { h.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gr;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gr * gr;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * wd * *w;
            *w -= lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub grad_accum: usize,
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
    pub adam: AdamWConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for the desk preset.
    pub fn desk() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 16,
            seq_len: 256,
            grad_accum: 1,
            max_lr: 3e-3,
            warmup_steps: 100,
            clip_norm: Some(1.0),
            adam: AdamWConfig {
                weight_decay: 0.1,
                beta2: 0.99,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }

    /// Full-scale schedule: 1024 packed sequences of 2048 tokens per step,
    /// 3e-4 peak rate after 10,000 warmup steps, for `tokens` training tokens.
    pub fn full_scale(tokens: u64, per_device_batch: usize, grad_accum: usize) -> Self {
        let batch_size = per_device_batch * 8;
        let per_step = (batch_size * grad_accum * 2048) as u64;
        TrainConfig {
            steps: tokens.div_ceil(per_step) as usize,
            batch_size,
            seq_len: 2048,
            grad_accum,
            max_lr: 3e-4,
            warmup_steps: 10_000,
            ..TrainConfig::desk()
        }
    }

    pub fn preset_125m() -> Self {
        TrainConfig::full_scale(28_000_000_000, 16, 8)
    }

    pub fn preset_1_2b() -> Self {
        TrainConfig::full_scale(128_000_000_000, 4, 32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::config("batch_size and grad_accum must be positive"));
        }
        if self.seq_len < 2 {
            return Err(Error::config("seq_len must be at least 2"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.max_lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Window indices for micro-batch `micro` of optimizer step `step`.
///
/// Each epoch visits every window once in an order drawn from
/// `(seed, epoch)`, so the schedule depends only on its inputs.
pub fn batch_indices(
    n_windows: usize,
    seed: u64,
    step: usize,
    micro: usize,
    grad_accum: usize,
    batch_size: usize,
) -> Vec<usize> {
    let mut perm_cache: Option<(usize, Vec<usize>)> = None;
    let first = (step * grad_accum + micro) * batch_size;
    (first..first + batch_size)
        .map(|g| {
            let epoch = g / n_windows;
            if perm_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n_windows).collect();
                let mix = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                perm.shuffle(&mut seeded_rng(mix));
                perm_cache = Some((epoch, perm));
            }
            perm_cache.as_ref().unwrap().1[g % n_windows]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Owns a model and its optimizer across steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::for_model(config.adam, &model);
        Ok(Trainer {
            model,
            optimizer,
            config,
            step: 0,
        })
    }

    /// Loss and summed gradients for a set of windows, each target weighted by `1/total`.
    fn micro_batch(
        &self,
        data: &Packed,
        windows: &[usize],
        total: usize,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true);
        let batch: Vec<Vec<usize>> = windows.iter().map(|&w| data.windows[w].clone()).collect();
        let targets: Vec<Option<usize>> = windows.iter().flat_map(|&w| data.targets(w)).collect();
        let logits = self.model.forward_tape(&mut tape, &vars, &batch, None)?;
        let loss = tape.cross_entropy(logits, &targets, 1.0 / total as f64)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.model.params())
            .map(|(v, (_, p))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Loss and accumulated gradients of an arbitrary list of micro-batches.
    pub fn loss_and_grads(
        &self,
        data: &Packed,
        micro_batches: &[Vec<usize>],
    ) -> Result<(f64, Vec<Tensor>)> {
        let total: usize = micro_batches
            .iter()
            .flatten()
            .map(|&w| data.targets(w).iter().flatten().count())
            .sum();
        if total == 0 {
            return Err(Error::data("batch contains no prediction targets"));
        }
        let mut loss = 0.0;
        let mut acc: Option<Vec<Tensor>> = None;
        for mb in micro_batches {
            let (l, g) = self.micro_batch(data, mb, total)?;
            loss += l;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => {
                    for (x, y) in a.iter_mut().zip(g) {
                        for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                            *p += q;
                        }
                    }
                }
            }
        }
        Ok((loss, acc.expect("at least one micro-batch")))
    }

    /// Apply one update from precomputed gradients.
    pub fn apply(&mut self, mut grads: Vec<Tensor>, lr: f64) -> Result<()> {
        if let Some(max_norm) = self.config.clip_norm {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        let decay: Vec<bool> = self
            .model
            .params()
            .iter()
            .map(|(_, t)| t.shape().len() == 2)
            .collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut params: Vec<&mut Tensor> =
            self.model.params_mut().iter_mut().map(|(_, t)| t).collect();
        adamw_step(&mut params, &grad_refs, &decay, &mut self.optimizer, lr)
    }

    /// One optimizer step over `batch_size × grad_accum` windows.
    pub fn train_step(&mut self, data: &Packed) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::data("no training windows"));
        }
        let c = &self.config;
        let micro: Vec<Vec<usize>> = (0..c.grad_accum)
            .map(|m| batch_indices(data.len(), c.seed, self.step, m, c.grad_accum, c.batch_size))
            .collect();
        let lr = lr_schedule(self.step + 1, c.warmup_steps, c.max_lr, c.steps)?;
        let (loss, grads) = self.loss_and_grads(data, &micro)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {loss} at step {}",
                self.step + 1
            )));
        }
        self.apply(grads, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr,
            loss,
        })
    }

    /// Run until `config.steps`, reporting each step.
    pub fn run(
        &mut self,
        data: &Packed,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut curve = Vec::new();
        while self.step < self.config.steps {
            let rec = self.train_step(data)?;
            on_step(self, &rec)?;
            curve.push(rec);
        }
        Ok(curve)
    }

    pub fn checkpoint(&self, vocab_hash: Option<String>) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            vocab_hash,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Trainer {
            model: ck.model,
            optimizer: ck.optimizer,
            config: ck.train,
            step: ck.step,
        }
    }
}

/// Mean loss over `windows` without updating anything.
pub fn evaluate_loss(model: &Model, data: &Packed, windows: &[usize]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0;
    for &w in windows {
        let targets = data.targets(w);
        let n = targets.iter().flatten().count();
        if n == 0 {
            continue;
        }
        let logits = model.forward_lm(&data.windows[w], None)?;
        nll += cross_entropy_lm(&logits, &targets)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::data("no targets to evaluate"));
    }
    Ok(nll / count as f64)
}

/// Worst disagreement between backprop and central differences over every
/// parameter entry of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries: usize,
}

fn lm_batch_loss(
    model: &Model,
    batch: &[Vec<usize>],
    trainable: bool,
) -> Result<(Tape, Vec<crate::autodiff::Var>, crate::autodiff::Var)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, trainable);
    let logits = model.forward_tape(&mut tape, &vars, batch, None)?;
    let targets: Vec<Option<usize>> = batch
        .iter()
        .flat_map(|seq| seq.iter().skip(1).map(|&t| Some(t)).chain([None]))
        .collect();
    let count = targets.iter().flatten().count();
    let loss = tape.cross_entropy(logits, &targets, 1.0 / count as f64)?;
    Ok((tape, vars, loss))
}

/// Full forward and backward pass of the mean next-token loss on `batch`,
/// checked entry by entry with central differences of width `step`.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn model_grad_check(model: &Model, batch: &[Vec<usize>], step: f64) -> Result<ModelGradCheck> {
    if !(step > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let (tape, vars, loss) = lm_batch_loss(model, batch, true)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(model.params())
        .map(|(v, (_, p))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let eval = |m: &Model| -> Result<f64> {
        let (tape, _, loss) = lm_batch_loss(m, batch, false)?;
        Ok(tape.value(loss).item())
    };
    let mut probe = model.clone();
    let mut report = ModelGradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries: 0,
    };
    for (k, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.params()[k].1.data()[i];
            probe.params_mut()[k].1.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.params_mut()[k].1.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.params_mut()[k].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = g.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = model.params()[k].0.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

pub fn write_loss_csv(path: &Path, curve: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for r in curve {
        out.push_str(&format!("{},{:e},{:.17e}\n", r.step, r.lr, r.loss));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IATL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-exactly.
///
/// The batch order is a pure function of `(train.seed, step)`, so the seed
/// and step counter carry the full sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub optimizer: OptimizerState,
    pub step: usize,
    pub vocab_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    optimizer_step: u64,
    vocab_hash: Option<String>,
    sampler: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }
}

impl Checkpoint {
    /// Little-endian layout: magic, version, header length + JSON header,
    /// tensor count, then `name_len name rank extents… values…` records for
    /// the parameters followed by the Adam moments.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.config.clone(),
            train: self.train.clone(),
            step: self.step,
            optimizer_step: self.optimizer.step,
            vocab_hash: self.vocab_hash.clone(),
            sampler: "chacha8 epoch permutation from (seed, step)".into(),
        };
        let header = serde_json::to_string_pretty(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        let params = self.model.params();
        put_u32(&mut out, (params.len() * 3) as u32);
        for (name, t) in params {
            put_tensor(&mut out, name, t.shape(), t.data());
        }
        for (i, (name, t)) in params.iter().enumerate() {
            put_tensor(
                &mut out,
                &format!("adam.m/{name}"),
                t.shape(),
                &self.optimizer.m[i],
            );
            put_tensor(
                &mut out,
                &format!("adam.v/{name}"),
                t.shape(),
                &self.optimizer.v[i],
            );
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            records.push(r.tensor()?);
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        if !count.is_multiple_of(3) {
            return Err(Error::Format(
                "checkpoint record count is not a multiple of 3".into(),
            ));
        }
        let n = count / 3;
        let mut params = Vec::with_capacity(n);
        for (name, shape, data) in records.drain(..n) {
            params.push((name, Tensor::new(shape, data)?));
        }
        let model = Model::from_params(header.model, params)?;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for (i, pair) in records.chunks(2).enumerate() {
            let name = &model.params()[i].0;
            if pair[0].0 != format!("adam.m/{name}") || pair[1].0 != format!("adam.v/{name}") {
                return Err(Error::Format(format!(
                    "optimizer records out of order at `{name}`"
                )));
            }
            m.push(pair[0].2.clone());
            v.push(pair[1].2.clone());
        }
        Ok(Checkpoint {
            model,
            optimizer: OptimizerState {
                hyper: header.train.adam,
                step: header.optimizer_step,
                m,
                v,
            },
            train: header.train,
            step: header.step,
            vocab_hash: header.vocab_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }

    /// Load and insist the checkpoint was trained with `vocab_hash`.
    pub fn load_with_vocab(path: &Path, vocab_hash: &str) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        match &ck.vocab_hash {
            Some(h) if h == vocab_hash => Ok(ck),
            Some(h) => Err(Error::config(format!(
                "vocabulary hash mismatch: checkpoint has {h}, vocabulary is {vocab_hash}"
            ))),
            None => Err(Error::config(
                "checkpoint does not record a vocabulary hash",
            )),
        }
    }
}
