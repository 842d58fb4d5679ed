//! Pre-training loop, AdamW with warmup + cosine schedule, checkpoint
//! persistence, and the three adaptation modes (zero-shot, fine-tune,
//! from-scratch).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etl::TimeSeriesRecord;
use crate::features::{sample_windows, window_batch_at};
use crate::heads::head_loss;
use crate::model::{build_model, forward, ForwardMode, ModelConfig};
use crate::tensor::{Graph, ParamStore};
use crate::util::Crc32;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP: f64 = 1.0;
const NAN_ABORT_STREAK: usize = 10;

/// Learning-rate grid searched during fine-tuning.
pub const FINETUNE_LR_GRID: [f64; 5] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 100_000,
            batch_size: 512,
            peak_lr: 1e-3,
            warmup_steps: 10_000,
            weight_decay: 0.1,
            seed: 0,
            eval_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.peak_lr <= 0.0 {
            return Err(Error::Config(
                "iterations, batch_size, and peak_lr must be positive".into(),
            ));
        }
        if self.warmup_steps > self.iterations {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds iterations {}",
                self.warmup_steps, self.iterations
            )));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr`, then cosine annealing to zero.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step > cfg.iterations {
        return 0.0;
    }
    if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.iterations - cfg.warmup_steps) as f64;
    let t = (step - cfg.warmup_steps) as f64 / span;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
    pub skipped: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        OptimizerState {
            m: store.params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: store.params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            skipped: 0,
        }
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`. Returns
/// the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in &store.params {
        for &g in &p.grad {
            sq += g as f64 * g as f64;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for p in &mut store.params {
            for g in &mut p.grad {
                *g *= scale;
            }
        }
    }
    norm
}

/// One AdamW step with decoupled weight decay applied before the Adam
/// update (decay mask per parameter). Returns false if gradients were
/// non-finite and the step was skipped.
pub fn adamw_step(
    store: &mut ParamStore<f32>,
    state: &mut OptimizerState,
    lr: f64,
    wd: f64,
) -> bool {
    let finite = store
        .params
        .iter()
        .all(|p| p.grad.iter().all(|g| g.is_finite()));
    if !finite {
        state.skipped += 1;
        return false;
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for id in 0..store.params.len() {
        let decay = store.params[id].decay;
        let grad = std::mem::take(&mut store.params[id].grad);
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        let vals = store.value_mut(id);
        for i in 0..vals.len() {
            let g = grad[i] as f64;
            if decay && wd > 0.0 {
                vals[i] -= (lr * wd) as f32 * vals[i];
            }
            m[i] = (ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * g) as f32;
            v[i] = (ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * g * g) as f32;
            let mhat = m[i] as f64 / bc1;
            let vhat = v[i] as f64 / bc2;
            vals[i] -= (lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
        }
        store.params[id].grad = grad;
    }
    store.zero_grads();
    true
}

#[derive(Debug, Serialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

pub struct PretrainOutcome {
    pub store: ParamStore<f32>,
    pub opt: OptimizerState,
    pub losses: Vec<f64>,
    pub val_losses: Vec<(usize, f64)>,
}

/// Run (or resume) the pre-training loop. Batches are keyed by the step
/// counter, so a resumed run replays the exact remaining schedule.
/// `stop_at` ends the loop early without shortening the LR schedule
/// (checkpoint-and-resume).
pub fn pretrain(
    collection: &[TimeSeriesRecord],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    resume: Option<(ParamStore<f32>, OptimizerState, usize)>,
    stop_at: Option<usize>,
    mut log: Option<&mut dyn Write>,
) -> Result<PretrainOutcome> {
    train_cfg.validate()?;
    let (mut store, mut opt, start_step) = match resume {
        Some((s, o, k)) => (s, o, k),
        None => {
            let store = build_model::<f32>(model_cfg, train_cfg.seed);
            let opt = OptimizerState::new(&store);
            (store, opt, 0)
        }
    };
    let t0 = Instant::now();
    let mut losses = Vec::with_capacity(train_cfg.iterations - start_step);
    let mut val_losses = Vec::new();
    let mut nan_streak = 0usize;
    let end = stop_at.unwrap_or(train_cfg.iterations).min(train_cfg.iterations);
    for step in start_step..end {
        let batch = sample_windows(
            collection,
            train_cfg.batch_size,
            model_cfg.l,
            model_cfg.h,
            train_cfg.seed,
            step as u64,
        )?;
        let mut g: Graph<f32> = Graph::new();
        let out = forward(&mut g, &store, model_cfg, &batch, ForwardMode::Train)?;
        let y = g.constant(
            batch.future_targets.clone(),
            vec![batch.b, batch.h, batch.d_y],
        );
        let loss = head_loss(&mut g, &out, y, model_cfg.d_y);
        let loss_val = g.value(loss)[0] as f64;
        if !loss_val.is_finite() {
            nan_streak += 1;
            if nan_streak >= NAN_ABORT_STREAK {
                return Err(Error::Numeric(format!(
                    "loss non-finite for {NAN_ABORT_STREAK} consecutive steps (step {step})"
                )));
            }
            losses.push(loss_val);
            continue;
        }
        nan_streak = 0;
        g.backward(loss)?;
        g.collect_grads(&mut store);
        drop(g);
        let grad_norm = clip_grad_norm(&mut store, GRAD_CLIP);
        let lr = lr_at(step + 1, train_cfg);
        adamw_step(&mut store, &mut opt, lr, train_cfg.weight_decay);
        losses.push(loss_val);
        if let Some(w) = log.as_deref_mut() {
            let entry = TrainLogEntry {
                step,
                loss: loss_val,
                lr,
                grad_norm,
                wallclock_s: t0.elapsed().as_secs_f64(),
            };
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
        }
        if train_cfg.eval_every > 0 && (step + 1) % train_cfg.eval_every == 0 {
            let vl = validation_loss(&store, model_cfg, collection)?;
            val_losses.push((step + 1, vl));
        }
    }
    Ok(PretrainOutcome { store, opt, losses, val_losses })
}

/// Mean head loss over the last horizon of every series (pooled).
pub fn validation_loss(
    store: &ParamStore<f32>,
    model_cfg: &ModelConfig,
    collection: &[TimeSeriesRecord],
) -> Result<f64> {
    let batch = window_batch_at(collection, model_cfg.l, model_cfg.h, 0)?;
    let mut g: Graph<f32> = Graph::new();
    let out = forward(&mut g, store, model_cfg, &batch, ForwardMode::Train)?;
    let y = g.constant(
        batch.future_targets.clone(),
        vec![batch.b, batch.h, batch.d_y],
    );
    let loss = head_loss(&mut g, &out, y, model_cfg.d_y);
    Ok(g.value(loss)[0] as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    /// (learning rate, validation loss) per grid point; NaN marks divergence.
    pub grid: Vec<(f64, f64)>,
    pub selected_lr: Option<f64>,
    pub fell_back: bool,
}

/// Fine-tune on the train region of the train-test series, selecting the
/// learning rate by loss on the last horizon before the test region. If every
/// grid point diverges, the pre-trained parameters are returned unchanged.
pub fn finetune(
    base: &ParamStore<f32>,
    model_cfg: &ModelConfig,
    traintest: &[TimeSeriesRecord],
    train_cfg: &TrainConfig,
    test_len: usize,
    lr_grid: &[f64],
) -> Result<(ParamStore<f32>, FinetuneReport)> {
    if lr_grid.is_empty() {
        return Err(Error::Config("empty fine-tune learning-rate grid".into()));
    }
    // train region = series minus the held-out test range; validation = last
    // horizon of the train region
    let trainval: Vec<TimeSeriesRecord> = traintest
        .iter()
        .filter_map(|r| r.truncated_at(r.end() - chrono::Duration::seconds(r.freq_seconds as i64 * test_len as i64)))
        .collect();
    if trainval.iter().any(|r| r.len() < model_cfg.h + 2) || trainval.is_empty() {
        return Err(Error::contract("empty or too-short train region for fine-tuning"));
    }
    let train: Vec<TimeSeriesRecord> = trainval
        .iter()
        .filter_map(|r| {
            r.truncated_at(r.end() - chrono::Duration::seconds(r.freq_seconds as i64 * model_cfg.h as i64))
        })
        .collect();

    let mut report = FinetuneReport { grid: Vec::new(), selected_lr: None, fell_back: false };
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    for &lr in lr_grid {
        let cfg = TrainConfig {
            peak_lr: lr,
            warmup_steps: (train_cfg.iterations / 10).min(train_cfg.warmup_steps),
            ..train_cfg.clone()
        };
        let opt = OptimizerState::new(base);
        let outcome = pretrain(&train, model_cfg, &cfg, Some((base.clone(), opt, 0)), None, None);
        let (val, store) = match outcome {
            Ok(o) => {
                // validate by forecasting the last horizon of the train region
                let batch = window_batch_at(&trainval, model_cfg.l, model_cfg.h, 0)?;
                let mut g: Graph<f32> = Graph::new();
                match forward(&mut g, &o.store, model_cfg, &batch, ForwardMode::Train) {
                    Ok(out) => {
                        let y = g.constant(
                            batch.future_targets.clone(),
                            vec![batch.b, batch.h, batch.d_y],
                        );
                        let loss = head_loss(&mut g, &out, y, model_cfg.d_y);
                        let v = g.value(loss)[0] as f64;
                        drop(g);
                        (v, Some(o.store))
                    }
                    Err(_) => (f64::NAN, None),
                }
            }
            Err(_) => (f64::NAN, None),
        };
        report.grid.push((lr, val));
        if val.is_finite() {
            if let Some(store) = store {
                if best.as_ref().is_none_or(|(b, _)| val < *b) {
                    best = Some((val, store));
                    report.selected_lr = Some(lr);
                }
            }
        }
    }
    match best {
        Some((_, store)) => Ok((store, report)),
        None => {
            report.fell_back = true;
            Ok((base.clone(), report))
        }
    }
}

const CKPT_MAGIC: &[u8; 6] = b"CLOPS1";
const CKPT_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    step: u64,
    skipped: u64,
    has_optimizer: bool,
}

pub struct Checkpoint {
    pub model: ModelConfig,
    pub store: ParamStore<f32>,
    pub opt: Option<OptimizerState>,
    pub step: u64,
}

fn write_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32], decay: bool) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(decay as u8);
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize model parameters (and optionally optimizer moments) to the
/// binary checkpoint format. Writes via a `.tmp` file and atomic rename.
pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    store: &ParamStore<f32>,
    opt: Option<&OptimizerState>,
    step: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.clone(),
        step,
        skipped: opt.map_or(0, |o| o.skipped),
        has_optimizer: opt.is_some(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.push(CKPT_VERSION);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let n_records = store.params.len() * if opt.is_some() { 3 } else { 1 };
    buf.extend_from_slice(&(n_records as u32).to_le_bytes());
    for p in &store.params {
        write_record(&mut buf, &p.name, &p.shape, &p.value, p.decay);
    }
    if let Some(o) = opt {
        for (i, p) in store.params.iter().enumerate() {
            write_record(&mut buf, &format!("opt.m.{}", p.name), &p.shape, &o.m[i], false);
            write_record(&mut buf, &format!("opt.v.{}", p.name), &p.shape, &o.v[i], false);
        }
    }
    buf.extend_from_slice(&Crc32::of(&buf).to_le_bytes());
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(&buf)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    if buf.len() < CKPT_MAGIC.len() + 1 + 4 + 4 {
        return Err(Error::Checkpoint("file too small".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored_crc = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if Crc32::of(body) != stored_crc {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(6)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.take(1)?[0];
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let json_len = c.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(json_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let n_records = c.u32()? as usize;
    let mut store: ParamStore<f32> = ParamStore::new();
    let mut opt_m: Vec<(String, Vec<f32>)> = Vec::new();
    let mut opt_v: Vec<(String, Vec<f32>)> = Vec::new();
    for _ in 0..n_records {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad record name: {e}")))?;
        let decay = c.take(1)?[0] != 0;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = c.take(n * 4)?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(rest) = name.strip_prefix("opt.m.") {
            opt_m.push((rest.to_string(), values));
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            opt_v.push((rest.to_string(), values));
        } else {
            store.add(&name, shape, values, decay);
        }
    }
    let opt = if meta.has_optimizer {
        let mut m = vec![Vec::new(); store.params.len()];
        let mut v = vec![Vec::new(); store.params.len()];
        for (name, vals) in opt_m {
            let id = store
                .id_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("orphan moment '{name}'")))?;
            m[id] = vals;
        }
        for (name, vals) in opt_v {
            let id = store
                .id_of(&name)
                .ok_or_else(|| Error::Checkpoint(format!("orphan moment '{name}'")))?;
            v[id] = vals;
        }
        Some(OptimizerState { m, v, step: meta.step, skipped: meta.skipped })
    } else {
        None
    };
    Ok(Checkpoint { model: meta.model, store, opt, step: meta.step })
}
