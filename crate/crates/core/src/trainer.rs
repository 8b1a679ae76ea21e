//! Optimization loop: Adam with cosine annealing over pooled CQT frames.
//!
//! Every random draw is derived from `(seed, epoch)` for the shuffle and
//! `(seed, step)` for batch construction and dropout, so a run resumed from a
//! checkpoint replays exactly the same updates as an uninterrupted one.
//! Items of a batch are processed in fixed chunks whose partial gradients are
//! summed in chunk order, making results independent of the thread count.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::cqt::{to_db, CqtPlan};
use crate::error::{invalid, Error, Result};
use crate::losses::{self, LossConfig, LossReport, Weighting};
use crate::model::{Arch, ModelFile, Network, TrainingInfo};
use crate::pairgen::{make_batch, make_batch_mixed, AugmentConfig, CropConfig, TrainBatch};
use crate::tensor::Real;

/// Items per parallel work unit.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub betas: [f64; 2],
    pub eps_adam: f64,
    pub schedule: Schedule,
    /// Write a checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
    /// Keep every n-th step in the log.
    pub log_every: usize,
    /// Global gradient-norm clip (0 = off).
    pub grad_clip: f64,
    /// Frames taken from each clip, evenly spaced (0 = all).
    pub frames_per_clip: usize,
    /// Arithmetic used for forward and backward passes.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            lr: 1e-4,
            epochs: 50,
            betas: [0.9, 0.999],
            eps_adam: 1e-8,
            schedule: Schedule::Cosine,
            checkpoint_every: 0,
            log_every: 1,
            grad_clip: 0.0,
            frames_per_clip: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("train.batch_size must be at least 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return invalid(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return invalid("train.epochs must be at least 1");
        }
        let [b1, b2] = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return invalid("train.betas must lie in [0, 1)");
        }
        if !(self.eps_adam > 0.0) {
            return invalid("train.eps_adam must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return invalid("train.grad_clip must be non-negative");
        }
        Ok(())
    }
}

/// Cosine-annealed rate: `lr * (1 + cos(pi * step / total)) / 2`.
pub fn lr_at(step: u64, total_steps: u64, lr: f64) -> f64 {
    if total_steps == 0 {
        return lr;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr * (1.0 + (std::f64::consts::PI * s).cos()) / 2.0
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &crate::tensor::ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
pub fn adam_step(
    params: &mut crate::tensor::ParamStore,
    state: &mut AdamState,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return invalid("optimizer state does not match the parameter set");
    }
    for (i, (name, t)) in params.iter().enumerate() {
        if t.grad.len() != t.data.len() || state.m[i].len() != t.data.len() {
            return invalid(format!("missing gradient for parameter '{name}'"));
        }
    }
    state.step += 1;
    let [b1, b2] = betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, (_, t)) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..t.data.len() {
            let g = t.grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            t.data[j] = (t.data[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Pooled training frames (full `K`-bin width).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FramePool {
    pub bins: usize,
    pub db: Vec<f32>,
    /// Complex coefficients, kept only when background mixing is used.
    pub complex: Option<Vec<Complex32>>,
    /// Complex background frames to mix against.
    pub background: Option<Vec<Complex32>>,
}

fn pick_frames(n: usize, per_clip: usize) -> Vec<usize> {
    if per_clip == 0 || per_clip >= n {
        return (0..n).collect();
    }
    (0..per_clip).map(|i| (i + 1) * n / (per_clip + 1)).collect()
}

impl FramePool {
    pub fn len(&self) -> usize {
        if self.bins == 0 {
            0
        } else {
            self.db.len() / self.bins
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Transform clips and pool `per_clip` evenly spaced frames from each.
    pub fn from_clips(plan: &CqtPlan, clips: &[AudioClip], per_clip: usize, keep_complex: bool) -> Result<Self> {
        let k = plan.config().n_bins;
        let parts: Vec<Result<Vec<Complex32>>> = clips
            .par_iter()
            .map(|clip| {
                if clip.sample_rate != plan.config().sample_rate {
                    return invalid(format!("clip '{}' is not at the working rate", clip.id));
                }
                let coeffs = plan.transform_complex(&clip.samples)?;
                let n = coeffs.len() / k;
                Ok(pick_frames(n, per_clip)
                    .into_iter()
                    .flat_map(|t| coeffs[t * k..(t + 1) * k].to_vec())
                    .collect())
            })
            .collect();
        let mut complex = Vec::new();
        for p in parts {
            complex.extend(p?);
        }
        Ok(FramePool {
            bins: k,
            db: complex.iter().map(|&c| to_db(c)).collect(),
            complex: keep_complex.then_some(complex),
            background: None,
        })
    }
}

/// One logged step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub report: LossReport,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,total,inv,equiv,sce,lambda_inv,lambda_equiv,lambda_sce\n");
    for r in rows {
        let l = &r.report;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, l.total, l.inv, l.equiv, l.sce, l.lambda_inv, l.lambda_equiv, l.lambda_sce
        ));
    }
    s
}

/// Stream ids separating the random sources derived from the seed.
const STREAM_SHUFFLE: u64 = 1 << 32;
const STREAM_BATCH: u64 = 2 << 32;

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Training state: network, optimizer and progress counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub network: Network,
    /// Source of shuffles, augmentation draws and dropout masks.
    pub seed: u64,
    pub adam: AdamState,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub crop: CropConfig,
    pub epoch: usize,
    pub step: u64,
    pub log: Vec<LogRow>,
    /// Where a failing batch is written on numerical abort.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: u64,
    k: &'a [i64],
    bins: usize,
    x: &'a [f32],
    x_aug: &'a [f32],
    x_shift_aug: &'a [f32],
    report: LossReport,
}

/// Per-chunk partial sums.
struct Partial {
    grads: Vec<Vec<f64>>,
    terms: [f64; 3],
}

impl Trainer {
    pub fn new(
        network: Network,
        seed: u64,
        train: TrainConfig,
        loss: LossConfig,
        augment: AugmentConfig,
        crop: CropConfig,
    ) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        augment.validate()?;
        crop.validate()?;
        if crop.out_bins() != network.config().in_bins {
            return invalid(format!(
                "crop yields {} bins but the network takes {}",
                crop.out_bins(),
                network.config().in_bins
            ));
        }
        if network.config().out_dim != network.config().in_bins {
            // Shifts are applied to outputs in class units, which must be bins.
            return invalid("model.out_dim must equal model.in_bins for shift-based losses");
        }
        let adam = AdamState::new(&network.params);
        Ok(Trainer {
            network,
            seed,
            adam,
            train,
            loss,
            augment,
            crop,
            epoch: 0,
            step: 0,
            log: Vec::new(),
            dump_dir: None,
        })
    }

    pub fn steps_per_epoch(&self, n_frames: usize) -> u64 {
        n_frames.div_ceil(self.train.batch_size) as u64
    }

    pub fn total_steps(&self, n_frames: usize) -> u64 {
        self.train.epochs as u64 * self.steps_per_epoch(n_frames)
    }

    /// Run the remaining epochs. `on_epoch` is called after each one (for
    /// checkpointing or progress output).
    pub fn fit(
        &mut self,
        pool: &FramePool,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.train.epochs {
            self.run_epoch(pool)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, pool: &FramePool) -> Result<()> {
        let n = pool.len();
        if n == 0 {
            return invalid("training pool holds no frames");
        }
        if pool.bins != self.crop.input_bins {
            return invalid(format!(
                "pool frames have {} bins, crop expects {}",
                pool.bins, self.crop.input_bins
            ));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derived_rng(self.seed, STREAM_SHUFFLE + self.epoch as u64));
        let total = self.total_steps(n);
        for idx in order.chunks(self.train.batch_size) {
            let mut rng = derived_rng(self.seed, STREAM_BATCH + self.step);
            let batch = self.assemble(pool, idx, &mut rng)?;
            let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.gen()).collect();
            let lr = match self.train.schedule {
                Schedule::Cosine => lr_at(self.step, total, self.train.lr),
                Schedule::Constant => self.train.lr,
            };
            let report = self.step_on(&batch, &seeds, lr)?;
            if self.step % self.train.log_every.max(1) as u64 == 0 {
                self.log.push(LogRow {
                    step: self.step,
                    report,
                });
            }
            self.step += 1;
        }
        self.epoch += 1;
        Ok(())
    }

    fn assemble(&self, pool: &FramePool, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<TrainBatch> {
        let k = pool.bins;
        let mixing = self.augment.background_beta != crate::pairgen::BetaDist::None;
        match (&pool.complex, &pool.background) {
            (Some(c), Some(bg)) if mixing => {
                let frames: Vec<Complex32> = idx.iter().flat_map(|&i| c[i * k..(i + 1) * k].to_vec()).collect();
                make_batch_mixed(&frames, bg, &self.augment, &self.crop, rng)
            }
            _ if mixing => invalid("background mixing requires complex frames and a background pool"),
            _ => {
                let frames: Vec<f32> = idx.iter().flat_map(|&i| pool.db[i * k..(i + 1) * k].to_vec()).collect();
                make_batch(&frames, &self.augment, &self.crop, rng, None)
            }
        }
    }

    /// One optimization step on a prepared batch.
    pub fn step_on(&mut self, batch: &TrainBatch, dropout_seeds: &[u64], lr: f64) -> Result<LossReport> {
        let (report, grads) = match self.train.precision {
            Precision::F32 => batch_gradients::<f32>(&self.network, &self.loss, batch, dropout_seeds)?,
            Precision::F64 => batch_gradients::<f64>(&self.network, &self.loss, batch, dropout_seeds)?,
        };
        let finite = report.total.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(self.numerical_abort(batch, report));
        }
        let mut scale = 1.0;
        if self.train.grad_clip > 0.0 {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > self.train.grad_clip {
                scale = self.train.grad_clip / norm;
            }
        }
        for ((_, t), g) in self.network.params.iter_mut().zip(&grads) {
            t.grad.clear();
            t.grad.extend(g.iter().map(|v| v * scale));
        }
        adam_step(&mut self.network.params, &mut self.adam, lr, self.train.betas, self.train.eps_adam)?;
        Ok(report)
    }

    fn numerical_abort(&self, batch: &TrainBatch, report: LossReport) -> Error {
        let mut msg = format!("non-finite loss or gradient at step {} (loss {:?})", self.step, report);
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("nan_batch_step{}.json", self.step));
            let dump = NanDump {
                step: self.step,
                k: &batch.k,
                bins: batch.bins,
                x: &batch.x,
                x_aug: &batch.x_aug,
                x_shift_aug: &batch.x_shift_aug,
                report,
            };
            match serde_json::to_vec(&dump).map_err(Error::from).and_then(|b| Ok(fs::write(&path, b)?)) {
                Ok(()) => msg.push_str(&format!("; batch written to {}", path.display())),
                Err(e) => msg.push_str(&format!("; could not write batch dump: {e}")),
            }
        }
        Error::Numerical(msg)
    }

    /// Mean loss over a fixed batch with dropout off.
    pub fn validation_loss(&self, batch: &TrainBatch) -> Result<LossReport> {
        let arch = self.network.arch();
        let w = self.network.params.values::<f64>();
        let mut sums = [0.0; 3];
        let mut traces = [arch.new_trace::<f64>(), arch.new_trace::<f64>(), arch.new_trace::<f64>()];
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        for i in 0..batch.len() {
            let views = [batch.row(&batch.x, i), batch.row(&batch.x_aug, i), batch.row(&batch.x_shift_aug, i)];
            for (tr, v) in traces.iter_mut().zip(views) {
                let x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
                arch.forward(&w, &x, false, &mut rng, tr)?;
            }
            let (terms, _) = item_terms(&traces[0].probs, &traces[1].probs, &traces[2].probs, batch.k[i], &self.loss);
            for t in 0..3 {
                sums[t] += terms[t];
            }
        }
        let n = batch.len().max(1) as f64;
        losses::combine(sums.map(|s| s / n), Some([1.0; 3]), &self.loss)
    }

    /// Model file carrying provenance of this run.
    pub fn model_file(&self, cqt: crate::cqt::CqtConfig, fingerprint: &str) -> ModelFile {
        ModelFile {
            network: self.network.clone(),
            cqt,
            crop: self.crop.clone(),
            calibration: None,
            training: Some(TrainingInfo {
                fingerprint: fingerprint.to_string(),
                seed: self.seed,
                epochs_completed: self.epoch,
                steps: self.step,
                loss: self.loss.clone(),
            }),
        }
    }

    /// Model payload followed by an `ADAM` section holding the moments.
    pub fn checkpoint_bytes(&self, cqt: crate::cqt::CqtConfig, fingerprint: &str) -> Result<Vec<u8>> {
        let mut out = self.model_file(cqt, fingerprint).to_bytes()?;
        let header = serde_json::to_vec(&AdamHeader {
            adam_step: self.adam.step,
            epoch: self.epoch,
            step: self.step,
            train: self.train.clone(),
            augment: self.augment.clone(),
        })?;
        out.extend_from_slice(ADAM_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for buf in self.adam.m.iter().chain(&self.adam.v) {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, cqt: crate::cqt::CqtConfig, fingerprint: &str) -> Result<()> {
        fs::write(path, self.checkpoint_bytes(cqt, fingerprint)?)?;
        Ok(())
    }

    /// Restore a trainer from checkpoint bytes. The loss and crop settings
    /// come from the model header; training and augmentation settings from
    /// the optimizer section.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Trainer, ModelFile)> {
        let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let (file, used) = ModelFile::from_bytes_prefix(bytes)?;
        let rest = &bytes[used..];
        if rest.len() < 8 || &rest[..4] != ADAM_MAGIC {
            return Err(fmt("missing optimizer section"));
        }
        let hlen = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
        let hbytes = rest.get(8..8 + hlen).ok_or_else(|| fmt("truncated optimizer header"))?;
        let header: AdamHeader = serde_json::from_slice(hbytes).map_err(|e| fmt(&e.to_string()))?;
        let info = file.training.clone().ok_or_else(|| fmt("model header lacks training info"))?;
        let mut trainer = Trainer::new(file.network.clone(), info.seed, header.train, info.loss, header.augment, file.crop.clone())?;
        let mut pos = 8 + hlen;
        let mut read = |n: usize| -> Result<Vec<f64>> {
            let raw = rest.get(pos..pos + 8 * n).ok_or_else(|| fmt("truncated optimizer moments"))?;
            pos += 8 * n;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let sizes: Vec<usize> = trainer.network.params.iter().map(|(_, t)| t.len()).collect();
        let m = sizes.iter().map(|&n| read(n)).collect::<Result<Vec<_>>>()?;
        let v = sizes.iter().map(|&n| read(n)).collect::<Result<Vec<_>>>()?;
        if pos != rest.len() {
            return Err(fmt("trailing bytes after optimizer moments"));
        }
        trainer.adam = AdamState {
            m,
            v,
            step: header.adam_step,
        };
        trainer.epoch = header.epoch;
        trainer.step = header.step;
        Ok((trainer, file))
    }
}

const ADAM_MAGIC: &[u8; 4] = b"ADAM";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    adam_step: u64,
    epoch: usize,
    step: u64,
    train: TrainConfig,
    augment: AugmentConfig,
}

/// Loss terms of one item and their gradients, indexed `[term][branch]`
/// with terms (inv, equiv, sce) and branches (clean, augmented, shifted).
fn item_terms<T: Real>(y: &[T], yt: &[T], yk: &[T], k: i64, cfg: &LossConfig) -> ([f64; 3], [[Option<Vec<f64>>; 3]; 3]) {
    let to64 = |v: &[T]| v.iter().map(|a| a.f64()).collect::<Vec<f64>>();
    let (yt, yk) = (to64(yt), to64(yk));
    let mut terms = [0.0; 3];
    let mut g: [[Option<Vec<f64>>; 3]; 3] = Default::default();
    if cfg.use_inv {
        let y = to64(y);
        let (v, gy, gyt) = losses::loss_inv_grad(&y, &yt, cfg.eps_log);
        terms[0] = v;
        g[0][0] = Some(gy);
        g[0][1] = Some(gyt);
    }
    if cfg.use_equiv {
        let (v, a, b) = losses::loss_equiv_grad(&yt, &yk, k, cfg);
        terms[1] = v;
        g[1][1] = Some(a);
        g[1][2] = Some(b);
    }
    if cfg.use_sce {
        let (v, a, b) = losses::loss_sce_grad(&yt, &yk, k, cfg.eps_log);
        terms[2] = v;
        g[2][1] = Some(a);
        g[2][2] = Some(b);
    }
    (terms, g)
}

/// Forward the three views of item `i` into `traces`.
fn forward_item<T: Real>(
    arch: &Arch,
    w: &[Vec<T>],
    batch: &TrainBatch,
    i: usize,
    seed: u64,
    need_clean: bool,
    traces: &mut [crate::model::Trace<T>; 3],
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = [batch.row(&batch.x, i), batch.row(&batch.x_aug, i), batch.row(&batch.x_shift_aug, i)];
    let mut x = vec![T::zero(); batch.bins];
    for (b, (tr, v)) in traces.iter_mut().zip(views).enumerate() {
        if b == 0 && !need_clean {
            continue;
        }
        x.iter_mut().zip(v).for_each(|(d, &s)| *d = T::of(s as f64));
        arch.forward(w, &x, true, &mut rng, tr)?;
    }
    Ok(())
}

/// Mean loss and its parameter gradients over a batch (training mode).
pub fn batch_gradients<T: Real>(
    network: &Network,
    cfg: &LossConfig,
    batch: &TrainBatch,
    dropout_seeds: &[u64],
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    let n = batch.len();
    if n == 0 {
        return invalid("empty batch");
    }
    if dropout_seeds.len() != n {
        return invalid("one dropout seed per item is required");
    }
    let arch = network.arch();
    let w = network.params.values::<T>();
    let inv_n = 1.0 / n as f64;
    let items: Vec<usize> = (0..n).collect();

    // Balanced weighting measures each term's gradient at the output layer
    // first, then recomputes the same forwards for the weighted backward.
    let norms = if cfg.weighting == Weighting::GradBalanced {
        let out_idx = arch.output_param();
        let out_len = w[out_idx].len();
        let parts: Vec<Result<[Vec<f64>; 3]>> = items
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut traces = [arch.new_trace::<T>(), arch.new_trace::<T>(), arch.new_trace::<T>()];
                let mut acc: [Vec<T>; 3] = Default::default();
                acc.iter_mut().for_each(|a| *a = vec![T::zero(); out_len]);
                for &i in chunk {
                    forward_item(arch, &w, batch, i, dropout_seeds[i], cfg.use_inv, &mut traces)?;
                    let (_, g) = item_terms(&traces[0].probs, &traces[1].probs, &traces[2].probs, batch.k[i], cfg);
                    for t in 0..3 {
                        for b in 0..3 {
                            if let Some(gp) = &g[t][b] {
                                let gp: Vec<T> = gp.iter().map(|&v| T::of(v * inv_n)).collect();
                                arch.output_grad(&w, &traces[b], &gp, &mut acc[t]);
                            }
                        }
                    }
                }
                Ok(acc.map(|a| a.iter().map(|v| v.f64()).collect()))
            })
            .collect();
        let mut total = [vec![0.0; out_len], vec![0.0; out_len], vec![0.0; out_len]];
        for p in parts {
            let p = p?;
            for t in 0..3 {
                total[t].iter_mut().zip(&p[t]).for_each(|(a, b)| *a += b);
            }
        }
        Some(total.map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()))
    } else {
        None
    };
    let lambdas = losses::lambdas(cfg, norms)?;

    let parts: Vec<Result<Partial>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut traces = [arch.new_trace::<T>(), arch.new_trace::<T>(), arch.new_trace::<T>()];
            let mut grads = arch.zero_grads::<T>();
            let mut terms = [0.0; 3];
            for &i in chunk {
                forward_item(arch, &w, batch, i, dropout_seeds[i], cfg.use_inv, &mut traces)?;
                let (tv, g) = item_terms(&traces[0].probs, &traces[1].probs, &traces[2].probs, batch.k[i], cfg);
                for t in 0..3 {
                    terms[t] += tv[t];
                }
                for b in 0..3 {
                    let mut gp = vec![0.0f64; batch.bins];
                    let mut any = false;
                    for t in 0..3 {
                        if let Some(gt) = &g[t][b] {
                            any = true;
                            let s = lambdas[t] * inv_n;
                            gp.iter_mut().zip(gt).for_each(|(a, v)| *a += s * v);
                        }
                    }
                    if any {
                        let gp: Vec<T> = gp.iter().map(|&v| T::of(v)).collect();
                        arch.backward(&w, &traces[b], &gp, &mut grads, None);
                    }
                }
            }
            Ok(Partial {
                grads: grads.into_iter().map(|g| g.into_iter().map(|v| v.f64()).collect()).collect(),
                terms,
            })
        })
        .collect();

    let mut grads: Vec<Vec<f64>> = arch.zero_grads::<f64>();
    let mut sums = [0.0; 3];
    for p in parts {
        let p = p?;
        for (a, b) in grads.iter_mut().zip(&p.grads) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for t in 0..3 {
            sums[t] += p.terms[t];
        }
    }
    let report = losses::combine(sums.map(|s| s * inv_n), norms, cfg)?;
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};

    fn scalar_store(w: f32) -> ParamStore {
        let mut ps = ParamStore::new();
        let mut t = Tensor::zeros(&[1]);
        t.data[0] = w;
        ps.add("w", t).unwrap();
        ps
    }

    #[test]
    fn adam_zero_gradient() {
        let mut ps = scalar_store(1.5);
        let mut st = AdamState::new(&ps);
        ps.zero_grad();
        adam_step(&mut ps, &mut st, 0.1, [0.9, 0.999], 1e-8).unwrap();
        assert_eq!(ps.at(0).data[0], 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step() {
        let mut ps = scalar_store(0.0);
        let mut st = AdamState::new(&ps);
        ps.at_mut(0).grad = vec![1.0];
        adam_step(&mut ps, &mut st, 0.1, [0.9, 0.999], 1e-8).unwrap();
        assert!((ps.at(0).data[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_quadratic() {
        let mut ps = scalar_store(0.0);
        let mut st = AdamState::new(&ps);
        for _ in 0..100 {
            let w = ps.at(0).data[0] as f64;
            ps.at_mut(0).grad = vec![w - 3.0];
            adam_step(&mut ps, &mut st, 0.1, [0.9, 0.999], 1e-8).unwrap();
        }
        assert!((ps.at(0).data[0] - 3.0).abs() < 0.2, "{}", ps.at(0).data[0]);
    }

    #[test]
    fn adam_missing_gradient() {
        let mut ps = scalar_store(0.0);
        let mut st = AdamState::new(&ps);
        ps.at_mut(0).grad.clear();
        assert!(adam_step(&mut ps, &mut st, 0.1, [0.9, 0.999], 1e-8).is_err());
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(lr_at(0, 100, 1e-3), 1e-3);
        assert!(lr_at(100, 100, 1e-3).abs() < 1e-18);
        assert!((lr_at(50, 100, 1e-3) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn frame_picking() {
        assert_eq!(pick_frames(5, 0), vec![0, 1, 2, 3, 4]);
        assert_eq!(pick_frames(100, 3), vec![25, 50, 75]);
    }
}
