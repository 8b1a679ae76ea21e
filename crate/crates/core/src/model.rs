//! The pitch network and its on-disk form.
//!
//! ```text
//! x (F bins) -> layernorm -> conv+skip (x residual_layers) -> conv ... conv
//!   -> flatten channel-major -> Toeplitz fc (d classes) -> softmax
//! ```
//!
//! Every conv except the last is followed by leaky ReLU and dropout. All
//! layers before the output commute with bin translation on interior bins,
//! and the Toeplitz layer is a correlation, so the whole map is translation
//! equivariant away from the frame edges.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cqt::CqtConfig;
use crate::error::{invalid, Error, Result};
use crate::losses::LossConfig;
use crate::pairgen::CropConfig;
use crate::pitch_head::Calibration;
use crate::tensor::{
    axpy, dense_backward, dense_forward, dot, dropout_backward, dropout_forward, layernorm_backward,
    layernorm_forward, leaky_relu_backward, leaky_relu_forward, softmax_backward, softmax_forward,
    Conv1d, ParamStore, Real, Tensor, ToeplitzFc,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input bins `F`.
    pub in_bins: usize,
    /// Output channels of each conv, in order.
    pub conv_channels: Vec<usize>,
    /// Kernel size of each conv (odd).
    pub kernel_sizes: Vec<usize>,
    /// Leading convs wrapped in an additive skip connection.
    pub residual_layers: usize,
    /// Output classes `d`.
    pub out_dim: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Toeplitz output layer; `false` uses an unstructured dense matrix.
    pub toeplitz: bool,
    pub layernorm_eps: f64,
}

impl Default for ModelConfig {
    /// Reduced-width plan sized for real-time single-core inference.
    fn default() -> Self {
        ModelConfig {
            in_bins: 265,
            conv_channels: vec![8, 8, 8, 8, 6, 3],
            kernel_sizes: vec![15, 15, 1, 1, 1, 1],
            residual_layers: 2,
            out_dim: 265,
            dropout: 0.2,
            leaky_slope: 0.3,
            toeplitz: true,
            layernorm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Full-width plan (about 28.8k parameters).
    pub fn wide() -> Self {
        ModelConfig {
            conv_channels: vec![40, 40, 30, 30, 10, 3],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bins == 0 || self.out_dim == 0 {
            return invalid("model.in_bins and model.out_dim must be positive");
        }
        if self.conv_channels.is_empty() {
            return invalid("model.conv_channels must list at least one conv");
        }
        if self.conv_channels.len() != self.kernel_sizes.len() {
            return invalid(format!(
                "model.conv_channels has {} entries but model.kernel_sizes has {}",
                self.conv_channels.len(),
                self.kernel_sizes.len()
            ));
        }
        if self.conv_channels.contains(&0) {
            return invalid("model.conv_channels entries must be positive");
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return invalid(format!("model.kernel_sizes entry {k} is not odd"));
        }
        if self.residual_layers > self.conv_channels.len() {
            return invalid("model.residual_layers exceeds the number of convs");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("model.dropout {} outside [0, 1)", self.dropout));
        }
        if !self.leaky_slope.is_finite() {
            return invalid("model.leaky_slope must be finite");
        }
        if !(self.layernorm_eps > 0.0) {
            return invalid("model.layernorm_eps must be positive");
        }
        Ok(())
    }

    /// Half-width of the conv stack's receptive field, in bins.
    pub fn receptive_margin(&self) -> usize {
        self.kernel_sizes.iter().map(|k| k / 2).sum()
    }

    /// Channels entering the output layer.
    pub fn final_channels(&self) -> usize {
        *self.conv_channels.last().unwrap_or(&1)
    }
}

/// Exact number of scalars in the network for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(Arch::new(cfg)?.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Skip {
    None,
    Identity,
    Project(usize),
}

#[derive(Debug, Clone)]
struct ConvSpec {
    conv: Conv1d,
    weight: usize,
    bias: usize,
    skip: Skip,
    activate: bool,
}

#[derive(Debug, Clone, Copy)]
enum OutputLayer {
    Toeplitz(ToeplitzFc, usize),
    Dense { n_in: usize, n_out: usize, weight: usize },
}

/// Parameter layout and layer wiring for one [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Arch {
    config: ModelConfig,
    convs: Vec<ConvSpec>,
    output: OutputLayer,
    shapes: Vec<(String, Vec<usize>)>,
}

const LN_GAIN: usize = 0;
const LN_BIAS: usize = 1;

impl Arch {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.in_bins;
        let mut shapes = vec![("ln.gain".to_string(), vec![f]), ("ln.bias".to_string(), vec![f])];
        let mut convs = Vec::new();
        let mut c_in = 1;
        let n_conv = cfg.conv_channels.len();
        for (l, (&c_out, &ks)) in cfg.conv_channels.iter().zip(&cfg.kernel_sizes).enumerate() {
            let conv = Conv1d::new(c_in, c_out, ks, f)?;
            let weight = shapes.len();
            shapes.push((format!("conv{l}.weight"), vec![c_out, c_in, ks]));
            let bias = shapes.len();
            shapes.push((format!("conv{l}.bias"), vec![c_out]));
            let skip = if l >= cfg.residual_layers {
                Skip::None
            } else if c_in == c_out {
                Skip::Identity
            } else {
                shapes.push((format!("conv{l}.skip"), vec![c_out, c_in]));
                Skip::Project(shapes.len() - 1)
            };
            convs.push(ConvSpec {
                conv,
                weight,
                bias,
                skip,
                activate: l + 1 < n_conv,
            });
            c_in = c_out;
        }
        let n_in = c_in * f;
        let output = if cfg.toeplitz {
            let fc = ToeplitzFc::new(n_in, cfg.out_dim)?;
            shapes.push(("fc.diagonals".to_string(), vec![fc.n_diagonals()]));
            OutputLayer::Toeplitz(fc, shapes.len() - 1)
        } else {
            shapes.push(("fc.weight".to_string(), vec![cfg.out_dim, n_in]));
            OutputLayer::Dense {
                n_in,
                n_out: cfg.out_dim,
                weight: shapes.len() - 1,
            }
        };
        Ok(Arch {
            config: cfg.clone(),
            convs,
            output,
            shapes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    /// Index of the output-layer parameter (the last shared tensor).
    pub fn output_param(&self) -> usize {
        match self.output {
            OutputLayer::Toeplitz(_, i) => i,
            OutputLayer::Dense { weight, .. } => weight,
        }
    }

    /// Freshly initialized parameters: conv, skip and output weights uniform
    /// in `+-sqrt(1 / fan_in)`, biases zero, layernorm gain one.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (idx, (name, shape)) in self.shapes.iter().enumerate() {
            let mut t = Tensor::zeros(shape);
            let fan_in = match idx {
                LN_GAIN => {
                    t.data.fill(1.0);
                    None
                }
                LN_BIAS => None,
                _ if name.ends_with(".bias") => None,
                _ if name.ends_with(".weight") && name.starts_with("conv") => Some(shape[1] * shape[2]),
                _ if name.ends_with(".skip") => Some(shape[1]),
                _ => Some(match self.output {
                    OutputLayer::Toeplitz(fc, _) => fc.n_in,
                    OutputLayer::Dense { n_in, .. } => n_in,
                }),
            };
            if let Some(fan_in) = fan_in {
                let bound = (1.0 / fan_in as f64).sqrt();
                t.data
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-bound..bound) as f32);
            }
            store.add(name.clone(), t).expect("layout names are unique");
        }
        store
    }

    fn check_params(&self, store: &ParamStore) -> Result<()> {
        if store.len() != self.shapes.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                self.shapes.len(),
                store.len()
            )));
        }
        for ((name, shape), (pname, t)) in self.shapes.iter().zip(store.iter()) {
            if name != pname || *shape != t.shape {
                return Err(Error::Format(format!(
                    "parameter '{pname}' {:?} does not match layout '{name}' {:?}",
                    t.shape, shape
                )));
            }
        }
        Ok(())
    }

    pub fn new_trace<T: Real>(&self) -> Trace<T> {
        let f = self.config.in_bins;
        Trace {
            input: vec![T::zero(); f],
            stats: (T::zero(), T::one()),
            normed: vec![T::zero(); f],
            layers: self
                .convs
                .iter()
                .map(|c| {
                    let n = c.conv.c_out * f;
                    LayerTrace {
                        z: vec![T::zero(); n],
                        act: vec![T::zero(); if c.activate { n } else { 0 }],
                        mask: vec![T::zero(); if c.activate { n } else { 0 }],
                        out: vec![T::zero(); n],
                    }
                })
                .collect(),
            logits: vec![T::zero(); self.config.out_dim],
            probs: vec![T::zero(); self.config.out_dim],
        }
    }

    /// Forward one frame, recording everything the backward pass needs.
    /// `rng` drives dropout and is only read in training mode.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        w: &[Vec<T>],
        x: &[T],
        training: bool,
        rng: &mut R,
        tr: &mut Trace<T>,
    ) -> Result<()> {
        let f = self.config.in_bins;
        if x.len() != f {
            return invalid(format!("input has {} bins, model expects {f}", x.len()));
        }
        tr.input.copy_from_slice(x);
        tr.stats = layernorm_forward(x, &w[LN_GAIN], &w[LN_BIAS], self.config.layernorm_eps, &mut tr.normed);
        let slope = T::of(self.config.leaky_slope);
        for (l, spec) in self.convs.iter().enumerate() {
            let (prev, rest) = tr.layers.split_at_mut(l);
            let h: &[T] = if l == 0 { &tr.normed } else { &prev[l - 1].out };
            let lt = &mut rest[0];
            spec.conv.forward(h, &w[spec.weight], &w[spec.bias], &mut lt.z);
            if spec.activate {
                leaky_relu_forward(&lt.z, slope, &mut lt.act);
                dropout_forward(&lt.act, self.config.dropout, training, rng, &mut lt.mask, &mut lt.out)?;
            } else {
                lt.out.copy_from_slice(&lt.z);
            }
            match spec.skip {
                Skip::None => {}
                Skip::Identity => lt.out.iter_mut().zip(h).for_each(|(o, &v)| *o = *o + v),
                Skip::Project(p) => project_forward(&w[p], h, spec.conv.c_in, spec.conv.c_out, f, &mut lt.out),
            }
        }
        let feat: &[T] = match tr.layers.last() {
            Some(lt) => &lt.out,
            None => &tr.normed,
        };
        match self.output {
            OutputLayer::Toeplitz(fc, i) => fc.forward(feat, &w[i], &mut tr.logits),
            OutputLayer::Dense { n_out, weight, .. } => dense_forward(feat, &w[weight], n_out, &mut tr.logits),
        }
        softmax_forward(&tr.logits, &mut tr.probs);
        Ok(())
    }

    /// Accumulate parameter gradients of a loss whose gradient with respect
    /// to the output probabilities is `gprobs`. `gx`, when given, receives
    /// the gradient with respect to the input frame.
    pub fn backward<T: Real>(
        &self,
        w: &[Vec<T>],
        tr: &Trace<T>,
        gprobs: &[T],
        grads: &mut [Vec<T>],
        gx: Option<&mut [T]>,
    ) {
        let f = self.config.in_bins;
        let slope = T::of(self.config.leaky_slope);
        let mut glogits = vec![T::zero(); tr.logits.len()];
        softmax_backward(&tr.probs, gprobs, &mut glogits);

        let feat: &[T] = match tr.layers.last() {
            Some(lt) => &lt.out,
            None => &tr.normed,
        };
        let mut g = vec![T::zero(); feat.len()];
        match self.output {
            OutputLayer::Toeplitz(fc, i) => fc.backward(feat, &w[i], &glogits, Some(&mut g), &mut grads[i]),
            OutputLayer::Dense { n_out, weight, .. } => {
                dense_backward(feat, &w[weight], n_out, &glogits, Some(&mut g), &mut grads[weight])
            }
        }

        for (l, spec) in self.convs.iter().enumerate().rev() {
            let lt = &tr.layers[l];
            let h: &[T] = if l == 0 { &tr.normed } else { &tr.layers[l - 1].out };
            let mut gh = vec![T::zero(); h.len()];
            match spec.skip {
                Skip::None => {}
                Skip::Identity => gh.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                Skip::Project(p) => {
                    project_backward(&w[p], h, &g, spec.conv.c_in, spec.conv.c_out, f, &mut gh, &mut grads[p])
                }
            }
            let gz = if spec.activate {
                let mut ga = vec![T::zero(); g.len()];
                dropout_backward(&lt.mask, &g, &mut ga);
                let mut gz = vec![T::zero(); g.len()];
                leaky_relu_backward(&lt.z, slope, &ga, &mut gz);
                gz
            } else {
                g
            };
            let (gw, gb) = two_mut(grads, spec.weight, spec.bias);
            spec.conv.backward(h, &w[spec.weight], &gz, Some(&mut gh), gw, gb);
            g = gh;
        }

        let (gg, gbias) = two_mut(grads, LN_GAIN, LN_BIAS);
        layernorm_backward(&tr.input, &w[LN_GAIN], tr.stats, &g, gx, gg, gbias);
    }

    /// Gradient of the output-layer parameters only, for a given
    /// probability gradient. Used to measure per-term gradient norms.
    pub fn output_grad<T: Real>(&self, w: &[Vec<T>], tr: &Trace<T>, gprobs: &[T], out: &mut [T]) {
        let mut glogits = vec![T::zero(); tr.logits.len()];
        softmax_backward(&tr.probs, gprobs, &mut glogits);
        let feat: &[T] = match tr.layers.last() {
            Some(lt) => &lt.out,
            None => &tr.normed,
        };
        match self.output {
            OutputLayer::Toeplitz(fc, i) => fc.backward(feat, &w[i], &glogits, None, out),
            OutputLayer::Dense { n_out, weight, .. } => {
                dense_backward(feat, &w[weight], n_out, &glogits, None, out)
            }
        }
    }

    pub fn zero_grads<T: Real>(&self) -> Vec<Vec<T>> {
        self.shapes
            .iter()
            .map(|(_, s)| vec![T::zero(); s.iter().product()])
            .collect()
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// `out[co] += sum_ci p[co, ci] * h[ci]` over bins.
fn project_forward<T: Real>(p: &[T], h: &[T], c_in: usize, c_out: usize, n: usize, out: &mut [T]) {
    for co in 0..c_out {
        for ci in 0..c_in {
            axpy(p[co * c_in + ci], &h[ci * n..(ci + 1) * n], &mut out[co * n..(co + 1) * n]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn project_backward<T: Real>(
    p: &[T],
    h: &[T],
    g: &[T],
    c_in: usize,
    c_out: usize,
    n: usize,
    gh: &mut [T],
    gp: &mut [T],
) {
    for co in 0..c_out {
        let gc = &g[co * n..(co + 1) * n];
        for ci in 0..c_in {
            gp[co * c_in + ci] = gp[co * c_in + ci] + dot(gc, &h[ci * n..(ci + 1) * n]);
            axpy(p[co * c_in + ci], gc, &mut gh[ci * n..(ci + 1) * n]);
        }
    }
}

#[derive(Debug, Clone)]
struct LayerTrace<T> {
    z: Vec<T>,
    act: Vec<T>,
    mask: Vec<T>,
    out: Vec<T>,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    input: Vec<T>,
    stats: (T, T),
    normed: Vec<T>,
    layers: Vec<LayerTrace<T>>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Real> Trace<T> {
    /// Inputs of every leaky ReLU, in layer order.
    pub fn pre_activations(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .filter(|l| !l.act.is_empty())
            .flat_map(|l| l.z.iter().copied())
    }
}

/// Probability vector over pitch classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchDistribution {
    pub probs: Vec<f32>,
}

impl PitchDistribution {
    /// Index of the largest probability (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn confidence(&self) -> f32 {
        self.probs[self.argmax()]
    }
}

/// Network parameters plus wiring.
#[derive(Debug, Clone)]
pub struct Network {
    arch: Arch,
    pub params: ParamStore,
}

impl Network {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let arch = Arch::new(cfg)?;
        let params = arch.init_params(seed);
        Ok(Network { arch, params })
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let arch = Arch::new(cfg)?;
        arch.check_params(&params)?;
        Ok(Network { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn param_count(&self) -> usize {
        self.params.n_scalars()
    }

    /// Single frame in eval mode.
    pub fn predict(&self, x: &[f32]) -> Result<PitchDistribution> {
        let w = self.params.values::<f32>();
        let mut tr = self.arch.new_trace::<f32>();
        self.arch.forward(&w, x, false, &mut rand::rngs::mock::StepRng::new(0, 0), &mut tr)?;
        Ok(PitchDistribution { probs: tr.probs })
    }

    /// Single frame, optionally in training mode (dropout on).
    pub fn forward<R: Rng + ?Sized>(&self, x: &[f32], training: bool, rng: &mut R) -> Result<PitchDistribution> {
        let w = self.params.values::<f32>();
        let mut tr = self.arch.new_trace::<f32>();
        self.arch.forward(&w, x, training, rng, &mut tr)?;
        Ok(PitchDistribution { probs: tr.probs })
    }

    /// Eval-mode forward over `n x F` frames. Work is split into fixed
    /// chunks so results do not depend on the thread count.
    pub fn predict_batch(&self, frames: &[f32]) -> Result<Vec<PitchDistribution>> {
        let f = self.config().in_bins;
        if frames.len() % f != 0 {
            return invalid(format!("frame buffer length {} is not a multiple of {f}", frames.len()));
        }
        let w = self.params.values::<f32>();
        let chunks: Vec<Result<Vec<PitchDistribution>>> = frames
            .par_chunks(f * 32)
            .map(|chunk| {
                let mut tr = self.arch.new_trace::<f32>();
                let mut rng = rand::rngs::mock::StepRng::new(0, 0);
                chunk
                    .chunks_exact(f)
                    .map(|x| {
                        self.arch.forward(&w, x, false, &mut rng, &mut tr)?;
                        Ok(PitchDistribution {
                            probs: tr.probs.clone(),
                        })
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(frames.len() / f);
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }
}

/// Provenance of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingInfo {
    /// Hex digest of the canonical run configuration.
    pub fingerprint: String,
    pub seed: u64,
    pub epochs_completed: usize,
    pub steps: u64,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format_version: u32,
    model: ModelConfig,
    cqt: CqtConfig,
    crop: CropConfig,
    calibration: Option<Calibration>,
    training: Option<TrainingInfo>,
    params: Vec<ParamEntry>,
}

pub const MODEL_MAGIC: &[u8; 6] = b"PESTO1";
const FORMAT_VERSION: u32 = 1;

/// A network together with the frontend settings and calibration it was
/// trained and calibrated with.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub network: Network,
    pub cqt: CqtConfig,
    pub crop: CropConfig,
    pub calibration: Option<Calibration>,
    pub training: Option<TrainingInfo>,
}

impl ModelFile {
    pub fn validate(&self) -> Result<()> {
        if self.crop.input_bins != self.cqt.n_bins {
            return invalid(format!(
                "crop expects {} bins but the transform produces {}",
                self.crop.input_bins, self.cqt.n_bins
            ));
        }
        if self.crop.out_bins() != self.network.config().in_bins {
            return invalid(format!(
                "crop yields {} bins but the network takes {}",
                self.crop.out_bins(),
                self.network.config().in_bins
            ));
        }
        if let Some(c) = &self.calibration {
            if c.bins_per_semitone != self.cqt.bins_per_semitone {
                return invalid("calibration and transform disagree on bins per semitone");
            }
        }
        Ok(())
    }

    /// Magic, little-endian `u32` header length, canonical JSON header, then
    /// every tensor as little-endian `f32` in layout order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            format_version: FORMAT_VERSION,
            model: self.network.config().clone(),
            cqt: self.cqt.clone(),
            crop: self.crop.clone(),
            calibration: self.calibration.clone(),
            training: self.training.clone(),
            params: self
                .network
                .params
                .iter()
                .map(|(n, t)| ParamEntry {
                    name: n.to_string(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(10 + json.len() + 4 * self.network.param_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.network.params.iter() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parse a model; returns it with the number of bytes consumed so that
    /// checkpoints can append their own sections.
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(ModelFile, usize)> {
        let fmt = |m: String| Error::Format(format!("model file: {m}"));
        if bytes.len() < 10 || &bytes[..6] != MODEL_MAGIC {
            return Err(fmt("bad magic (not a PESTO1 model)".into()));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let hbytes = bytes
            .get(10..10 + hlen)
            .ok_or_else(|| fmt("truncated header".into()))?;
        let header: ModelHeader =
            serde_json::from_slice(hbytes).map_err(|e| fmt(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(fmt(format!("unsupported format version {}", header.format_version)));
        }
        let mut pos = 10 + hlen;
        let mut params = ParamStore::new();
        for entry in &header.params {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| fmt(format!("truncated payload in '{}'", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 4 * n;
            let t = Tensor {
                shape: entry.shape.clone(),
                data,
                grad: vec![0.0; n],
            };
            params.add(entry.name.clone(), t).map_err(|e| fmt(e.to_string()))?;
        }
        let network = Network::from_params(&header.model, params)?;
        let file = ModelFile {
            network,
            cqt: header.cqt,
            crop: header.crop,
            calibration: header.calibration,
            training: header.training,
        };
        file.validate()?;
        Ok((file, pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelFile> {
        let (file, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "model file: {} trailing bytes after payload",
                bytes.len() - used
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelFile> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts() {
        let small = ModelConfig {
            in_bins: 10,
            conv_channels: vec![2, 2, 1],
            kernel_sizes: vec![3, 3, 1],
            out_dim: 10,
            ..ModelConfig::default()
        };
        // ln 20, conv0 6+2+skip 2, conv1 12+2, conv2 2+1, toeplitz 1*10+10-1.
        assert_eq!(param_count(&small).unwrap(), 20 + 10 + 14 + 3 + 19);
        let dense = ModelConfig {
            toeplitz: false,
            ..small.clone()
        };
        assert_eq!(param_count(&dense).unwrap(), 20 + 10 + 14 + 3 + 100);

        let wide = param_count(&ModelConfig::wide()).unwrap();
        assert!((20_000..=30_000).contains(&wide), "{wide}");
        assert!(param_count(&ModelConfig::default()).unwrap() <= 30_000);
    }

    #[test]
    fn features_commute_with_translation_away_from_edges() {
        let cfg = ModelConfig::default();
        let net = Network::new(&cfg, 5).unwrap();
        let f = cfg.in_bins;
        let margin = cfg.receptive_margin();
        let frame = |start: usize| -> Vec<f64> {
            (0..f)
                .map(|i| {
                    let d = i as f64 - start as f64;
                    -80.0 + 50.0 * (-0.5 * d * d).exp() + 30.0 * (-0.5 * (d - 19.0).powi(2)).exp()
                })
                .collect()
        };
        let w = net.params.values::<f64>();
        let run = |x: &[f64]| {
            let mut tr = net.arch.new_trace::<f64>();
            net.arch
                .forward(&w, x, false, &mut rand::rngs::mock::StepRng::new(0, 0), &mut tr)
                .unwrap();
            tr.layers.last().unwrap().out.clone()
        };
        let s = 7;
        let (a, b) = (run(&frame(100)), run(&frame(100 + s)));
        let c = cfg.final_channels();
        for ch in 0..c {
            for i in margin + s..f - margin - s {
                let (u, v) = (a[ch * f + i - s], b[ch * f + i]);
                assert!((u - v).abs() < 1e-9, "channel {ch} bin {i}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_are_deterministic() {
        let net = Network::new(&ModelConfig::default(), 3).unwrap();
        let x: Vec<f32> = (0..265).map(|i| ((i as f32) * 0.37).sin() * 20.0 - 40.0).collect();
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a, b);
        let s: f64 = a.probs.iter().map(|&p| p as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(net.predict(&x[..100]).is_err());
        let batch = net.predict_batch(&[x.clone(), x].concat()).unwrap();
        assert_eq!(batch[0], a);
    }

    #[test]
    fn rejects_bad_configs() {
        let even = ModelConfig {
            kernel_sizes: vec![14, 15, 1, 1, 1, 1],
            ..ModelConfig::default()
        };
        assert!(even.validate().is_err());
        let short = ModelConfig {
            kernel_sizes: vec![15],
            ..ModelConfig::default()
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn file_round_trip() {
        let file = ModelFile {
            network: Network::new(&ModelConfig::default(), 11).unwrap(),
            cqt: CqtConfig::default(),
            crop: CropConfig::default(),
            calibration: None,
            training: None,
        };
        let bytes = file.to_bytes().unwrap();
        let back = ModelFile::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.network.params, file.network.params);

        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(ModelFile::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(ModelFile::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(ModelFile::from_bytes(&bytes[..8]), Err(Error::Format(_))));
    }
}
