//! Training triplets by crop-based pitch shifting.
//!
//! A `K`-bin frame is cropped twice: the central `F = K - 2 k_max` bins give
//! `x`, and a window offset by `-k` bins gives `x_k`, so `x_k[j + k] = x[j]`.
//! Augmentations act on dB frames after cropping; background mixing acts on
//! complex full frames before dB conversion.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cqt::to_db;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    /// Largest simulated shift, in bins.
    pub k_max: usize,
    /// Bins of the incoming CQT frame.
    pub input_bins: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            k_max: 16,
            input_bins: 297,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_bins < 2 * self.k_max + 1 {
            return invalid(format!(
                "crop leaves no bins: input_bins {} with k_max {}",
                self.input_bins, self.k_max
            ));
        }
        Ok(())
    }

    /// Width of the cropped frame.
    pub fn out_bins(&self) -> usize {
        self.input_bins - 2 * self.k_max
    }
}

/// Distribution of the background mixing coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaDist {
    None,
    Const(f64),
    Uniform01,
    /// Absolute value of a zero-mean Gaussian with this standard deviation.
    Gauss(f64),
}

impl BetaDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            BetaDist::None => 0.0,
            BetaDist::Const(c) => c,
            BetaDist::Uniform01 => rng.gen::<f64>(),
            BetaDist::Gauss(s) => {
                let z: f64 = StandardNormal.sample(rng);
                (z * s).abs()
            }
        }
    }
}

impl fmt::Display for BetaDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaDist::None => write!(f, "none"),
            BetaDist::Const(c) => write!(f, "const:{c}"),
            BetaDist::Uniform01 => write!(f, "uniform01"),
            BetaDist::Gauss(s) => write!(f, "gauss:{s}"),
        }
    }
}

impl FromStr for BetaDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (tag, arg) = match s.split_once(':') {
            Some((t, a)) => (t, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<f64> {
            let a = a.ok_or_else(|| Error::Validation(format!("'{tag}' needs a value, e.g. {tag}:1.0")))?;
            let v: f64 = a
                .parse()
                .map_err(|_| Error::Validation(format!("bad number '{a}' in beta distribution")))?;
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("beta parameter must be non-negative, got {v}"));
            }
            Ok(v)
        };
        match tag {
            "none" => Ok(BetaDist::None),
            "const" => Ok(BetaDist::Const(num(arg)?)),
            "uniform01" => Ok(BetaDist::Uniform01),
            "gauss" => Ok(BetaDist::Gauss(num(arg)?)),
            _ => invalid(format!(
                "unknown beta distribution '{s}' (none, const:c, uniform01, gauss:sigma)"
            )),
        }
    }
}

impl Serialize for BetaDist {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BetaDist {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_apply: f64,
    /// Range of the white-noise standard deviation, in dB.
    pub noise_std_range: [f64; 2],
    pub gain_range_db: [f64; 2],
    pub background_beta: BetaDist,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_apply: 0.7,
            noise_std_range: [0.1, 2.0],
            gain_range_db: [-6.0, 3.0],
            background_beta: BetaDist::None,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        AugmentConfig {
            p_apply: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_apply) {
            return invalid(format!("augment.p_apply must be in [0, 1], got {}", self.p_apply));
        }
        let [nlo, nhi] = self.noise_std_range;
        if !(nlo >= 0.0 && nlo <= nhi) {
            return invalid("augment.noise_std_range must be a non-negative, ordered interval");
        }
        let [glo, ghi] = self.gain_range_db;
        if !(glo <= ghi) || !glo.is_finite() || !ghi.is_finite() {
            return invalid("augment.gain_range_db must be an ordered interval");
        }
        Ok(())
    }
}

/// Three views per item, each `batch x bins` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x: Vec<f32>,
    pub x_aug: Vec<f32>,
    pub x_shift_aug: Vec<f32>,
    pub k: Vec<i64>,
    pub bins: usize,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn row<'a>(&self, data: &'a [f32], i: usize) -> &'a [f32] {
        &data[i * self.bins..(i + 1) * self.bins]
    }
}

/// Centre crop and its `k`-shifted counterpart.
pub fn crop_pair(frame: &[f32], k: i64, cfg: &CropConfig) -> Result<(Vec<f32>, Vec<f32>)> {
    if frame.len() != cfg.input_bins {
        return invalid(format!("frame has {} bins, expected {}", frame.len(), cfg.input_bins));
    }
    if k.unsigned_abs() as usize > cfg.k_max {
        return invalid(format!("shift {k} exceeds k_max {}", cfg.k_max));
    }
    let f = cfg.out_bins();
    let start = cfg.k_max;
    let shifted = (cfg.k_max as i64 - k) as usize;
    Ok((frame[start..start + f].to_vec(), frame[shifted..shifted + f].to_vec()))
}

/// Uniform integer in `[-k_max, k_max]`.
pub fn sample_k<R: Rng + ?Sized>(rng: &mut R, cfg: &CropConfig) -> i64 {
    let k = cfg.k_max as i64;
    rng.gen_range(-k..=k)
}

/// Gain then noise, each independently with probability `p_apply`.
pub fn augment<R: Rng + ?Sized>(x: &[f32], cfg: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    let mut out = x.to_vec();
    if rng.gen::<f64>() < cfg.p_apply {
        let [lo, hi] = cfg.gain_range_db;
        let g = rng.gen_range(lo..=hi) as f32;
        out.iter_mut().for_each(|v| *v += g);
    }
    if rng.gen::<f64>() < cfg.p_apply {
        let [lo, hi] = cfg.noise_std_range;
        let sigma = rng.gen_range(lo..=hi);
        for v in &mut out {
            let z: f64 = StandardNormal.sample(rng);
            *v += (z * sigma) as f32;
        }
    }
    out
}

/// Per-item generator seeded from the batch generator, so items can be built
/// in any order.
fn item_rngs<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<ChaCha8Rng> {
    (0..n).map(|_| ChaCha8Rng::seed_from_u64(rng.gen())).collect()
}

fn check_frames(len: usize, cfg: &CropConfig) -> Result<usize> {
    if len % cfg.input_bins != 0 {
        return invalid(format!(
            "frame buffer of {len} values is not a multiple of {} bins",
            cfg.input_bins
        ));
    }
    Ok(len / cfg.input_bins)
}

/// Build a batch from `B x K` dB frames. `force_k` pins every shift (tests).
pub fn make_batch<R: Rng + ?Sized>(
    frames: &[f32],
    aug: &AugmentConfig,
    crop: &CropConfig,
    rng: &mut R,
    force_k: Option<i64>,
) -> Result<TrainBatch> {
    crop.validate()?;
    aug.validate()?;
    if let Some(p) = frames.iter().position(|v| !v.is_finite()) {
        return invalid(format!("non-finite value in frame buffer at {p}"));
    }
    let n = check_frames(frames.len(), crop)?;
    let f = crop.out_bins();
    let mut batch = empty_batch(n, f);
    for (i, mut r) in item_rngs(rng, n).into_iter().enumerate() {
        let frame = &frames[i * crop.input_bins..(i + 1) * crop.input_bins];
        let k = force_k.unwrap_or_else(|| sample_k(&mut r, crop));
        let (x, xk) = crop_pair(frame, k, crop)?;
        let xa = augment(&x, aug, &mut r);
        let xka = augment(&xk, aug, &mut r);
        push_item(&mut batch, k, &x, &xa, &xka);
    }
    Ok(batch)
}

/// Build a batch from complex full frames, replacing gain and noise with a
/// mixture `v + beta * b` against a random background frame in each
/// augmented branch (with probability `p_apply` per branch).
pub fn make_batch_mixed<R: Rng + ?Sized>(
    vocals: &[Complex32],
    backgrounds: &[Complex32],
    aug: &AugmentConfig,
    crop: &CropConfig,
    rng: &mut R,
) -> Result<TrainBatch> {
    crop.validate()?;
    aug.validate()?;
    let kb = crop.input_bins;
    let n = check_frames(vocals.len(), crop)?;
    let n_bg = check_frames(backgrounds.len(), crop)?;
    if n_bg == 0 {
        return invalid("background mixing needs at least one background frame");
    }
    let f = crop.out_bins();
    let mut batch = empty_batch(n, f);
    for (i, mut r) in item_rngs(rng, n).into_iter().enumerate() {
        let v = &vocals[i * kb..(i + 1) * kb];
        let k = sample_k(&mut r, crop);
        let clean: Vec<f32> = v.iter().map(|&c| to_db(c)).collect();
        let view = |r: &mut ChaCha8Rng| -> Vec<f32> {
            if r.gen::<f64>() < aug.p_apply {
                let j = r.gen_range(0..n_bg);
                let beta = aug.background_beta.sample(r) as f32;
                let b = &backgrounds[j * kb..(j + 1) * kb];
                v.iter().zip(b).map(|(&a, &c)| to_db(a + c * beta)).collect()
            } else {
                clean.clone()
            }
        };
        let full_a = view(&mut r);
        let full_k = view(&mut r);
        let (x, _) = crop_pair(&clean, k, crop)?;
        let (xa, _) = crop_pair(&full_a, 0, crop)?;
        let (_, xka) = crop_pair(&full_k, k, crop)?;
        push_item(&mut batch, k, &x, &xa, &xka);
    }
    Ok(batch)
}

fn empty_batch(n: usize, f: usize) -> TrainBatch {
    TrainBatch {
        x: Vec::with_capacity(n * f),
        x_aug: Vec::with_capacity(n * f),
        x_shift_aug: Vec::with_capacity(n * f),
        k: Vec::with_capacity(n),
        bins: f,
    }
}

fn push_item(batch: &mut TrainBatch, k: i64, x: &[f32], xa: &[f32], xka: &[f32]) {
    batch.x.extend_from_slice(x);
    batch.x_aug.extend_from_slice(xa);
    batch.x_shift_aug.extend_from_slice(xka);
    batch.k.push(k);
}
