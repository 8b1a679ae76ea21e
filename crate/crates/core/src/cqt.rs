//! Constant-Q transform frontend.
//!
//! Bin `i` sits at `f_min * 2^(i / (12 b))` and is the inner product of the
//! signal, centred at `t * hop`, with a Hann-windowed complex exponential of
//! length `Q * sr / f_i`. Kernels are L1-normalized and scaled by two so a
//! unit sinusoid at a bin centre lands near 0 dB.
//!
//! Evaluation uses overlap-save blocks: one FFT per block of signal, then per
//! bin the spectrum is weighted by the closed-form kernel spectrum (a sum of
//! three Dirichlet kernels), folded to the hop-decimated grid and brought back
//! with a short inverse FFT. Kernel spectra are truncated at Nyquist, which
//! only affects the top bins of the default layout.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use num_complex::{Complex, Complex32, Complex64};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{invalid, Error, Result};

/// Added to magnitudes before the log so silence stays finite.
pub const EPS_MAG: f64 = 1e-7;

/// Kernel spectra are kept within this many window-bandwidths (`sr / L`) of
/// the bin centre; Hann sidelobes beyond it are below 1e-5 of the peak.
const KERNEL_HALF_BAND: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputScale {
    Db,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CqtConfig {
    pub f_min: f64,
    pub bins_per_semitone: u32,
    pub n_bins: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub output_scale: OutputScale,
}

impl Default for CqtConfig {
    fn default() -> Self {
        CqtConfig {
            f_min: 27.5,
            bins_per_semitone: 3,
            n_bins: 297,
            hop: 160,
            sample_rate: 16_000,
            output_scale: OutputScale::Db,
        }
    }
}

impl CqtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_min > 0.0) || !self.f_min.is_finite() {
            return invalid(format!("cqt.f_min must be positive, got {}", self.f_min));
        }
        if self.bins_per_semitone == 0 {
            return invalid("cqt.bins_per_semitone must be at least 1");
        }
        if self.n_bins == 0 {
            return invalid("cqt.n_bins must be at least 1");
        }
        if self.hop == 0 {
            return invalid("cqt.hop must be at least 1");
        }
        if self.sample_rate == 0 {
            return invalid("cqt.sample_rate must be positive");
        }
        if self.f_min >= self.sample_rate as f64 / 2.0 {
            return invalid("cqt.f_min must lie below Nyquist");
        }
        Ok(())
    }

    pub fn bins_per_octave(&self) -> f64 {
        12.0 * self.bins_per_semitone as f64
    }

    /// Quality factor `1 / (2^(1/(12b)) - 1)`.
    pub fn q_factor(&self) -> f64 {
        1.0 / ((1.0 / self.bins_per_octave()).exp2() - 1.0)
    }

    pub fn bin_frequency(&self, i: usize) -> f64 {
        self.f_min * (i as f64 / self.bins_per_octave()).exp2()
    }

    /// Fractional bin position of a frequency.
    pub fn bin_of(&self, freq: f64) -> f64 {
        self.bins_per_octave() * (freq / self.f_min).log2()
    }

    /// Window length (in samples, not rounded) of bin `i`.
    pub fn window_length(&self, i: usize) -> f64 {
        self.q_factor() * self.sample_rate as f64 / self.bin_frequency(i)
    }

    /// Number of frames for `n_samples` of input: one per hop start inside
    /// the signal.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop)
    }
}

/// Frame data in either representation, row-major `n_frames x n_bins`.
#[derive(Debug, Clone, PartialEq)]
pub enum CqtData {
    Db(Vec<f32>),
    Complex(Vec<Complex32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CqtSequence {
    pub data: CqtData,
    pub config: CqtConfig,
    pub n_frames: usize,
}

impl CqtSequence {
    pub fn n_bins(&self) -> usize {
        self.config.n_bins
    }

    pub fn frame_time(&self, t: usize) -> f64 {
        (t * self.config.hop) as f64 / self.config.sample_rate as f64
    }

    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.n_frames).map(|t| self.frame_time(t)).collect()
    }

    /// dB magnitudes, converting from complex if needed.
    pub fn db(&self) -> std::borrow::Cow<'_, [f32]> {
        match &self.data {
            CqtData::Db(v) => std::borrow::Cow::Borrowed(v),
            CqtData::Complex(v) => std::borrow::Cow::Owned(v.iter().map(|&c| to_db(c)).collect()),
        }
    }

    pub fn db_frame(&self, t: usize) -> Vec<f32> {
        let k = self.n_bins();
        match &self.data {
            CqtData::Db(v) => v[t * k..(t + 1) * k].to_vec(),
            CqtData::Complex(v) => v[t * k..(t + 1) * k].iter().map(|&c| to_db(c)).collect(),
        }
    }

    pub fn complex(&self) -> Option<&[Complex32]> {
        match &self.data {
            CqtData::Complex(v) => Some(v),
            CqtData::Db(_) => None,
        }
    }

    /// Convert to dB representation.
    pub fn into_db(self) -> CqtSequence {
        let data = match self.data {
            CqtData::Db(v) => v,
            CqtData::Complex(v) => v.iter().map(|&c| to_db(c)).collect(),
        };
        CqtSequence {
            data: CqtData::Db(data),
            config: CqtConfig {
                output_scale: OutputScale::Db,
                ..self.config
            },
            n_frames: self.n_frames,
        }
    }
}

/// `20 log10(|c| + eps)`.
#[inline]
pub fn to_db(c: Complex32) -> f32 {
    20.0 * (c.norm() + EPS_MAG as f32).log10()
}

/// Precomputed transform for one configuration.
pub struct CqtPlan {
    config: CqtConfig,
    /// FFT length of a signal block.
    block_len: usize,
    /// Frames on the decimated grid of one block (`block_len / hop`).
    grid: usize,
    /// Frames of margin on each side of a block (kernel half-support).
    pad: usize,
    /// Output frames produced per block.
    valid: usize,
    kernels: Vec<BinKernel>,
    fft: Arc<dyn Fft<f32>>,
    ifft: Arc<dyn Fft<f32>>,
}

/// Real spectral weights of one bin starting at FFT index `k_lo`.
struct BinKernel {
    k_lo: usize,
    weights: Vec<f32>,
}

impl std::fmt::Debug for CqtPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CqtPlan")
            .field("config", &self.config)
            .field("block_len", &self.block_len)
            .field("valid", &self.valid)
            .finish()
    }
}

/// Smallest `2^a * {1, 3, 5}` not below `n`.
fn smooth_size(n: usize) -> usize {
    let mut best = usize::MAX;
    for m in [1usize, 3, 5] {
        let mut s = m;
        while s < n {
            s *= 2;
        }
        best = best.min(s);
    }
    best
}

/// Dirichlet kernel `sum_{|n|<=j} e^{-i w n}`.
fn dirichlet(w: f64, j: usize) -> f64 {
    let s = (0.5 * w).sin();
    if s.abs() < 1e-12 {
        // The limit at every multiple of 2 pi is 2j + 1.
        (2 * j + 1) as f64
    } else {
        ((j as f64 + 0.5) * w).sin() / s
    }
}

/// Spectrum of the Hann window `0.5 + 0.5 cos(2 pi n / len)`, `|n| <= j`.
fn hann_spectrum(w: f64, len: f64, j: usize) -> f64 {
    let d = 2.0 * PI / len;
    0.5 * dirichlet(w, j) + 0.25 * dirichlet(w - d, j) + 0.25 * dirichlet(w + d, j)
}

/// Half-support of the Hann kernel for window length `len`.
fn half_support(len: f64) -> usize {
    ((len / 2.0).ceil() as usize).saturating_sub(1)
}

/// Time-domain kernel of one bin, indexed `n = -j..=j`: the normalized
/// window times `e^{-i w_i n}`. Used by the direct reference path.
pub fn time_kernel(config: &CqtConfig, bin: usize) -> (usize, Vec<Complex64>) {
    let len = config.window_length(bin);
    let j = half_support(len);
    let w_i = 2.0 * PI * config.bin_frequency(bin) / config.sample_rate as f64;
    let win: Vec<f64> = (-(j as i64)..=j as i64)
        .map(|n| 0.5 + 0.5 * (2.0 * PI * n as f64 / len).cos())
        .collect();
    let norm = 2.0 / win.iter().sum::<f64>();
    let kernel = win
        .iter()
        .enumerate()
        .map(|(idx, &w)| {
            let n = idx as f64 - j as f64;
            Complex64::from_polar(w * norm, -w_i * n)
        })
        .collect();
    (j, kernel)
}

impl CqtPlan {
    pub fn new(config: &CqtConfig) -> Result<Self> {
        config.validate()?;
        let hop = config.hop;
        let sr = config.sample_rate as f64;
        let j_max = half_support(config.window_length(0));
        let pad = j_max.div_ceil(hop);
        let grid = smooth_size((4 * pad).max(64));
        let block_len = grid * hop;
        let valid = (block_len - 1 - j_max) / hop + 1 - pad;
        debug_assert!(valid >= 1);
        let n = block_len as f64;
        let half = block_len / 2;

        let kernels = (0..config.n_bins)
            .map(|i| {
                let len = config.window_length(i);
                let j = half_support(len);
                let f_i = config.bin_frequency(i);
                let w_i = 2.0 * PI * f_i / sr;
                let band = KERNEL_HALF_BAND * sr / len;
                let k_lo = (((f_i - band) * n / sr).ceil().max(0.0) as usize).min(half);
                let k_hi = (((f_i + band) * n / sr).floor().max(0.0) as usize).min(half);
                let norm = 2.0 / hann_spectrum(0.0, len, j) / n;
                let weights = (k_lo..=k_hi)
                    .map(|k| (norm * hann_spectrum(2.0 * PI * k as f64 / n - w_i, len, j)) as f32)
                    .collect();
                BinKernel { k_lo, weights }
            })
            .collect();

        let mut planner = FftPlanner::new();
        Ok(CqtPlan {
            config: config.clone(),
            block_len,
            grid,
            pad,
            valid,
            kernels,
            fft: planner.plan_fft_forward(block_len),
            ifft: planner.plan_fft_inverse(grid),
        })
    }

    pub fn config(&self) -> &CqtConfig {
        &self.config
    }

    /// Complex coefficients, row-major `n_frames x n_bins`.
    pub fn transform_complex(&self, samples: &[f32]) -> Result<Vec<Complex32>> {
        if samples.is_empty() {
            return invalid("cannot transform an empty signal");
        }
        let n_frames = self.config.n_frames(samples.len());
        let n_blocks = n_frames.div_ceil(self.valid);
        let k = self.config.n_bins;
        let blocks: Vec<Vec<Complex32>> = (0..n_blocks)
            .into_par_iter()
            .map(|b| self.block(samples, b, n_frames))
            .collect();
        let mut out = Vec::with_capacity(n_frames * k);
        for blk in blocks {
            out.extend_from_slice(&blk);
        }
        debug_assert_eq!(out.len(), n_frames * k);
        Ok(out)
    }

    fn block(&self, samples: &[f32], b: usize, n_frames: usize) -> Vec<Complex32> {
        let hop = self.config.hop;
        let k_bins = self.config.n_bins;
        // Block covers padded-signal samples [b * valid * hop, + block_len);
        // padded index p maps to signal index p - pad * hop.
        let origin = (b * self.valid * hop) as i64 - (self.pad * hop) as i64;
        let mut buf: Vec<Complex32> = (0..self.block_len as i64)
            .map(|i| {
                let s = origin + i;
                if s >= 0 && (s as usize) < samples.len() {
                    Complex32::new(samples[s as usize], 0.0)
                } else {
                    Complex32::new(0.0, 0.0)
                }
            })
            .collect();
        self.fft.process(&mut buf);

        let g = self.grid;
        let mut folded = vec![Complex32::new(0.0, 0.0); g * k_bins];
        for (kernel, row) in self.kernels.iter().zip(folded.chunks_exact_mut(g)) {
            // Fold modulo the grid: consecutive runs of at most `g` bins.
            let mut q = kernel.k_lo % g;
            let mut src = &buf[kernel.k_lo..kernel.k_lo + kernel.weights.len()];
            let mut w = &kernel.weights[..];
            while !w.is_empty() {
                let run = (g - q).min(w.len());
                for ((r, x), &wk) in row[q..q + run].iter_mut().zip(&src[..run]).zip(&w[..run]) {
                    *r += x * wk;
                }
                src = &src[run..];
                w = &w[run..];
                q = 0;
            }
        }
        self.ifft.process(&mut folded);

        let first = b * self.valid;
        let count = self.valid.min(n_frames - first);
        let mut out = Vec::with_capacity(count * k_bins);
        for m in 0..count {
            let pos = self.pad + m;
            out.extend(
                (0..k_bins).map(|i| {
                    folded[i * g + pos]
                }),
            );
        }
        out
    }

    /// Transform a clip in the configured output scale.
    pub fn forward(&self, clip: &AudioClip) -> Result<CqtSequence> {
        if clip.sample_rate != self.config.sample_rate {
            return invalid(format!(
                "clip '{}' is at {} Hz, transform expects {} Hz",
                clip.id, clip.sample_rate, self.config.sample_rate
            ));
        }
        if clip.samples.is_empty() {
            return invalid(format!("clip '{}' is empty", clip.id));
        }
        let coeffs = self.transform_complex(&clip.samples)?;
        let n_frames = self.config.n_frames(clip.samples.len());
        let data = match self.config.output_scale {
            OutputScale::Complex => CqtData::Complex(coeffs),
            OutputScale::Db => CqtData::Db(coeffs.iter().map(|&c| to_db(c)).collect()),
        };
        Ok(CqtSequence {
            data,
            config: self.config.clone(),
            n_frames,
        })
    }
}

/// One-shot transform; build a [`CqtPlan`] to amortize setup across clips.
pub fn cqt_forward(clip: &AudioClip, config: &CqtConfig) -> Result<CqtSequence> {
    CqtPlan::new(config)?.forward(clip)
}

/// Complex mixture `vocals + beta * background`.
pub fn mix_complex(vocals: &CqtSequence, background: &CqtSequence, beta: f32) -> Result<CqtSequence> {
    let (Some(v), Some(bg)) = (vocals.complex(), background.complex()) else {
        return invalid("mixing requires complex-mode sequences");
    };
    if vocals.config != background.config {
        return invalid("cannot mix sequences with different transform configs");
    }
    if vocals.n_frames != background.n_frames {
        return invalid(format!(
            "frame count mismatch: {} vs {}",
            vocals.n_frames, background.n_frames
        ));
    }
    let data = v.iter().zip(bg).map(|(&a, &b)| a + b * beta).collect();
    Ok(CqtSequence {
        data: CqtData::Complex(data),
        config: vocals.config.clone(),
        n_frames: vocals.n_frames,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"PCQT";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheHeader {
    config: CqtConfig,
    n_frames: usize,
}

/// Serialize a sequence: magic, version, header length, canonical JSON
/// header, then little-endian f32 payload (re/im interleaved for complex).
pub fn encode_cache(seq: &CqtSequence) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CacheHeader {
        config: seq.config.clone(),
        n_frames: seq.n_frames,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    match &seq.data {
        CqtData::Db(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        CqtData::Complex(v) => v.iter().for_each(|c| {
            out.extend_from_slice(&c.re.to_le_bytes());
            out.extend_from_slice(&c.im.to_le_bytes());
        }),
    }
    Ok(out)
}

pub fn decode_cache(bytes: &[u8]) -> Result<CqtSequence> {
    let fmt = |m: &str| Error::Format(format!("cqt cache: {m}"));
    if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: CacheHeader =
        serde_json::from_slice(body).map_err(|e| fmt(&format!("header: {e}")))?;
    header.config.validate()?;
    let payload = &bytes[12 + hlen..];
    let n_values = header.n_frames * header.config.n_bins;
    let floats_per = match header.config.output_scale {
        OutputScale::Db => 1,
        OutputScale::Complex => 2,
    };
    if payload.len() != n_values * floats_per * 4 {
        return Err(fmt("payload length does not match header"));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = match header.config.output_scale {
        OutputScale::Db => CqtData::Db(floats),
        OutputScale::Complex => {
            CqtData::Complex(floats.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect())
        }
    };
    Ok(CqtSequence {
        data,
        config: header.config,
        n_frames: header.n_frames,
    })
}

pub fn save_cache(seq: &CqtSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_cache(seq)?)?;
    Ok(())
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<CqtSequence> {
    decode_cache(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, secs: f64) -> AudioClip {
        let n = (secs * 16000.0) as usize;
        let s = (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()) as f32)
            .collect();
        AudioClip::new(s, 16000, "sine").unwrap()
    }

    fn argmax(v: &[f32]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    fn direct(samples: &[f32], config: &CqtConfig, t: usize, bin: usize) -> Complex64 {
        let (j, kernel) = time_kernel(config, bin);
        let centre = (t * config.hop) as i64;
        kernel
            .iter()
            .enumerate()
            .map(|(idx, k)| {
                let s = centre + idx as i64 - j as i64;
                if s >= 0 && (s as usize) < samples.len() {
                    k * samples[s as usize] as f64
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .sum()
    }

    #[test]
    fn q_factor_value() {
        let q = CqtConfig::default().q_factor();
        assert!((q - 51.44).abs() < 0.01, "{q}");
    }

    #[test]
    fn a4_lands_on_bin_144() {
        let cfg = CqtConfig::default();
        let expected = (36.0 * (440.0f64 / 27.5).log2()).round() as usize;
        assert_eq!(expected, 144);
        let seq = cqt_forward(&sine(440.0, 1.0, 2.0), &cfg).unwrap();
        for t in 100..seq.n_frames - 100 {
            assert_eq!(argmax(&seq.db_frame(t)), 144, "frame {t}");
        }
        // Unit sinusoid at a bin centre is close to 0 dB.
        let peak = seq.db_frame(150)[144];
        assert!(peak.abs() < 0.1, "{peak}");
    }

    #[test]
    fn a0_lands_on_bin_0() {
        let seq = cqt_forward(&sine(27.5, 1.0, 6.0), &CqtConfig::default()).unwrap();
        for t in 200..seq.n_frames - 200 {
            assert_eq!(argmax(&seq.db_frame(t)), 0, "frame {t}");
        }
    }

    #[test]
    fn silence_is_at_floor() {
        let clip = AudioClip::new(vec![0.0; 3200], 16000, "z").unwrap();
        let seq = cqt_forward(&clip, &CqtConfig::default()).unwrap();
        let floor = (20.0 * EPS_MAG.log10()) as f32;
        assert!(seq.db().iter().all(|&v| v == floor));
    }

    #[test]
    fn matches_direct_inner_product() {
        let mut state = 12345u64;
        let samples: Vec<f32> = (0..40000)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) as f32
            })
            .collect();
        let cfg = CqtConfig::default();
        let plan = CqtPlan::new(&cfg).unwrap();
        let coeffs = plan.transform_complex(&samples).unwrap();
        // Frames straddling block boundaries, the edges and the interior.
        for &t in &[0usize, 1, 150, 196, 197, 198, 249] {
            for bin in (0..260).step_by(7) {
                let d = direct(&samples, &cfg, t, bin);
                let c = coeffs[t * cfg.n_bins + bin];
                let err = (Complex64::new(c.re as f64, c.im as f64) - d).norm();
                assert!(err <= 2e-3 * d.norm() + 1e-5, "t {t} bin {bin}: {err} vs {}", d.norm());
            }
        }
    }

    #[test]
    fn doubling_amplitude_adds_6db() {
        let cfg = CqtConfig::default();
        let a = cqt_forward(&sine(311.0, 0.3, 1.0), &cfg).unwrap();
        let b = cqt_forward(&sine(311.0, 0.6, 1.0), &cfg).unwrap();
        let expect = 20.0 * 2f64.log10();
        for t in 40..60 {
            let (fa, fb) = (a.db_frame(t), b.db_frame(t));
            for i in 0..cfg.n_bins {
                if fa[i] > -60.0 {
                    assert!(((fb[i] - fa[i]) as f64 - expect).abs() < 0.01);
                }
            }
        }
    }

    #[test]
    fn semitone_transposition_shifts_argmax() {
        let cfg = CqtConfig::default();
        let plan = CqtPlan::new(&cfg).unwrap();
        let base = 27.5 * 2f64.powf(40.0 / 36.0);
        let a = plan.forward(&sine(base, 0.5, 1.0)).unwrap();
        for s in [1i32, 5, 12, 30] {
            let f = base * 2f64.powf(s as f64 / 12.0);
            let b = plan.forward(&sine(f, 0.5, 1.0)).unwrap();
            for t in 40..60 {
                let shift = argmax(&b.db_frame(t)) as i32 - argmax(&a.db_frame(t)) as i32;
                assert_eq!(shift, 3 * s);
            }
        }
    }

    #[test]
    fn frame_times_follow_hop() {
        let seq = cqt_forward(&sine(100.0, 0.5, 0.1), &CqtConfig::default()).unwrap();
        assert_eq!(seq.n_frames, 10);
        assert_eq!(seq.frame_time(3), 0.03);
    }

    #[test]
    fn rejects_rate_mismatch_and_empty() {
        let clip = AudioClip::new(vec![0.1; 100], 8000, "x").unwrap();
        assert!(cqt_forward(&clip, &CqtConfig::default()).is_err());
        let plan = CqtPlan::new(&CqtConfig::default()).unwrap();
        assert!(plan.transform_complex(&[]).is_err());
    }

    fn complex_seq(clip: &AudioClip) -> CqtSequence {
        let cfg = CqtConfig {
            output_scale: OutputScale::Complex,
            ..CqtConfig::default()
        };
        cqt_forward(clip, &cfg).unwrap()
    }

    #[test]
    fn mixing_rules() {
        let v = complex_seq(&sine(220.0, 0.5, 0.2));
        let bg = complex_seq(&sine(700.0, 0.3, 0.2));
        assert_eq!(mix_complex(&v, &bg, 0.0).unwrap(), v);

        let doubled = mix_complex(&v, &v, 1.0).unwrap();
        let (d0, d1) = (v.db(), doubled.db());
        for (a, b) in d0.iter().zip(d1.iter()) {
            if *a > -60.0 {
                assert!((b - a - 6.0206).abs() < 1e-3);
            }
        }

        let mixed = mix_complex(&v, &bg, 0.5).unwrap();
        let (m, a, b) = (mixed.complex().unwrap(), v.complex().unwrap(), bg.complex().unwrap());
        for i in 0..m.len() {
            assert!(m[i].norm() <= a[i].norm() + 0.5 * b[i].norm() + 1e-6);
        }

        let short = complex_seq(&sine(220.0, 0.5, 0.1));
        assert!(mix_complex(&v, &short, 1.0).is_err());
        assert!(mix_complex(&v.clone().into_db(), &bg, 1.0).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let clip = sine(330.0, 0.5, 0.1);
        for seq in [complex_seq(&clip), cqt_forward(&clip, &CqtConfig::default()).unwrap()] {
            let bytes = encode_cache(&seq).unwrap();
            assert_eq!(decode_cache(&bytes).unwrap(), seq);
            assert!(matches!(decode_cache(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
            let mut bad = bytes.clone();
            bad[0] = b'X';
            assert!(matches!(decode_cache(&bad), Err(Error::Format(_))));
        }
    }
}
