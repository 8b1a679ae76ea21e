//! Audio ingestion: WAV decoding, band-limited resampling, pitch annotations
//! and the synthetic harmonic generator used for calibration and desk-scale
//! training.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pitch_head::semitones_to_hz;

/// Working sample rate of the whole pipeline.
pub const WORKING_RATE: u32 = 16_000;

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, id: impl Into<String>) -> Result<Self> {
        let clip = AudioClip {
            samples,
            sample_rate,
            id: id.into(),
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return invalid(format!("audio clip '{}' is empty", self.id));
        }
        if self.sample_rate == 0 {
            return invalid("sample rate must be positive");
        }
        if let Some(pos) = self.samples.iter().position(|s| !s.is_finite()) {
            return invalid(format!("non-finite sample at index {pos} in '{}'", self.id));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decode a PCM (8/16/24/32-bit) or IEEE-float WAV file, averaging channels.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(e, path))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::Unsupported(format!(
                    "{}: {}-bit float samples",
                    path.display(),
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound(e, path))?
        }
        hound::SampleFormat::Int => {
            let bits = spec.bits_per_sample;
            if !(1..=32).contains(&bits) {
                return Err(Error::Unsupported(format!("{}: {bits}-bit PCM", path.display())));
            }
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_hound(e, path))?
        }
    };
    let samples: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().map(|&s| s as f64).sum::<f64>() / channels as f64) as f32)
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    AudioClip::new(samples, spec.sample_rate, id)
}

fn map_hound(err: hound::Error, path: &Path) -> Error {
    match err {
        hound::Error::IoError(e) if e.kind() == ErrorKind::UnexpectedEof => {
            Error::Format(format!("{}: truncated file", path.display()))
        }
        hound::Error::IoError(e) => Error::Io(e),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => {
            Error::Unsupported(format!("{}: unsupported WAV codec", path.display()))
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Write a mono 32-bit float WAV.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let path = path.as_ref();
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(e, path))?;
    for &s in &clip.samples {
        writer.write_sample(s).map_err(|e| map_hound(e, path))?;
    }
    writer.finalize().map_err(|e| map_hound(e, path))?;
    Ok(())
}

// Windowed-sinc resampler: Kaiser window (beta 8.6), 32 zero crossings per
// side, cutoff at 0.97 of the lower Nyquist. Weights are renormalized per
// output sample, which makes DC gain exactly one including at the edges.
const SINC_ZERO_CROSSINGS: usize = 32;
const SINC_TABLE_DENSITY: usize = 512;
const KAISER_BETA: f64 = 8.6;
const CUTOFF: f64 = 0.97;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc_table() -> Vec<f64> {
    let n = SINC_ZERO_CROSSINGS * SINC_TABLE_DENSITY + 2;
    let norm = bessel_i0(KAISER_BETA);
    (0..n)
        .map(|i| {
            let u = i as f64 / SINC_TABLE_DENSITY as f64;
            let r = u / SINC_ZERO_CROSSINGS as f64;
            if r >= 1.0 {
                return 0.0;
            }
            let sinc = if u == 0.0 {
                1.0
            } else {
                let a = std::f64::consts::PI * u;
                a.sin() / a
            };
            sinc * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
        })
        .collect()
}

/// Band-limited resampling to `target_rate`.
///
/// Output length is `round(len * target / source)`, so duration is preserved
/// within one output sample period.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return invalid("target sample rate must be positive");
    }
    clip.validate()?;
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let ratio = target_rate as f64 / clip.sample_rate as f64;
    let out_len = ((clip.samples.len() as f64 * ratio).round() as usize).max(1);
    let cutoff = CUTOFF * ratio.min(1.0);
    // Half-width of the kernel in input samples.
    let half_width = SINC_ZERO_CROSSINGS as f64 / cutoff;
    let table = sinc_table();
    let input = &clip.samples;
    let n_in = input.len() as isize;

    let samples = (0..out_len)
        .map(|n| {
            let t = n as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for j in lo..=hi {
                let u = (t - j as f64).abs() * cutoff * SINC_TABLE_DENSITY as f64;
                let idx = u as usize;
                if idx + 1 >= table.len() {
                    continue;
                }
                let frac = u - idx as f64;
                let w = table[idx] + (table[idx + 1] - table[idx]) * frac;
                acc += w * input[j as usize] as f64;
                wsum += w;
            }
            if wsum.abs() > 1e-12 {
                (acc / wsum) as f32
            } else {
                0.0
            }
        })
        .collect();
    AudioClip::new(samples, target_rate, clip.id.clone())
}

/// Ground-truth f0 track. `f0 == 0` marks unvoiced frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchAnnotation {
    pub id: String,
    pub times: Vec<f64>,
    pub f0: Vec<f64>,
}

/// On-disk annotation formats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnnotationFormat {
    /// `time_seconds,frequency_hz` per line.
    TimeFreqCsv,
    /// One MIDI semitone value per line, 0 for unvoiced, evenly spaced frames.
    Mir1kPv { hop: f64, first_time: f64 },
}

impl AnnotationFormat {
    /// MIR-1K pitch vectors: 20 ms hop, first frame centred at 20 ms.
    pub const MIR1K: AnnotationFormat = AnnotationFormat::Mir1kPv {
        hop: 0.02,
        first_time: 0.02,
    };
}

/// How to read a truth value at an arbitrary time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interpolation {
    /// Nearest annotated frame, rejected when further than `max_gap` seconds.
    Nearest { max_gap: f64 },
    /// Linear in Hz between voiced neighbours; falls back to nearest when a
    /// neighbour is unvoiced. Times outside the annotated span yield `None`.
    Linear,
}

impl PitchAnnotation {
    pub fn new(id: impl Into<String>, times: Vec<f64>, f0: Vec<f64>) -> Result<Self> {
        let ann = PitchAnnotation {
            id: id.into(),
            times,
            f0,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.f0.len() {
            return invalid(format!(
                "annotation '{}': {} times but {} f0 values",
                self.id,
                self.times.len(),
                self.f0.len()
            ));
        }
        for w in self.times.windows(2) {
            if !(w[1] > w[0]) {
                return invalid(format!(
                    "annotation '{}': times not strictly increasing ({} then {})",
                    self.id, w[0], w[1]
                ));
            }
        }
        if let Some(f) = self.f0.iter().find(|f| !(**f >= 0.0) || !f.is_finite()) {
            return invalid(format!("annotation '{}': invalid frequency {f}", self.id));
        }
        Ok(())
    }

    /// Truth frequency at `t`, `Some(0.0)` for unvoiced, `None` if unavailable.
    pub fn value_at(&self, t: f64, interp: Interpolation) -> Option<f64> {
        if self.times.is_empty() {
            return None;
        }
        let idx = self.times.partition_point(|&x| x < t);
        let nearest = || {
            let cand = [idx.checked_sub(1), (idx < self.times.len()).then_some(idx)];
            cand.into_iter()
                .flatten()
                .min_by(|&a, &b| {
                    (self.times[a] - t)
                        .abs()
                        .total_cmp(&(self.times[b] - t).abs())
                })
                .unwrap()
        };
        match interp {
            Interpolation::Nearest { max_gap } => {
                let i = nearest();
                ((self.times[i] - t).abs() <= max_gap).then(|| self.f0[i])
            }
            Interpolation::Linear => {
                if t < self.times[0] || t > *self.times.last().unwrap() {
                    return None;
                }
                if idx < self.times.len() && self.times[idx] == t {
                    return Some(self.f0[idx]);
                }
                let (a, b) = (idx - 1, idx);
                let (fa, fb) = (self.f0[a], self.f0[b]);
                if fa > 0.0 && fb > 0.0 {
                    let w = (t - self.times[a]) / (self.times[b] - self.times[a]);
                    Some(fa + (fb - fa) * w)
                } else {
                    Some(self.f0[nearest()])
                }
            }
        }
    }

    /// Serialize as `time,frequency` CSV with `%.6f,%.3f` formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.times.len() * 20);
        for (t, f) in self.times.iter().zip(&self.f0) {
            out.push_str(&format!("{t:.6},{f:.3}\n"));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Parse annotation text in the given format.
pub fn parse_annotations(
    text: &str,
    format: AnnotationFormat,
    id: impl Into<String>,
) -> Result<PitchAnnotation> {
    let id = id.into();
    let mut times = Vec::new();
    let mut f0 = Vec::new();
    match format {
        AnnotationFormat::TimeFreqCsv => {
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let mut fields = line.split(',').map(str::trim);
                let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
                    return Err(Error::Format(format!("{id}:{}: expected 'time,frequency'", lineno + 1)));
                };
                match (a.parse::<f64>(), b.parse::<f64>()) {
                    (Ok(t), Ok(f)) => {
                        times.push(t);
                        f0.push(f);
                    }
                    // Tolerate a single header row.
                    _ if times.is_empty() && lineno == 0 => continue,
                    _ => {
                        return Err(Error::Format(format!(
                            "{id}:{}: cannot parse '{line}'",
                            lineno + 1
                        )))
                    }
                }
            }
        }
        AnnotationFormat::Mir1kPv { hop, first_time } => {
            if !(hop > 0.0) {
                return invalid("pv hop must be positive");
            }
            let mut i = 0usize;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let p: f64 = line.parse().map_err(|_| {
                    Error::Format(format!("{id}:{}: cannot parse '{line}'", lineno + 1))
                })?;
                if p < 0.0 {
                    return invalid(format!("{id}:{}: negative semitone value {p}", lineno + 1));
                }
                times.push(first_time + i as f64 * hop);
                f0.push(if p == 0.0 { 0.0 } else { semitones_to_hz(p) });
                i += 1;
            }
        }
    }
    PitchAnnotation::new(id, times, f0)
}

/// Read an annotation file.
pub fn load_annotations(path: impl AsRef<Path>, format: AnnotationFormat) -> Result<PitchAnnotation> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_annotations(&text, format, id)
}

/// Parameters of the synthetic harmonic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_samples: usize,
    /// Fundamental range in Hz; f0 is drawn log-uniformly.
    pub f0_range: [f64; 2],
    pub n_harmonics_max: usize,
    /// Range of the geometric amplitude ratio between successive harmonics.
    pub amp_decay_range: [f64; 2],
    /// Clip length in seconds.
    pub duration: f64,
    /// Standard deviation of additive white noise.
    pub noise_floor: f64,
    pub seed: u64,
    pub sample_rate: u32,
    /// Spacing of the constant-f0 annotation grid in seconds.
    pub annotation_hop: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        // A1..A6, up to 8 harmonics.
        SynthSpec {
            n_samples: 500,
            f0_range: [55.0, 1760.0],
            n_harmonics_max: 8,
            amp_decay_range: [0.3, 0.9],
            duration: 1.0,
            noise_floor: 0.001,
            seed: 1234,
            sample_rate: WORKING_RATE,
            annotation_hop: 0.01,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let [lo, hi] = self.f0_range;
        if self.sample_rate == 0 {
            return invalid("synth sample rate must be positive");
        }
        if !(lo > 0.0 && lo <= hi && hi < nyquist) {
            return invalid(format!("f0 range [{lo}, {hi}] must lie within (0, {nyquist})"));
        }
        if self.n_harmonics_max < 1 {
            return invalid("n_harmonics_max must be at least 1");
        }
        let [dlo, dhi] = self.amp_decay_range;
        if !(dlo >= 0.0 && dlo <= dhi) {
            return invalid(format!("amp decay range [{dlo}, {dhi}] is empty or negative"));
        }
        if !(self.duration > 0.0) || (self.duration * self.sample_rate as f64) < 1.0 {
            return invalid("synth duration must cover at least one sample");
        }
        if !(self.noise_floor >= 0.0) {
            return invalid("noise floor must be non-negative");
        }
        if !(self.annotation_hop > 0.0) {
            return invalid("annotation hop must be positive");
        }
        Ok(())
    }

    /// Generate clip `index` of the dataset. Each clip draws from its own
    /// ChaCha stream, so clips are independent of generation order.
    pub fn generate_one(&self, index: usize) -> (AudioClip, PitchAnnotation) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let [lo, hi] = self.f0_range;
        let f0 = rng.gen_range(lo.ln()..=hi.ln()).exp();
        let n_harm = rng.gen_range(1..=self.n_harmonics_max);
        let [dlo, dhi] = self.amp_decay_range;
        let decay = rng.gen_range(dlo..=dhi);
        let sr = self.sample_rate as f64;
        let nyquist = sr / 2.0;
        let harmonics: Vec<(f64, f64)> = (1..=n_harm)
            .map(|h| (h as f64 * f0, decay.powi(h as i32 - 1)))
            .filter(|&(f, _)| f < nyquist)
            .collect();

        let n = (self.duration * sr).round() as usize;
        let mut signal: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                harmonics
                    .iter()
                    .map(|&(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                    .sum()
            })
            .collect();
        let peak = signal.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if peak > 0.0 {
            let g = 0.9 / peak;
            signal.iter_mut().for_each(|s| *s *= g);
        }
        if self.noise_floor > 0.0 {
            let noise = Normal::new(0.0, self.noise_floor).expect("finite noise std");
            signal.iter_mut().for_each(|s| *s += noise.sample(&mut rng));
        }
        let id = format!("synth_{index:05}");
        let clip = AudioClip {
            samples: signal.into_iter().map(|s| s as f32).collect(),
            sample_rate: self.sample_rate,
            id: id.clone(),
        };
        let n_ann = (self.duration / self.annotation_hop).floor() as usize + 1;
        let times = (0..n_ann).map(|i| i as f64 * self.annotation_hop).collect();
        let ann = PitchAnnotation {
            id,
            times,
            f0: vec![f0; n_ann],
        };
        (clip, ann)
    }
}

/// Deterministic synthetic harmonic dataset.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<(AudioClip, PitchAnnotation)>> {
    spec.validate()?;
    use rayon::prelude::*;
    Ok((0..spec.n_samples)
        .into_par_iter()
        .map(|i| spec.generate_one(i))
        .collect())
}
