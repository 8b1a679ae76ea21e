//! Absolute pitch from output distributions.
//!
//! A class index `j` maps to MIDI pitch `(j + p0) / b`, where the integer
//! offset `p0` is calibrated on synthetic clips of known pitch.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{resample, AudioClip, Interpolation, PitchAnnotation};
use crate::cqt::CqtPlan;
use crate::error::{invalid, Result};
use crate::model::{ModelFile, PitchDistribution};

/// MIDI semitones to Hz (`69 -> 440`).
pub fn semitones_to_hz(p: f64) -> f64 {
    440.0 * ((p - 69.0) / 12.0).exp2()
}

/// Hz to MIDI semitones.
pub fn hz_to_semitones(f: f64) -> f64 {
    69.0 + 12.0 * (f / 440.0).log2()
}

/// Class-to-pitch offset and the spread of the residuals it leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub p0: i64,
    pub bins_per_semitone: u32,
    /// Median of `b * p_true - argmax - p0`, in bins.
    pub residual_median: f64,
    /// Interquartile range of the same residuals, in bins.
    pub residual_iqr: f64,
    pub n_frames: usize,
}

impl Calibration {
    pub fn residual_iqr_semitones(&self) -> f64 {
        self.residual_iqr / self.bins_per_semitone as f64
    }

    /// MIDI pitch for a (possibly fractional) class position.
    pub fn pitch(&self, class: f64) -> f64 {
        (class + self.p0 as f64) / self.bins_per_semitone as f64
    }
}

/// Linear-interpolated quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Calibrate from `(argmax class, true MIDI pitch)` pairs.
pub fn calibrate_from_pairs(pairs: &[(usize, f64)], bins_per_semitone: u32) -> Result<Calibration> {
    if pairs.is_empty() {
        return invalid("calibration needs at least one voiced frame");
    }
    let b = bins_per_semitone as f64;
    let r: Vec<f64> = pairs.iter().map(|&(j, p)| b * p - j as f64).collect();
    let p0 = quantile(&r, 0.5).round() as i64;
    let resid: Vec<f64> = r.iter().map(|v| v - p0 as f64).collect();
    Ok(Calibration {
        p0,
        bins_per_semitone,
        residual_median: quantile(&resid, 0.5),
        residual_iqr: quantile(&resid, 0.75) - quantile(&resid, 0.25),
        n_frames: pairs.len(),
    })
}

/// Time-stamped pitch estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub times: Vec<f64>,
    /// 0 where confidence is below the floor.
    pub pitch_hz: Vec<f64>,
    pub pitch_semitones: Vec<f64>,
    pub confidence: Vec<f64>,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `time,frequency,confidence` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time,frequency,confidence\n");
        for i in 0..self.len() {
            s.push_str(&format!(
                "{:.4},{:.3},{:.4}\n",
                self.times[i], self.pitch_hz[i], self.confidence[i]
            ));
        }
        s
    }
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Frames whose top probability is below this are reported unvoiced.
    pub confidence_floor: f64,
    /// Sub-bin refinement by a parabola through the log-probabilities
    /// around the argmax.
    pub parabolic: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            confidence_floor: 0.0,
            parabolic: false,
        }
    }
}

/// A loaded model ready to process audio.
#[derive(Debug)]
pub struct PitchEstimator {
    pub model: ModelFile,
    plan: CqtPlan,
    pub infer: InferConfig,
}

impl PitchEstimator {
    pub fn new(model: ModelFile, infer: InferConfig) -> Result<Self> {
        model.validate()?;
        let plan = CqtPlan::new(&model.cqt)?;
        Ok(PitchEstimator { model, plan, infer })
    }

    /// Central crop of every frame, in dB, `n_frames x F`.
    pub fn frames(&self, clip: &AudioClip) -> Result<(Vec<f64>, Vec<f32>)> {
        let clip = if clip.sample_rate != self.model.cqt.sample_rate {
            resample(clip, self.model.cqt.sample_rate)?
        } else {
            clip.clone()
        };
        if clip.samples.len() < self.model.cqt.hop {
            return invalid(format!(
                "clip '{}' has {} samples, shorter than one {}-sample frame",
                clip.id,
                clip.samples.len(),
                self.model.cqt.hop
            ));
        }
        let coeffs = self.plan.transform_complex(&clip.samples)?;
        let k = self.model.cqt.n_bins;
        let n_frames = coeffs.len() / k;
        let start = self.model.crop.k_max;
        let f = self.model.crop.out_bins();
        let mut out = Vec::with_capacity(n_frames * f);
        for t in 0..n_frames {
            let row = &coeffs[t * k + start..t * k + start + f];
            out.extend(row.iter().map(|&c| crate::cqt::to_db(c)));
        }
        let hop = self.model.cqt.hop as f64 / self.model.cqt.sample_rate as f64;
        Ok(((0..n_frames).map(|t| t as f64 * hop).collect(), out))
    }

    /// Frame times and eval-mode output distributions.
    pub fn distributions(&self, clip: &AudioClip) -> Result<(Vec<f64>, Vec<PitchDistribution>)> {
        let (times, frames) = self.frames(clip)?;
        Ok((times, self.model.network.predict_batch(&frames)?))
    }

    fn class_position(&self, d: &PitchDistribution) -> f64 {
        let j = d.argmax();
        if !self.infer.parabolic || j == 0 || j + 1 >= d.probs.len() {
            return j as f64;
        }
        let l = |i: usize| (d.probs[i].max(1e-30) as f64).ln();
        let (a, b, c) = (l(j - 1), l(j), l(j + 1));
        let den = a - 2.0 * b + c;
        if den >= 0.0 {
            return j as f64;
        }
        j as f64 + (0.5 * (a - c) / den).clamp(-0.5, 0.5)
    }

    pub fn infer(&self, clip: &AudioClip) -> Result<PitchTrack> {
        let Some(cal) = &self.model.calibration else {
            return invalid("model is not calibrated; run calibration first");
        };
        let (times, dists) = self.distributions(clip)?;
        let mut track = PitchTrack {
            times,
            pitch_hz: Vec::with_capacity(dists.len()),
            pitch_semitones: Vec::with_capacity(dists.len()),
            confidence: Vec::with_capacity(dists.len()),
        };
        for d in &dists {
            let p = cal.pitch(self.class_position(d));
            let conf = d.confidence() as f64;
            track.pitch_semitones.push(p);
            track.confidence.push(conf);
            track
                .pitch_hz
                .push(if conf >= self.infer.confidence_floor { semitones_to_hz(p) } else { 0.0 });
        }
        Ok(track)
    }

    /// Compute the offset on clips with known pitch and store it in the model.
    pub fn calibrate(&mut self, data: &[(AudioClip, PitchAnnotation)]) -> Result<Calibration> {
        let hop = self.model.cqt.hop as f64 / self.model.cqt.sample_rate as f64;
        let per_clip: Vec<Result<Vec<(usize, f64)>>> = data
            .par_iter()
            .map(|(clip, ann)| {
                let (times, dists) = self.distributions(clip)?;
                Ok(times
                    .iter()
                    .zip(&dists)
                    .filter_map(|(&t, d)| {
                        let f = ann.value_at(t, Interpolation::Nearest { max_gap: 0.5 * hop })?;
                        (f > 0.0).then(|| (d.argmax(), hz_to_semitones(f)))
                    })
                    .collect())
            })
            .collect();
        let mut pairs = Vec::new();
        for p in per_clip {
            pairs.extend(p?);
        }
        let cal = calibrate_from_pairs(&pairs, self.model.cqt.bins_per_semitone)?;
        self.model.calibration = Some(cal.clone());
        Ok(cal)
    }

    /// Time `repeats` passes over `clip`; returns seconds of audio processed
    /// per second of wall time, with the last output.
    pub fn benchmark(&self, clip: &AudioClip, repeats: usize) -> Result<(f64, PitchTrack)> {
        let mut last = self.infer(clip)?;
        let start = Instant::now();
        for _ in 0..repeats.max(1) {
            last = self.infer(clip)?;
        }
        let elapsed = start.elapsed().as_secs_f64();
        Ok((clip.duration() * repeats.max(1) as f64 / elapsed, last))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions() {
        assert_eq!(semitones_to_hz(69.0), 440.0);
        assert!((hz_to_semitones(27.5) - 21.0).abs() < 1e-12);
        for f in [31.7, 100.0, 523.25, 4000.0] {
            assert!((hz_to_semitones(semitones_to_hz(hz_to_semitones(f))) - hz_to_semitones(f)).abs() < 1e-9);
        }
    }

    #[test]
    fn calibration_cases() {
        let perfect: Vec<(usize, f64)> = (40..80).map(|p| (3 * p, p as f64)).collect();
        let c = calibrate_from_pairs(&perfect, 3).unwrap();
        assert_eq!(c.p0, 0);
        assert_eq!(c.residual_iqr, 0.0);

        let offset: Vec<(usize, f64)> = (40..80).map(|p| (3 * p + 63, p as f64)).collect();
        assert_eq!(calibrate_from_pairs(&offset, 3).unwrap().p0, -63);
        assert!(calibrate_from_pairs(&[], 3).is_err());
    }

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.25), 1.75);
    }

    #[test]
    fn csv_format() {
        let t = PitchTrack {
            times: vec![0.0, 0.01],
            pitch_hz: vec![440.0, 0.0],
            pitch_semitones: vec![69.0, 69.0],
            confidence: vec![0.91234, 0.1],
        };
        assert_eq!(t.to_csv(), "time,frequency,confidence\n0.0000,440.000,0.9123\n0.0100,0.000,0.1000\n");
    }
}
