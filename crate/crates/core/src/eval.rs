//! Raw pitch and raw chroma accuracy over annotated voiced frames, plus the
//! SNR sweep driver.
//!
//! Truth is aligned to prediction frames by nearest neighbour in time with a
//! maximum gap of half the frame hop; frames without truth in reach, and
//! frames whose truth is unvoiced, are left out.

use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, Interpolation, PitchAnnotation};
use crate::error::{invalid, Result};
use crate::pitch_head::{hz_to_semitones, PitchEstimator, PitchTrack};

/// Strict threshold, in semitones, for a frame to count as correct.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub id: String,
    pub rpa: f64,
    pub rca: f64,
    pub n_voiced: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rpa: f64,
    pub rca: f64,
    pub n_voiced: usize,
    pub per_clip: Vec<ClipReport>,
    pub fingerprint: Option<String>,
}

fn median_spacing(times: &[f64]) -> Option<f64> {
    let mut d: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Signed semitone errors `p_hat - p_true` on voiced, aligned frames.
pub fn aligned_errors(pred: &PitchTrack, truth: &PitchAnnotation) -> Vec<f64> {
    let gap = 0.5 * median_spacing(&pred.times).unwrap_or(0.01);
    pred.times
        .iter()
        .zip(&pred.pitch_semitones)
        .filter_map(|(&t, &p)| {
            let f = truth.value_at(t, Interpolation::Nearest { max_gap: gap })?;
            (f > 0.0).then(|| p - hz_to_semitones(f))
        })
        .collect()
}

/// Octave-folded distance of a semitone error.
pub fn chroma_distance(e: f64) -> f64 {
    let m = e.abs() % 12.0;
    m.min(12.0 - m)
}

pub fn rpa_from_errors(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return invalid("no voiced frames to evaluate");
    }
    Ok(errors.iter().filter(|e| e.abs() < THRESHOLD).count() as f64 / errors.len() as f64)
}

pub fn rca_from_errors(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return invalid("no voiced frames to evaluate");
    }
    Ok(errors.iter().filter(|&&e| chroma_distance(e) < THRESHOLD).count() as f64 / errors.len() as f64)
}

pub fn rpa(pred: &PitchTrack, truth: &PitchAnnotation) -> Result<f64> {
    rpa_from_errors(&aligned_errors(pred, truth))
}

pub fn rca(pred: &PitchTrack, truth: &PitchAnnotation) -> Result<f64> {
    rca_from_errors(&aligned_errors(pred, truth))
}

/// Metrics pooled over all voiced frames of all clips.
pub fn evaluate(pairs: &[(PitchTrack, PitchAnnotation)]) -> Result<EvalReport> {
    let mut all = Vec::new();
    let mut per_clip = Vec::new();
    for (track, ann) in pairs {
        let e = aligned_errors(track, ann);
        if !e.is_empty() {
            per_clip.push(ClipReport {
                id: ann.id.clone(),
                rpa: rpa_from_errors(&e)?,
                rca: rca_from_errors(&e)?,
                n_voiced: e.len(),
            });
        }
        all.extend(e);
    }
    Ok(EvalReport {
        rpa: rpa_from_errors(&all)?,
        rca: rca_from_errors(&all)?,
        n_voiced: all.len(),
        per_clip,
        fingerprint: None,
    })
}

/// Per-clip CSV table.
pub fn per_clip_csv(report: &EvalReport) -> String {
    let mut s = String::from("id,rpa,rca,n_voiced\n");
    for c in &report.per_clip {
        s.push_str(&format!("{},{:.6},{:.6},{}\n", c.id, c.rpa, c.rca, c.n_voiced));
    }
    s
}

/// Target signal-to-noise ratio of a sweep column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Clean,
    Db(f64),
}

impl Snr {
    pub fn label(&self) -> String {
        match self {
            Snr::Clean => "clean".to_string(),
            Snr::Db(d) => format!("{d}"),
        }
    }

    /// Parse a comma-separated list such as `clean,20,10,0`.
    pub fn parse_list(s: &str) -> Result<Vec<Snr>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                if t.eq_ignore_ascii_case("clean") || t.eq_ignore_ascii_case("inf") {
                    Ok(Snr::Clean)
                } else {
                    t.trim_end_matches("dB")
                        .trim_end_matches("db")
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .map(Snr::Db)
                        .ok_or_else(|| crate::Error::Validation(format!("bad SNR value '{t}'")))
                }
            })
            .collect()
    }
}

/// Per-sample voicing from the annotation.
fn voiced_mask(n: usize, sample_rate: u32, truth: &PitchAnnotation) -> Vec<bool> {
    let gap = 0.5 * median_spacing(&truth.times).unwrap_or(0.01);
    (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            truth
                .value_at(t, Interpolation::Nearest { max_gap: gap })
                .is_some_and(|f| f > 0.0)
        })
        .collect()
}

/// `vocals + g * background` with `g` chosen so the power ratio over voiced
/// samples equals `snr_db`.
pub fn mix_at_snr(vocals: &AudioClip, background: &AudioClip, truth: &PitchAnnotation, snr_db: f64) -> Result<AudioClip> {
    if vocals.sample_rate != background.sample_rate || vocals.samples.len() != background.samples.len() {
        return invalid(format!(
            "stems '{}' and '{}' are not paired (rate or length differ)",
            vocals.id, background.id
        ));
    }
    let mask = voiced_mask(vocals.samples.len(), vocals.sample_rate, truth);
    let (mut pv, mut pb, mut n) = (0.0, 0.0, 0usize);
    for ((&v, &b), &m) in vocals.samples.iter().zip(&background.samples).zip(&mask) {
        if m {
            pv += (v as f64).powi(2);
            pb += (b as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return invalid(format!("clip '{}' has no voiced samples to measure power on", vocals.id));
    }
    if pb <= 0.0 {
        return invalid(format!("background '{}' is silent; SNR scaling is undefined", background.id));
    }
    let gain = (pv / (pb * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = vocals
        .samples
        .iter()
        .zip(&background.samples)
        .map(|(&v, &b)| (v as f64 + gain * b as f64) as f32)
        .collect();
    AudioClip::new(samples, vocals.sample_rate, vocals.id.clone())
}

/// A vocal stem, its accompaniment and the vocal pitch truth.
#[derive(Debug, Clone)]
pub struct StemPair {
    pub vocals: AudioClip,
    pub background: AudioClip,
    pub truth: PitchAnnotation,
}

/// One report per SNR column, mixing in the time domain before the CQT.
pub fn snr_sweep(est: &PitchEstimator, pairs: &[StemPair], snrs: &[Snr]) -> Result<Vec<(String, EvalReport)>> {
    if pairs.is_empty() {
        return invalid("SNR sweep needs at least one stem pair");
    }
    snrs.iter()
        .map(|snr| {
            let tracks = pairs
                .iter()
                .map(|p| {
                    let clip = match snr {
                        Snr::Clean => p.vocals.clone(),
                        Snr::Db(d) => mix_at_snr(&p.vocals, &p.background, &p.truth, *d)?,
                    };
                    Ok((est.infer(&clip)?, p.truth.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((snr.label(), evaluate(&tracks)?))
        })
        .collect()
}
