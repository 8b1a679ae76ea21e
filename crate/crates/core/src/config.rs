//! Run configuration: every tunable of the pipeline in one JSON document.
//!
//! Unknown keys are rejected at every level. Individual values can be
//! replaced with `section.key=value` overrides, where `value` is parsed as
//! JSON and falls back to a plain string.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::audio::{AnnotationFormat, SynthSpec};
use crate::cqt::CqtConfig;
use crate::error::{invalid, Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::pairgen::{AugmentConfig, CropConfig};
use crate::pitch_head::InferConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    TimeFreqCsv,
    Mir1kPv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub annotation_format: AnnotationKind,
    /// File extension of annotations next to each WAV.
    pub annotation_ext: String,
    /// Frame hop of pitch-vector annotations, seconds.
    pub pv_hop: f64,
    /// Time of the first pitch-vector frame, seconds.
    pub pv_first_time: f64,
    /// Training log file name, written next to the model.
    pub log_file: String,
    /// Directory of background WAVs for complex-domain mixing during
    /// training (empty = none).
    pub background_dir: String,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            annotation_format: AnnotationKind::TimeFreqCsv,
            annotation_ext: "csv".to_string(),
            pv_hop: 0.02,
            pv_first_time: 0.02,
            log_file: "train_log.csv".to_string(),
            background_dir: String::new(),
        }
    }
}

impl IoConfig {
    pub fn annotation_format(&self) -> AnnotationFormat {
        match self.annotation_format {
            AnnotationKind::TimeFreqCsv => AnnotationFormat::TimeFreqCsv,
            AnnotationKind::Mir1kPv => AnnotationFormat::Mir1kPv {
                hop: self.pv_hop,
                first_time: self.pv_first_time,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub confidence_floor: f64,
    pub parabolic: bool,
    /// Default SNR columns of the sweep.
    pub snr_list: String,
    /// Background stem of `name.wav` is `name<suffix>.wav`.
    pub background_suffix: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            confidence_floor: 0.0,
            parabolic: false,
            snr_list: "clean,20,10,0".to_string(),
            background_suffix: "_bg".to_string(),
        }
    }
}

impl EvalConfig {
    pub fn infer(&self) -> InferConfig {
        InferConfig {
            confidence_floor: self.confidence_floor,
            parabolic: self.parabolic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub cqt: CqtConfig,
    pub crop: CropConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Calibration set.
    pub synth: SynthSpec,
    pub eval: EvalConfig,
    pub io: IoConfig,
    /// Seeds model initialization, shuffling, augmentation and dropout.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cqt: CqtConfig::default(),
            crop: CropConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            eval: EvalConfig::default(),
            io: IoConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Pretty JSON, suitable as a config file.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.cqt.validate()?;
        self.crop.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.crop.input_bins != self.cqt.n_bins {
            return invalid(format!(
                "crop.input_bins ({}) must equal cqt.n_bins ({})",
                self.crop.input_bins, self.cqt.n_bins
            ));
        }
        if self.model.in_bins != self.crop.out_bins() {
            return invalid(format!(
                "model.in_bins ({}) must equal cqt.n_bins - 2 * crop.k_max ({})",
                self.model.in_bins,
                self.crop.out_bins()
            ));
        }
        if self.synth.sample_rate != self.cqt.sample_rate {
            return invalid("synth.sample_rate must equal cqt.sample_rate");
        }
        if !(0.0..=1.0).contains(&self.eval.confidence_floor) {
            return invalid("eval.confidence_floor must lie in [0, 1]");
        }
        crate::eval::Snr::parse_list(&self.eval.snr_list)?;
        Ok(())
    }

    /// Apply `section.key=value` (or `key=value` for top-level keys).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("override '{spec}' is not of the form section.key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Validation(format!("unknown config key '{path}'")))?;
        }
        *slot = value;
        let updated: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::Validation(format!("override '{spec}': {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// SHA-256 of the compact JSON form.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Short descriptions for the config reference.
const DESCRIPTIONS: &[(&str, &str)] = &[
    ("cqt.f_min", "lowest bin centre, Hz"),
    ("cqt.bins_per_semitone", "bins per semitone b"),
    ("cqt.n_bins", "number of log-frequency bins K (99 b)"),
    ("cqt.hop", "frame hop, samples"),
    ("cqt.sample_rate", "working sample rate, Hz"),
    ("cqt.output_scale", "db or complex"),
    ("crop.k_max", "largest simulated shift, bins"),
    ("crop.input_bins", "bins of the incoming frame (= cqt.n_bins)"),
    ("augment.p_apply", "probability of each augmentation"),
    ("augment.noise_std_range", "white-noise std range, dB"),
    ("augment.gain_range_db", "gain range, dB"),
    ("augment.background_beta", "background mix coefficient: none, const:c, uniform01, gauss:sigma"),
    ("model.in_bins", "network input bins F = K - 2 k_max"),
    ("model.conv_channels", "output channels per conv"),
    ("model.kernel_sizes", "kernel size per conv (odd)"),
    ("model.residual_layers", "leading convs with skip connections"),
    ("model.out_dim", "output classes d"),
    ("model.dropout", "dropout rate"),
    ("model.leaky_slope", "leaky ReLU negative slope"),
    ("model.toeplitz", "Toeplitz output layer (false = dense ablation)"),
    ("model.layernorm_eps", "layer-norm variance guard"),
    ("loss.alpha", "projection ratio per bin, 2^(1/36)"),
    ("loss.tau", "Huber threshold"),
    ("loss.weighting", "fixed or grad_balanced"),
    ("loss.lambda_inv", "weight of the invariance term"),
    ("loss.lambda_equiv", "weight of the equivariance term"),
    ("loss.lambda_sce", "weight of the shifted cross-entropy term"),
    ("loss.use_inv", "enable the invariance term"),
    ("loss.use_equiv", "enable the equivariance term"),
    ("loss.use_sce", "enable the shifted cross-entropy term"),
    ("loss.eps_log", "clamp inside logarithms"),
    ("loss.balance_eps", "guard on gradient norms (grad_balanced)"),
    ("loss.balance_clamp", "range of balanced weights"),
    ("train.batch_size", "items per step"),
    ("train.lr", "peak learning rate"),
    ("train.epochs", "passes over the frame pool"),
    ("train.betas", "Adam moment decay rates"),
    ("train.eps_adam", "Adam denominator guard"),
    ("train.schedule", "cosine or constant"),
    ("train.checkpoint_every", "checkpoint period in epochs (0 = off)"),
    ("train.log_every", "log period in steps"),
    ("train.grad_clip", "global gradient-norm clip (0 = off)"),
    ("train.frames_per_clip", "evenly spaced frames per clip (0 = all)"),
    ("train.precision", "f32 or f64 arithmetic"),
    ("synth.n_samples", "calibration clips"),
    ("synth.f0_range", "f0 range, Hz (log-uniform)"),
    ("synth.n_harmonics_max", "max harmonics per clip"),
    ("synth.amp_decay_range", "harmonic amplitude ratio range"),
    ("synth.duration", "clip length, s"),
    ("synth.noise_floor", "additive noise std"),
    ("synth.seed", "generator seed"),
    ("synth.sample_rate", "sample rate, Hz"),
    ("synth.annotation_hop", "annotation spacing, s"),
    ("eval.confidence_floor", "frames below this confidence are unvoiced"),
    ("eval.parabolic", "sub-bin parabolic refinement"),
    ("eval.snr_list", "SNR sweep columns"),
    ("eval.background_suffix", "background stem suffix"),
    ("io.annotation_format", "time_freq_csv or mir1k_pv"),
    ("io.annotation_ext", "annotation file extension"),
    ("io.pv_hop", "pitch-vector frame hop, s"),
    ("io.pv_first_time", "time of first pitch-vector frame, s"),
    ("io.log_file", "training log file name"),
    ("io.background_dir", "background WAVs for training-time mixing"),
    ("seed", "master seed"),
];

/// Every config key with its default and a description.
pub fn config_reference() -> String {
    let doc = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut rows = Vec::new();
    flatten("", &doc, &mut rows);
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (key, value) in rows {
        let desc = DESCRIPTIONS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d).unwrap_or("");
        out.push_str(&format!("  {key:<width$}  {value:<22} {desc}\n"));
    }
    out
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, rows);
            }
        }
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}
