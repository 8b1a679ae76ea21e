//! Command-line driver: train, calibrate, infer, evaluate, synthesize data
//! and benchmark.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! abort during training.

mod data;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use pesto_core::audio::{self, save_wav};
use pesto_core::config::{config_reference, RunConfig};
use pesto_core::eval::{self, Snr, StemPair};
use pesto_core::pairgen::BetaDist;
use pesto_core::pitch_head::Calibration;
use pesto_core::trainer::log_csv;
use pesto_core::{CqtPlan, FramePool, ModelFile, Network, PitchEstimator, SynthSpec, Trainer};

/// A failed command: message and process exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<pesto_core::Error> for Failure {
    fn from(e: pesto_core::Error) -> Self {
        let code = match e {
            pesto_core::Error::Numerical(_) => 4,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "pesto", version, about = "Self-supervised pitch estimation")]
struct Cli {
    /// JSON run configuration (defaults apply to missing keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace one config value, e.g. `train.epochs=1`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (replaces the `seed` config key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "PESTO_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on a directory of WAVs, calibrate and write the model.
    Train {
        /// Directory of training WAVs.
        #[arg(long)]
        data: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint file (default: model path with a `.ckpt` extension).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write a "time,frequency,confidence" CSV for one audio file.
    Infer {
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        /// Audio file (WAV).
        #[arg(long)]
        audio: PathBuf,
        /// Output CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also draw the track over the spectrogram as SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Raw pitch and chroma accuracy over an annotated directory.
    Eval {
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        /// Directory of WAVs with annotations.
        #[arg(long)]
        data: PathBuf,
        /// SNR sweep columns, e.g. `clean,20,10,0`. Needs background stems.
        #[arg(long)]
        snr: Option<String>,
        /// Report the loss terms the model was trained with.
        #[arg(long)]
        ablation: bool,
        /// Report JSON (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-clip CSV table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Recompute the pitch offset on synthetic clips and rewrite the model.
    Calibrate {
        /// Model file.
        #[arg(long)]
        model: PathBuf,
        /// Destination (default: overwrite the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic harmonic clips with CSV annotations.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of clips (default: `synth.n_samples`).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Measure inference speed as a multiple of real time.
    Bench {
        /// Model to time (default: a randomly initialized one).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Length of the test signal, seconds.
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Show the effective configuration or the key reference.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Effective configuration as JSON.
    Print,
    /// Every key with its default.
    Reference,
}

fn main() -> ExitCode {
    let help = format!("Configuration keys (default, meaning):\n{}", config_reference());
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::config(e.to_string()))?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o).map_err(|e| Failure::config(e.to_string()))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Train {
            data,
            out,
            checkpoint,
            resume,
        } => train(&cfg, &data, &out, checkpoint, resume.as_deref()),
        Command::Infer { model, audio, out, plot } => infer(&cfg, &model, &audio, out.as_deref(), plot.as_deref()),
        Command::Eval {
            model,
            data,
            snr,
            ablation,
            out,
            csv,
        } => evaluate(&cfg, &model, &data, snr.as_deref(), ablation, out.as_deref(), csv.as_deref()),
        Command::Calibrate { model, out } => calibrate(&cfg, &model, out.as_deref()),
        Command::Synth { out, count } => synth(&cfg, &out, count),
        Command::Bench { model, seconds, repeats } => bench(&cfg, model.as_deref(), seconds, repeats),
        Command::Config { action } => {
            match action {
                ConfigAction::Print => println!("{}", cfg.to_json_pretty()),
                ConfigAction::Reference => print!("{}", config_reference()),
            }
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<ModelFile, Failure> {
    ModelFile::load(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: &[u8]) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn load_clips(paths: &[PathBuf], rate: u32) -> Result<Vec<pesto_core::AudioClip>, Failure> {
    paths.par_iter().map(|p| data::load_clip(p, rate)).collect()
}

fn train(cfg: &RunConfig, dir: &Path, out: &Path, checkpoint: Option<PathBuf>, resume: Option<&Path>) -> CmdResult {
    let wavs = data::wav_files(dir, None)?;
    let clips = load_clips(&wavs, cfg.cqt.sample_rate)?;
    let plan = CqtPlan::new(&cfg.cqt).map_err(|e| Failure::config(e.to_string()))?;
    let mixing = cfg.augment.background_beta != BetaDist::None;
    let mut pool = FramePool::from_clips(&plan, &clips, cfg.train.frames_per_clip, mixing)?;
    if mixing {
        if cfg.io.background_dir.is_empty() {
            return Err(Failure::config("augment.background_beta is set but io.background_dir is empty"));
        }
        let bg_paths = data::wav_files(Path::new(&cfg.io.background_dir), None)?;
        let bg = load_clips(&bg_paths, cfg.cqt.sample_rate)?;
        pool.background = FramePool::from_clips(&plan, &bg, cfg.train.frames_per_clip, true)?.complex;
    }
    eprintln!("{} clips, {} training frames", clips.len(), pool.len());

    let fingerprint = cfg.fingerprint();
    let mut trainer = match resume {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
            Trainer::from_checkpoint(&bytes)?.0
        }
        None => {
            let net = Network::new(&cfg.model, cfg.seed).map_err(|e| Failure::config(e.to_string()))?;
            Trainer::new(
                net,
                cfg.seed,
                cfg.train.clone(),
                cfg.loss.clone(),
                cfg.augment.clone(),
                cfg.crop.clone(),
            )
            .map_err(|e| Failure::config(e.to_string()))?
        }
    };
    let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
    trainer.dump_dir = Some(out_dir.clone());
    let ckpt = checkpoint.unwrap_or_else(|| out.with_extension("ckpt"));
    let every = trainer.train.checkpoint_every;
    trainer.fit(&pool, |t| {
        if let Some(row) = t.log.last() {
            eprintln!(
                "epoch {}/{} step {} loss {:.4} (inv {:.4} equiv {:.4} sce {:.4})",
                t.epoch, t.train.epochs, t.step, row.report.total, row.report.inv, row.report.equiv, row.report.sce
            );
        }
        if every > 0 && t.epoch % every == 0 {
            t.save_checkpoint(&ckpt, cfg.cqt.clone(), &fingerprint)?;
        }
        Ok(())
    })?;
    write(&out_dir.join(&cfg.io.log_file), log_csv(&trainer.log).as_bytes())?;

    let mut est = PitchEstimator::new(trainer.model_file(cfg.cqt.clone(), &fingerprint), cfg.eval.infer())?;
    let cal = est.calibrate(&audio::synth_dataset(&cfg.synth)?)?;
    est.model
        .save(out)
        .map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
    print_calibration(&cal);
    Ok(())
}

fn print_calibration(cal: &Calibration) {
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "p0": cal.p0,
            "residual_median_bins": cal.residual_median,
            "residual_iqr_bins": cal.residual_iqr,
            "residual_iqr_semitones": cal.residual_iqr_semitones(),
            "frames": cal.n_frames,
        }))
        .expect("serializes")
    );
}

fn infer(cfg: &RunConfig, model: &Path, audio_path: &Path, out: Option<&Path>, plot: Option<&Path>) -> CmdResult {
    let est = PitchEstimator::new(load_model(model)?, cfg.eval.infer())?;
    let clip = data::load_clip(audio_path, est.model.cqt.sample_rate)?;
    let track = est
        .infer(&clip)
        .map_err(|e| Failure::data(format!("{}: {e}", audio_path.display())))?;
    match out {
        Some(p) => write(p, track.to_csv().as_bytes())?,
        None => print!("{}", track.to_csv()),
    }
    if let Some(p) = plot {
        write(p, plot::render(&est, &clip, &track)?.as_bytes())?;
    }
    Ok(())
}

fn evaluate(
    cfg: &RunConfig,
    model: &Path,
    dir: &Path,
    snr: Option<&str>,
    ablation: bool,
    out: Option<&Path>,
    csv: Option<&Path>,
) -> CmdResult {
    let est = PitchEstimator::new(load_model(model)?, cfg.eval.infer())?;
    let suffix = cfg.eval.background_suffix.as_str();
    let wavs = data::wav_files(dir, Some(suffix))?;
    let pairs: Vec<(PathBuf, pesto_core::AudioClip, pesto_core::PitchAnnotation)> = wavs
        .par_iter()
        .map(|w| Ok(data::load_annotated(w, cfg)?.map(|(c, a)| (w.clone(), c, a))))
        .collect::<Result<Vec<_>, Failure>>()?
        .into_iter()
        .flatten()
        .collect();
    if pairs.is_empty() {
        return Err(Failure::data(format!("no annotated clips in {}", dir.display())));
    }
    let fingerprint = est.model.training.as_ref().map(|t| t.fingerprint.clone());

    let mut doc = match snr {
        None => {
            let tracks = pairs
                .par_iter()
                .map(|(_, c, a)| Ok((est.infer(c)?, a.clone())))
                .collect::<Result<Vec<_>, Failure>>()?;
            let mut report = eval::evaluate(&tracks)?;
            report.fingerprint = fingerprint;
            if let Some(p) = csv {
                write(p, eval::per_clip_csv(&report).as_bytes())?;
            }
            serde_json::to_value(&report).expect("serializes")
        }
        Some(list) => {
            let snrs = Snr::parse_list(list).map_err(|e| Failure::config(e.to_string()))?;
            let stems = pairs
                .iter()
                .map(|(w, c, a)| {
                    let bg = data::background_path(w, suffix);
                    if !bg.is_file() {
                        return Err(Failure::data(format!("missing background stem {}", bg.display())));
                    }
                    Ok(StemPair {
                        vocals: c.clone(),
                        background: data::load_clip(&bg, cfg.cqt.sample_rate)?,
                        truth: a.clone(),
                    })
                })
                .collect::<Result<Vec<_>, Failure>>()?;
            let columns = eval::snr_sweep(&est, &stems, &snrs)?;
            eprintln!("{:>8}  {:>7}  {:>7}", "snr", "rpa", "rca");
            for (label, r) in &columns {
                eprintln!("{label:>8}  {:>7.4}  {:>7.4}", r.rpa, r.rca);
            }
            if let Some(p) = csv {
                let mut s = String::from("snr,rpa,rca,n_voiced\n");
                for (label, r) in &columns {
                    s.push_str(&format!("{label},{:.6},{:.6},{}\n", r.rpa, r.rca, r.n_voiced));
                }
                write(p, s.as_bytes())?;
            }
            json!({
                "fingerprint": fingerprint,
                "columns": columns
                    .iter()
                    .map(|(label, r)| json!({ "snr": label, "report": r }))
                    .collect::<Vec<_>>(),
            })
        }
    };
    if ablation {
        let loss = est.model.training.as_ref().map(|t| &t.loss);
        doc["loss_terms"] = match loss {
            Some(l) => json!({
                "use_inv": l.use_inv,
                "use_equiv": l.use_equiv,
                "use_sce": l.use_sce,
                "weighting": l.weighting,
                "lambda_inv": l.lambda_inv,
                "lambda_equiv": l.lambda_equiv,
                "lambda_sce": l.lambda_sce,
            }),
            None => serde_json::Value::Null,
        };
    }
    let text = serde_json::to_string_pretty(&doc).expect("serializes");
    match out {
        Some(p) => write(p, format!("{text}\n").as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn calibrate(cfg: &RunConfig, model: &Path, out: Option<&Path>) -> CmdResult {
    let mut est = PitchEstimator::new(load_model(model)?, cfg.eval.infer())?;
    let cal = est.calibrate(&audio::synth_dataset(&cfg.synth)?)?;
    let dest = out.unwrap_or(model);
    est.model
        .save(dest)
        .map_err(|e| Failure::data(format!("{}: {e}", dest.display())))?;
    print_calibration(&cal);
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path, count: Option<usize>) -> CmdResult {
    let spec = SynthSpec {
        n_samples: count.unwrap_or(cfg.synth.n_samples),
        ..cfg.synth.clone()
    };
    spec.validate().map_err(|e| Failure::config(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
    let width = spec.n_samples.to_string().len();
    (0..spec.n_samples).into_par_iter().try_for_each(|i| {
        let (clip, ann) = spec.generate_one(i);
        let stem = out.join(format!("synth_{i:0width$}"));
        save_wav(&clip, stem.with_extension("wav"))?;
        ann.save_csv(stem.with_extension(&cfg.io.annotation_ext))?;
        Ok::<_, Failure>(())
    })?;
    eprintln!("wrote {} clips to {}", spec.n_samples, out.display());
    Ok(())
}

fn bench(cfg: &RunConfig, model: Option<&Path>, seconds: f64, repeats: usize) -> CmdResult {
    let file = match model {
        Some(p) => load_model(p)?,
        None => ModelFile {
            network: Network::new(&cfg.model, cfg.seed).map_err(|e| Failure::config(e.to_string()))?,
            cqt: cfg.cqt.clone(),
            crop: cfg.crop.clone(),
            calibration: Some(Calibration {
                p0: 0,
                bins_per_semitone: cfg.cqt.bins_per_semitone,
                residual_median: 0.0,
                residual_iqr: 0.0,
                n_frames: 0,
            }),
            training: None,
        },
    };
    if file.calibration.is_none() {
        return Err(Failure::data("model is not calibrated; run calibrate first"));
    }
    let est = PitchEstimator::new(file, cfg.eval.infer())?;
    let spec = SynthSpec {
        duration: seconds,
        sample_rate: est.model.cqt.sample_rate,
        ..cfg.synth.clone()
    };
    let (clip, _) = spec.generate_one(0);
    let (rt_a, track_a) = est.benchmark(&clip, repeats)?;
    let (rt_b, track_b) = est.benchmark(&clip, repeats)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "audio_seconds": clip.duration(),
            "repeats": repeats,
            "realtime_factor": rt_a.min(rt_b),
            "deterministic": track_a == track_b,
        }))
        .expect("serializes")
    );
    Ok(())
}
