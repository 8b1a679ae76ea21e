//! Dataset directories: WAV files with optional annotations beside them.

use std::fs;
use std::path::{Path, PathBuf};

use pesto_core::audio;
use pesto_core::config::RunConfig;
use pesto_core::{AudioClip, PitchAnnotation};

use crate::Failure;

/// Sorted WAV paths in `dir`, skipping background stems.
pub fn wav_files(dir: &Path, skip_suffix: Option<&str>) -> Result<Vec<PathBuf>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::data(format!("data directory {} does not exist", dir.display())));
    }
    let entries = fs::read_dir(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .filter(|p| match (skip_suffix, p.file_stem().and_then(|s| s.to_str())) {
            (Some(suf), Some(stem)) if !suf.is_empty() => !stem.ends_with(suf),
            _ => true,
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Failure::data(format!("no WAV files in {}", dir.display())));
    }
    Ok(out)
}

pub fn load_clip(path: &Path, rate: u32) -> Result<AudioClip, Failure> {
    let clip = audio::load_wav(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    if clip.sample_rate == rate {
        return Ok(clip);
    }
    audio::resample(&clip, rate).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn annotation_path(wav: &Path, cfg: &RunConfig) -> PathBuf {
    wav.with_extension(&cfg.io.annotation_ext)
}

/// Clip paired with its annotation, or `None` when there is no annotation.
pub fn load_annotated(wav: &Path, cfg: &RunConfig) -> Result<Option<(AudioClip, PitchAnnotation)>, Failure> {
    let ann = annotation_path(wav, cfg);
    if !ann.is_file() {
        return Ok(None);
    }
    let clip = load_clip(wav, cfg.cqt.sample_rate)?;
    let truth = audio::load_annotations(&ann, cfg.io.annotation_format())
        .map_err(|e| Failure::data(format!("{}: {e}", ann.display())))?;
    Ok(Some((clip, truth)))
}

/// Background stem for `wav`, named `<stem><suffix>.wav`.
pub fn background_path(wav: &Path, suffix: &str) -> PathBuf {
    let stem = wav.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    wav.with_file_name(format!("{stem}{suffix}.wav"))
}
