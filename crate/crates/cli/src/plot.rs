//! SVG rendering of a pitch track over the network's input spectrogram.

use std::fmt::Write;

use pesto_core::{AudioClip, PitchEstimator, PitchTrack};

const MAX_COLUMNS: usize = 300;
const CELL_W: f64 = 3.0;
const CELL_H: f64 = 4.0;

/// Grey-scale CQT (time downsampled, bins pooled per semitone) with the
/// voiced part of the track drawn as a red polyline.
pub fn render(est: &PitchEstimator, clip: &AudioClip, track: &PitchTrack) -> pesto_core::Result<String> {
    let (_, frames) = est.frames(clip)?;
    let f = est.model.crop.out_bins();
    let n = frames.len() / f;
    let group = est.model.cqt.bins_per_semitone.max(1) as usize;
    let rows = f.div_ceil(group);
    let cols = n.clamp(1, MAX_COLUMNS);

    let mut cells = vec![0.0f32; rows * cols];
    let mut counts = vec![0u32; rows * cols];
    for t in 0..n {
        let c = t * cols / n.max(1);
        for (b, &v) in frames[t * f..(t + 1) * f].iter().enumerate() {
            let r = b / group;
            cells[r * cols + c] += v;
            counts[r * cols + c] += 1;
        }
    }
    for (v, &k) in cells.iter_mut().zip(&counts) {
        if k > 0 {
            *v /= k as f32;
        }
    }
    let lo = cells.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = cells.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);

    let width = cols as f64 * CELL_W;
    let height = rows as f64 * CELL_H;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="black"/>"#);
    for r in 0..rows {
        for c in 0..cols {
            let level = ((cells[r * cols + c] - lo) / span * 255.0).round() as u8;
            if level < 8 {
                continue;
            }
            // Low frequencies at the bottom.
            let y = (rows - 1 - r) as f64 * CELL_H;
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="rgb({level},{level},{level})"/>"#,
                c as f64 * CELL_W
            );
        }
    }

    let k_max = est.model.crop.k_max as f64;
    let dur = (n as f64).max(1.0);
    let mut segment: Vec<String> = Vec::new();
    let flush = |seg: &mut Vec<String>, svg: &mut String| {
        if seg.len() > 1 {
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="red" stroke-width="1.5" points="{}"/>"#,
                seg.join(" ")
            );
        }
        seg.clear();
    };
    for (t, &hz) in track.pitch_hz.iter().enumerate() {
        if hz <= 0.0 {
            flush(&mut segment, &mut svg);
            continue;
        }
        let bin = est.model.cqt.bin_of(hz) - k_max;
        let x = (t as f64 + 0.5) / dur * width;
        let y = height - (bin + 0.5) / group as f64 * CELL_H;
        segment.push(format!("{x:.1},{y:.1}"));
    }
    flush(&mut segment, &mut svg);
    svg.push_str("</svg>\n");
    Ok(svg)
}
