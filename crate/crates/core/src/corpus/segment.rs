//! Threshold-based silence detection and clip extraction.

use std::ops::Range;

use super::audio::{AudioClip, SAMPLE_RATE};
use super::CorpusError;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationConfig {
    /// Level in dBFS (reference 32768) below which a window counts as silent.
    pub threshold_db: f64,
    /// Length of the non-overlapping RMS measurement windows.
    pub window_ms: f64,
    /// Shortest silent run that splits the audio.
    pub min_silence_ms: f64,
    pub min_clip_s: f64,
    pub max_clip_s: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            threshold_db: -40.0,
            window_ms: 10.0,
            min_silence_ms: 200.0,
            min_clip_s: 3.5,
            max_clip_s: 12.0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidConfig(m));
        if !(self.threshold_db < 0.0) {
            return bad(format!("threshold_db must be negative, got {}", self.threshold_db));
        }
        if !(self.window_ms > 0.0) || self.window_samples() == 0 {
            return bad(format!("window_ms must cover at least one sample, got {}", self.window_ms));
        }
        if !(self.min_silence_ms >= 0.0) {
            return bad(format!("min_silence_ms must be non-negative, got {}", self.min_silence_ms));
        }
        if !(self.min_clip_s < self.max_clip_s) {
            return bad(format!(
                "min_clip_s ({}) must be below max_clip_s ({})",
                self.min_clip_s, self.max_clip_s
            ));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    fn min_silence_samples(&self) -> usize {
        (self.min_silence_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }
}

/// RMS level of `samples` in dBFS. Digital silence is `-inf`.
pub fn rms_dbfs(samples: &[i16]) -> f64 {
    if samples.is_empty() {
        return f64::NEG_INFINITY;
    }
    let ms = samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / samples.len() as f64;
    20.0 * (ms.sqrt() / 32768.0).log10()
}

/// Maximal runs of windows whose level is below the threshold and whose run
/// length reaches `min_silence_ms`, as sorted, disjoint sample ranges.
///
/// A trailing partial window is measured over the samples it has. Audio
/// shorter than one window yields no intervals.
pub fn detect_silences(
    audio: &AudioClip,
    config: &SegmentationConfig,
) -> Result<Vec<Range<usize>>, CorpusError> {
    config.validate()?;
    let win = config.window_samples();
    let samples = audio.samples();
    if samples.len() < win {
        return Ok(Vec::new());
    }
    let min_run = config.min_silence_samples();
    let mut out = Vec::new();
    let mut run_start: Option<usize> = None;
    let close = |start: usize, end: usize, out: &mut Vec<Range<usize>>| {
        if end - start >= min_run.max(1) {
            out.push(start..end);
        }
    };
    for (w, chunk) in samples.chunks(win).enumerate() {
        let start = w * win;
        let silent = rms_dbfs(chunk) < config.threshold_db;
        match (silent, run_start) {
            (true, None) => run_start = Some(start),
            (false, Some(s)) => {
                close(s, start, &mut out);
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        close(s, samples.len(), &mut out);
    }
    Ok(out)
}

/// Regions between consecutive silences (or the audio boundaries) whose
/// duration lies within `[min_clip_s, max_clip_s]`.
pub fn speech_regions(
    total: usize,
    silences: &[Range<usize>],
    config: &SegmentationConfig,
) -> Vec<Range<usize>> {
    let min = (config.min_clip_s * SAMPLE_RATE as f64).ceil() as usize;
    let max = (config.max_clip_s * SAMPLE_RATE as f64).floor() as usize;
    let mut regions = Vec::new();
    let mut cursor = 0;
    for s in silences.iter().chain(std::iter::once(&(total..total))) {
        if s.start > cursor {
            regions.push(cursor..s.start);
        }
        cursor = cursor.max(s.end);
    }
    regions
        .into_iter()
        .filter(|r| (min..=max).contains(&r.len()))
        .collect()
}

/// Copies out every kept region of `audio` verbatim.
pub fn segment_clips(
    audio: &AudioClip,
    silences: &[Range<usize>],
    config: &SegmentationConfig,
) -> Vec<AudioClip> {
    speech_regions(audio.len(), silences, config)
        .into_iter()
        .filter_map(|r| AudioClip::new(audio.samples()[r].to_vec()).ok())
        .collect()
}
