//! Corpus construction: silence-based segmentation, clip-length
//! normalization, manifests, key-disjoint splits and summary statistics.

mod audio;
mod manifest;
mod segment;
mod split;
mod stats;

use std::path::{Path, PathBuf};

pub use audio::{normalize_clip_length, AudioClip, SAMPLE_RATE};
pub use manifest::{
    read_manifest, read_manifest_from, write_manifest, write_manifest_to, ClipRecord, Gender,
    MANIFEST_HEADER,
};
pub use segment::{detect_silences, rms_dbfs, segment_clips, speech_regions, SegmentationConfig};
pub use split::{cap_per_class, split_by_key, split_counts, SplitSpec, Splits};
pub use stats::{compute_stats, CorpusStats};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("audio clip is empty")]
    EmptyAudio,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: unsupported audio format: {detail}")]
    UnsupportedWav { path: PathBuf, detail: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid {field}: {value}")]
    InvalidField { field: &'static str, value: String },
    #[error("manifest header must be `{expected}`, found `{0}`", expected = MANIFEST_HEADER.join(","))]
    BadHeader(String),
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("clip {clip_id} has no field {key}")]
    MissingKey { clip_id: String, key: String },
    #[error("need at least 3 distinct {key} values to split, found {found}")]
    TooFewKeys { key: String, found: usize },
    #[error("file name {0:?} does not follow <speaker>_<video>_<gender>_<accent>.wav")]
    BadFileName(String),
}

/// Identity fields parsed from a source recording's file name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceName {
    pub speaker_id: String,
    pub video_id: String,
    pub gender: Gender,
    pub accent: String,
}

impl SourceName {
    /// Parses `<speaker>_<video>_<gender>_<accent>.wav`. The accent may itself
    /// contain underscores.
    pub fn parse(file_name: &str) -> Result<Self, CorpusError> {
        let bad = || CorpusError::BadFileName(file_name.to_string());
        let stem = file_name.strip_suffix(".wav").ok_or_else(bad)?;
        let mut parts = stem.splitn(4, '_');
        let (Some(speaker), Some(video), Some(gender), Some(accent)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        if [speaker, video, accent].iter().any(|s| s.is_empty()) {
            return Err(bad());
        }
        Ok(Self {
            speaker_id: speaker.to_string(),
            video_id: video.to_string(),
            gender: gender.parse().map_err(|_| bad())?,
            accent: accent.to_string(),
        })
    }

    pub fn clip_name(&self, index: usize) -> String {
        format!(
            "{}_{}_{}_{}_{index}",
            self.speaker_id, self.video_id, self.gender, self.accent
        )
    }
}

/// Segments every `*.wav` in `in_dir` (sorted by name) and writes the kept
/// clips plus `manifest.csv` into `out_dir`. Manifest paths are relative to
/// `out_dir`.
pub fn build_corpus(
    in_dir: &Path,
    out_dir: &Path,
    config: &SegmentationConfig,
) -> Result<Vec<ClipRecord>, CorpusError> {
    config.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    let mut inputs = Vec::new();
    for entry in std::fs::read_dir(in_dir).map_err(io(in_dir))? {
        let path = entry.map_err(io(in_dir))?.path();
        if path.extension().is_some_and(|e| e == "wav") {
            inputs.push(path);
        }
    }
    inputs.sort();
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;

    let mut records = Vec::new();
    for path in inputs {
        let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let source = SourceName::parse(file_name)?;
        let audio = AudioClip::read_wav(&path)?;
        let silences = detect_silences(&audio, config)?;
        let clips = segment_clips(&audio, &silences, config);
        log::info!("{file_name}: {} silences, {} clips kept", silences.len(), clips.len());
        for (index, clip) in clips.into_iter().enumerate() {
            let clip_id = source.clip_name(index);
            let rel = format!("{clip_id}.wav");
            clip.write_wav(&out_dir.join(&rel))?;
            records.push(ClipRecord {
                clip_id,
                path: rel,
                speaker_id: source.speaker_id.clone(),
                video_id: source.video_id.clone(),
                gender: source.gender,
                label: source.accent.clone(),
                duration_s: clip.duration_s(),
            });
        }
    }
    write_manifest(&out_dir.join("manifest.csv"), &records)?;
    Ok(records)
}
