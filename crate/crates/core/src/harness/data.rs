use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::corpus::{normalize_clip_length, read_manifest, AudioClip, ClipRecord};
use crate::encoder::EncoderSource;
use crate::features::{Mfcc, MfccConfig};
use crate::model::{ModelInput, ModelKind};
use crate::neuralcore::{Real, Tensor};

/// One manifest: its records and the directory their paths are relative to.
#[derive(Clone, Debug)]
pub struct Split {
    pub name: String,
    pub records: Vec<ClipRecord>,
    pub dir: PathBuf,
}

impl Split {
    pub fn read(name: &str, manifest: &Path) -> Result<Self, HarnessError> {
        let records = read_manifest(manifest)?;
        if records.is_empty() {
            return Err(HarnessError::EmptySplit(name.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            records,
            dir: manifest.parent().unwrap_or(Path::new(".")).to_path_buf(),
        })
    }
}

/// Class names in label-index order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    /// The sorted distinct labels of the training records.
    pub fn from_records(records: &[ClipRecord]) -> Self {
        let set: BTreeSet<&str> = records.iter().map(|r| r.label.as_str()).collect();
        Self {
            names: set.into_iter().map(String::from).collect(),
        }
    }

    pub fn from_names(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }

    /// Errors on the first record whose label is not in the set.
    pub fn check(&self, split: &Split) -> Result<(), HarnessError> {
        match split.records.iter().find(|r| self.index(&r.label).is_none()) {
            Some(r) => Err(HarnessError::UnknownLabel {
                label: r.label.clone(),
                split: split.name.clone(),
            }),
            None => Ok(()),
        }
    }
}

/// Fails if any clip id, or with `speaker_disjoint` any speaker, appears in
/// more than one split.
pub fn check_leakage(splits: &[&Split], speaker_disjoint: bool) -> Result<(), HarnessError> {
    let mut clips: HashSet<&str> = HashSet::new();
    for s in splits {
        let mut own = HashSet::new();
        for r in &s.records {
            if !own.insert(r.clip_id.as_str()) {
                return Err(HarnessError::Leakage(format!(
                    "clip {} listed twice in {}",
                    r.clip_id, s.name
                )));
            }
            if clips.contains(r.clip_id.as_str()) {
                return Err(HarnessError::Leakage(format!("clip {} shared by two splits", r.clip_id)));
            }
        }
        clips.extend(own);
    }
    if speaker_disjoint {
        for (i, a) in splits.iter().enumerate() {
            let sa: HashSet<&str> = a.records.iter().map(|r| r.speaker_id.as_str()).collect();
            for b in &splits[i + 1..] {
                if let Some(r) = b.records.iter().find(|r| sa.contains(r.speaker_id.as_str())) {
                    return Err(HarnessError::Leakage(format!(
                        "speaker {} appears in {} and {}",
                        r.speaker_id, a.name, b.name
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Model inputs of one clip.
#[derive(Clone, Debug)]
pub struct Features<F> {
    pub mfcc: Option<Tensor<F>>,
    pub wave: Option<Tensor<F>>,
}

impl<F> Features<F> {
    pub fn input(&self) -> ModelInput<'_, F> {
        ModelInput {
            mfcc: self.mfcc.as_ref(),
            wave: self.wave.as_ref(),
        }
    }
}

/// Turns a manifest record into model inputs on demand, so memory use does
/// not grow with the dataset.
pub struct FeaturePipeline {
    mfcc: Option<Mfcc>,
    encoder: Option<EncoderSource>,
    clip_seconds: f64,
}

impl FeaturePipeline {
    pub fn new(kind: ModelKind, encoder: EncoderSource, clip_seconds: f64) -> Result<Self, HarnessError> {
        Ok(Self {
            mfcc: kind.uses_mfcc().then(|| Mfcc::new(MfccConfig::default())).transpose()?,
            encoder: kind.uses_wave().then_some(encoder),
            clip_seconds,
        })
    }

    pub fn clip_seconds(&self) -> f64 {
        self.clip_seconds
    }

    pub fn load_audio(&self, record: &ClipRecord, dir: &Path) -> Result<AudioClip, HarnessError> {
        let audio = AudioClip::read_wav(&record.resolve_path(dir))?;
        Ok(normalize_clip_length(&audio, self.clip_seconds)?)
    }

    pub fn features<F: Real>(&self, record: &ClipRecord, audio: &AudioClip) -> Result<Features<F>, HarnessError> {
        let mfcc = match &self.mfcc {
            Some(m) => Some(m.compute(audio)?.to_tensor()),
            None => None,
        };
        let wave = match &self.encoder {
            Some(e) => Some(e.encode(&record.clip_id, audio)?.to_tensor()),
            None => None,
        };
        Ok(Features { mfcc, wave })
    }

    pub fn load<F: Real>(&self, record: &ClipRecord, dir: &Path) -> Result<Features<F>, HarnessError> {
        let audio = self.load_audio(record, dir)?;
        self.features(record, &audio)
    }
}
