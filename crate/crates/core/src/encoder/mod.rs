//! Wave-encoder backends: sources of per-window embedding sequences that the
//! model consumes read-only.

mod mwev;
mod toy;

use std::path::{Path, PathBuf};

pub use mwev::{
    decode_all, decode_record, decode_single, encode_record, parse_embedding_file,
    read_embedding_file, read_records, write_embedding_file, write_embedding_file_v2,
    EmbeddingFile, MatrixRecord, MAGIC,
};
pub(crate) use mwev::write_bytes;
pub use toy::{toy_encode, ToyEncoder, ToyEncoderConfig};

use crate::corpus::AudioClip;
use crate::neuralcore::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an MWEV record (bad magic)")]
    BadMagic,
    #[error("unsupported MWEV version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated header while reading {0}")]
    TruncatedHeader(&'static str),
    #[error("truncated payload: expected {expected_bytes} bytes, found {found_bytes}")]
    TruncatedPayload {
        expected_bytes: usize,
        found_bytes: usize,
    },
    #[error("dimension mismatch: {rows} x {cols} header but {payload_values} payload values")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        payload_values: usize,
    },
    #[error("zero dimension in {rows} x {cols} matrix")]
    ZeroDimension { rows: usize, cols: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid UTF-8 in {0}")]
    InvalidUtf8(&'static str),
    #[error("value {0} does not fit the 32-bit header field")]
    TooLarge(usize),
    #[error("audio has {samples} samples, fewer than one {win}-sample window")]
    AudioTooShort { samples: usize, win: usize },
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("no precomputed embedding for clip {clip_id} at {path}")]
    MissingEmbedding { clip_id: String, path: PathBuf },
    #[error("embedding file for {expected} is labelled {found}")]
    ClipIdMismatch { expected: String, found: String },
    #[error("embedding width {found} does not match the configured {expected}")]
    WidthMismatch { expected: usize, found: usize },
}

/// Row-major `[frames × width]` embeddings for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    frames: usize,
    width: usize,
    values: Vec<f32>,
}

impl EmbeddingSequence {
    pub fn new(frames: usize, width: usize, values: Vec<f32>) -> Result<Self, EncoderError> {
        if frames == 0 || width == 0 {
            return Err(EncoderError::ZeroDimension {
                rows: frames,
                cols: width,
            });
        }
        if values.len() != frames * width {
            return Err(EncoderError::DimensionMismatch {
                rows: frames,
                cols: width,
                payload_values: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite("embedding sequence".into()));
        }
        Ok(Self {
            frames,
            width,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.frames, self.width]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, frame: usize, col: usize) -> f32 {
        self.values[frame * self.width + col]
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_f32(&[self.frames, self.width], &self.values).expect("shape matches data")
    }
}

/// Where wave embeddings come from.
#[derive(Clone, Debug)]
pub enum EncoderSource {
    Toy(ToyEncoder),
    /// `<dir>/<clip_id>.mwev` files of a fixed width, read on demand.
    Precomputed { dir: PathBuf, width: usize },
}

impl EncoderSource {
    pub fn toy(config: ToyEncoderConfig) -> Result<Self, EncoderError> {
        Ok(Self::Toy(ToyEncoder::new(config)?))
    }

    pub fn precomputed(dir: impl Into<PathBuf>, width: usize) -> Self {
        Self::Precomputed {
            dir: dir.into(),
            width,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Self::Toy(t) => t.width(),
            Self::Precomputed { width, .. } => *width,
        }
    }

    pub fn embedding_path(dir: &Path, clip_id: &str) -> PathBuf {
        dir.join(format!("{clip_id}.mwev"))
    }

    /// Embeddings for one clip. The toy backend encodes `audio`; the
    /// precomputed backend looks the clip up by id and ignores `audio`.
    pub fn encode(&self, clip_id: &str, audio: &AudioClip) -> Result<EmbeddingSequence, EncoderError> {
        match self {
            Self::Toy(t) => t.encode(audio),
            Self::Precomputed { dir, width } => {
                let path = Self::embedding_path(dir, clip_id);
                if !path.is_file() {
                    return Err(EncoderError::MissingEmbedding {
                        clip_id: clip_id.to_string(),
                        path,
                    });
                }
                let file = read_embedding_file(&path)?;
                if file.clip_id != clip_id {
                    return Err(EncoderError::ClipIdMismatch {
                        expected: clip_id.to_string(),
                        found: file.clip_id,
                    });
                }
                if file.sequence.width() != *width {
                    return Err(EncoderError::WidthMismatch {
                        expected: *width,
                        found: file.sequence.width(),
                    });
                }
                Ok(file.sequence)
            }
        }
    }
}
