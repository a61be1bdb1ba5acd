use std::path::Path;

use super::CorpusError;

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono 16 kHz signed 16-bit PCM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AudioClip {
    samples: Vec<i16>,
}

impl AudioClip {
    pub fn new(samples: Vec<i16>) -> Result<Self, CorpusError> {
        if samples.is_empty() {
            return Err(CorpusError::EmptyAudio);
        }
        Ok(Self { samples })
    }

    /// Quantizes `[-1, 1]` floats; values outside are clipped. Rounding is
    /// symmetric, so negating the input negates the output exactly.
    pub fn from_unit(samples: &[f64]) -> Result<Self, CorpusError> {
        Self::new(
            samples
                .iter()
                .map(|&v| (v * 32767.0).round().clamp(-32767.0, 32767.0) as i16)
                .collect(),
        )
    }

    pub fn samples(&self) -> &[i16] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<i16> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Samples scaled to `[-1, 1)` by the full-scale reference 32768.
    pub fn to_unit(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64 / 32768.0).collect()
    }

    pub fn read_wav(path: &Path) -> Result<Self, CorpusError> {
        let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let reader = hound::WavReader::new(std::io::Cursor::new(bytes)).map_err(|source| CorpusError::Wav {
            path: path.to_path_buf(),
            source,
        })?;
        let spec = reader.spec();
        let problem = if spec.channels != 1 {
            Some(format!("{} channels (mono required)", spec.channels))
        } else if spec.sample_rate != SAMPLE_RATE {
            Some(format!("{} Hz (16000 Hz required)", spec.sample_rate))
        } else if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            Some(format!(
                "{:?} {}-bit samples (16-bit PCM required)",
                spec.sample_format, spec.bits_per_sample
            ))
        } else {
            None
        };
        if let Some(detail) = problem {
            return Err(CorpusError::UnsupportedWav {
                path: path.to_path_buf(),
                detail,
            });
        }
        // the header parser leaves the cursor at the first sample
        let n = reader.len() as usize;
        let cursor = reader.into_inner();
        let start = cursor.position() as usize;
        let bytes = cursor.into_inner();
        let data = bytes.get(start..start + 2 * n).ok_or_else(|| CorpusError::UnsupportedWav {
            path: path.to_path_buf(),
            detail: format!("data chunk shorter than its declared {n} samples"),
        })?;
        let samples = data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        Self::new(samples)
    }

    pub fn write_wav(&self, path: &Path) -> Result<(), CorpusError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let wrap = |source| CorpusError::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
        for &s in &self.samples {
            writer.write_sample(s).map_err(wrap)?;
        }
        writer.finalize().map_err(wrap)
    }
}

/// Fits a clip to exactly `target_s` seconds: longer clips keep their first
/// `target_s` seconds, shorter ones are repeated end to end and cut.
pub fn normalize_clip_length(audio: &AudioClip, target_s: f64) -> Result<AudioClip, CorpusError> {
    if audio.is_empty() {
        return Err(CorpusError::EmptyAudio);
    }
    let target = (target_s * SAMPLE_RATE as f64).round() as usize;
    if target == 0 {
        return Err(CorpusError::InvalidConfig(format!(
            "target length {target_s} s is below one sample"
        )));
    }
    let samples = audio.samples.iter().copied().cycle().take(target).collect();
    AudioClip::new(samples)
}
