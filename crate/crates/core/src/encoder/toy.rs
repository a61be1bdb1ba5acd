use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EmbeddingSequence, EncoderError};
use crate::corpus::AudioClip;
use crate::neuralcore::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyEncoderConfig {
    pub seed: u64,
    pub win_samples: usize,
    pub hop_samples: usize,
    pub width: usize,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            win_samples: 400,
            hop_samples: 320,
            width: 1024,
        }
    }
}

impl ToyEncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.hop_samples == 0 || self.win_samples < self.hop_samples || self.width == 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "need win >= hop > 0 and width > 0, got win {} hop {} width {}",
                self.win_samples, self.hop_samples, self.width
            )));
        }
        Ok(())
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win_samples {
            0
        } else {
            (n_samples - self.win_samples) / self.hop_samples + 1
        }
    }
}

/// Fixed random projection of each raw-audio window followed by `tanh`.
/// Nothing about it is trainable.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    config: ToyEncoderConfig,
    /// `[win × width]`, row-major.
    projection: Vec<f32>,
}

impl ToyEncoder {
    pub fn new(config: ToyEncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let s = 1.0 / (config.win_samples as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let projection = (0..config.win_samples * config.width)
            .map(|_| rng.random_range(-s..s) as f32)
            .collect();
        Ok(Self { config, projection })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn encode_unit(&self, signal: &[f32]) -> Result<EmbeddingSequence, EncoderError> {
        let c = &self.config;
        let frames = c.n_frames(signal.len());
        if frames == 0 {
            return Err(EncoderError::AudioTooShort {
                samples: signal.len(),
                win: c.win_samples,
            });
        }
        let mut out = vec![0f32; frames * c.width];
        // overlapping windows read straight out of the signal via the row stride
        f32::gemm(
            frames,
            c.win_samples,
            c.width,
            1.0,
            signal,
            (c.hop_samples as isize, 1),
            &self.projection,
            (c.width as isize, 1),
            0.0,
            &mut out,
            (c.width as isize, 1),
        );
        for v in &mut out {
            *v = v.tanh();
        }
        EmbeddingSequence::new(frames, c.width, out)
    }

    pub fn encode(&self, audio: &AudioClip) -> Result<EmbeddingSequence, EncoderError> {
        let signal: Vec<f32> = audio.samples().iter().map(|&s| s as f32 / 32768.0).collect();
        self.encode_unit(&signal)
    }
}

pub fn toy_encode(audio: &AudioClip, config: &ToyEncoderConfig) -> Result<EmbeddingSequence, EncoderError> {
    ToyEncoder::new(config.clone())?.encode(audio)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_for_eight_seconds() {
        assert_eq!(ToyEncoderConfig::default().n_frames(128_000), 399);
    }

    #[test]
    fn matches_a_direct_projection() {
        let config = ToyEncoderConfig {
            width: 5,
            win_samples: 8,
            hop_samples: 3,
            seed: 2,
        };
        let enc = ToyEncoder::new(config).unwrap();
        let signal: Vec<f32> = (0..20).map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0).collect();
        let seq = enc.encode_unit(&signal).unwrap();
        assert_eq!(seq.frames(), 5);
        for f in 0..5 {
            for w in 0..5 {
                let z: f64 = (0..8)
                    .map(|i| signal[f * 3 + i] as f64 * enc.projection[i * 5 + w] as f64)
                    .sum();
                assert!((seq.get(f, w) as f64 - z.tanh()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn short_audio_and_bad_config_error() {
        let enc = ToyEncoder::new(ToyEncoderConfig::default()).unwrap();
        assert!(matches!(
            enc.encode(&AudioClip::new(vec![1; 399]).unwrap()),
            Err(EncoderError::AudioTooShort { .. })
        ));
        let bad = ToyEncoderConfig {
            win_samples: 100,
            hop_samples: 200,
            ..Default::default()
        };
        assert!(ToyEncoder::new(bad).is_err());
    }
}
