use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;
use crate::corpus::{write_manifest, AudioClip, ClipRecord, Gender, SAMPLE_RATE};

pub const TOY_CLASSES: usize = 2;
/// Period of the pulse train; equal to the toy encoder's hop so every
/// encoder frame sees one pulse at the same offset.
pub const TOY_HOP: usize = 320;
const PULSE_WIDTH: usize = 64;
const PULSE_OFFSET: usize = 120;
const CLIP_SECONDS: f64 = 8.0;

/// Random content of one synthetic clip, independent of its cues.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyClipParams {
    pub pulse_amp: f64,
    /// `(frequency Hz, amplitude, phase)` of the low-frequency background.
    pub background: Vec<(f64, f64, f64)>,
    pub tone_hz: f64,
    pub tone_amp: f64,
    pub tone_phase: f64,
}

impl ToyClipParams {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            pulse_amp: rng.random_range(0.25..0.45),
            background: (0..8)
                .map(|_| {
                    (
                        rng.random_range(60.0..900.0),
                        rng.random_range(0.0..0.04),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect(),
            tone_hz: rng.random_range(4800.0..5200.0),
            tone_amp: rng.random_range(0.001..0.003),
            tone_phase: rng.random_range(0.0..2.0 * PI),
        }
    }
}

/// An 8-second clip. Cue A adds a faint narrowband tone high in the
/// spectrum; cue B inverts the polarity of the whole waveform, which leaves
/// every magnitude spectrum unchanged.
pub fn toy_clip(params: &ToyClipParams, cue_a: bool, cue_b: bool) -> AudioClip {
    let n = (CLIP_SECONDS * SAMPLE_RATE as f64) as usize;
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let j = (i % TOY_HOP).wrapping_sub(PULSE_OFFSET);
            if j < PULSE_WIDTH {
                params.pulse_amp * 0.5 * (1.0 - (2.0 * PI * j as f64 / PULSE_WIDTH as f64).cos())
            } else {
                0.0
            }
        })
        .collect();
    let tone = cue_a.then_some((params.tone_hz, params.tone_amp, params.tone_phase));
    for (f, a, p) in params.background.iter().copied().chain(tone) {
        add_sinusoid(&mut x, f, a, p);
    }
    if cue_b {
        x.iter_mut().for_each(|v| *v = -*v);
    }
    AudioClip::from_unit(&x).expect("non-empty")
}

/// Adds `amp·sin(2πft + phase)` by rotating a unit phasor one sample at a
/// time.
fn add_sinusoid(x: &mut [f64], freq: f64, amp: f64, phase: f64) {
    let w = 2.0 * PI * freq / SAMPLE_RATE as f64;
    let (rs, rc) = w.sin_cos();
    let (mut s, mut c) = phase.sin_cos();
    for v in x.iter_mut() {
        *v += amp * s;
        (s, c) = (s * rc + c * rs, c * rc - s * rs);
    }
}

/// Manifests of a generated dataset.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub dir: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

/// Writes a two-class dataset whose label is set by the combination of
/// cues A and B: class 1 has exactly one of them. `n_per_class` clips per
/// class go to training, a quarter as many to each of validation and test.
pub fn make_toy_fusion_dataset(out: &Path, seed: u64, n_per_class: usize) -> Result<ToyDataset, HarnessError> {
    if n_per_class < 32 {
        return Err(HarnessError::Config(format!(
            "n_per_class must be at least 32, got {n_per_class}"
        )));
    }
    let clip_dir = out.join("clips");
    std::fs::create_dir_all(&clip_dir).map_err(|source| HarnessError::Io {
        path: clip_dir.clone(),
        source,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifests = Vec::new();
    for (split, per_class) in [("train", n_per_class), ("val", n_per_class / 4), ("test", n_per_class / 4)] {
        let mut records = Vec::with_capacity(per_class * TOY_CLASSES);
        for i in 0..per_class * TOY_CLASSES {
            let class = i % TOY_CLASSES;
            let cue_a = (i / TOY_CLASSES) % 2 == 1;
            let cue_b = cue_a ^ (class == 1);
            let params = ToyClipParams::sample(&mut rng);
            let clip = toy_clip(&params, cue_a, cue_b);
            let clip_id = format!("toy_{split}_{i:05}");
            let path = format!("clips/{clip_id}.wav");
            clip.write_wav(&out.join(&path))?;
            records.push(ClipRecord {
                clip_id: clip_id.clone(),
                path,
                speaker_id: clip_id.clone(),
                video_id: clip_id,
                gender: if i % 4 < 2 { Gender::Female } else { Gender::Male },
                label: format!("class{class}"),
                duration_s: clip.duration_s(),
            });
        }
        let manifest = out.join(format!("{split}.csv"));
        write_manifest(&manifest, &records)?;
        manifests.push(manifest);
    }
    let test = manifests.pop().expect("three splits");
    let val = manifests.pop().expect("three splits");
    let train = manifests.pop().expect("three splits");
    Ok(ToyDataset {
        dir: out.to_path_buf(),
        train,
        val,
        test,
    })
}
