//! MFCC extraction: centered framing, Hann window, power spectrum, mel
//! filterbank, log compression and orthonormal DCT-II.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::corpus::{AudioClip, SAMPLE_RATE};
use crate::neuralcore::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("invalid MFCC configuration: {0}")]
    InvalidConfig(String),
    #[error("{n_mels} mel filters cannot be resolved by a {fft_size}-point FFT")]
    TooManyMels { n_mels: usize, fft_size: usize },
    #[error("signal is empty")]
    EmptySignal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub n_mfcc: usize,
    pub n_mels: usize,
    pub win_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_mfcc: 128,
            n_mels: 128,
            win_samples: 400,
            hop_samples: 200,
            fft_size: 512,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidConfig(m));
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad(format!("n_mfcc = {} must be in 1..={}", self.n_mfcc, self.n_mels));
        }
        if self.win_samples == 0 || self.win_samples > self.fft_size {
            return bad(format!(
                "win_samples = {} must be in 1..={}",
                self.win_samples, self.fft_size
            ));
        }
        if self.hop_samples == 0 {
            return bad("hop_samples must be positive".into());
        }
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            return bad(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got {}..{}",
                self.fmin, self.fmax
            ));
        }
        if !(self.log_floor > 0.0) {
            return bad(format!("log_floor must be positive, got {}", self.log_floor));
        }
        if self.n_mels > self.n_bins() {
            return Err(FeatureError::TooManyMels {
                n_mels: self.n_mels,
                fft_size: self.fft_size,
            });
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop_samples
    }
}

/// Cepstral coefficients, row-major `[n_coeffs × n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccMatrix {
    pub values: Vec<f64>,
    pub n_coeffs: usize,
    pub n_frames: usize,
    /// Center time of every column in seconds.
    pub frame_times: Vec<f64>,
}

impl MfccMatrix {
    pub fn shape(&self) -> [usize; 2] {
        [self.n_coeffs, self.n_frames]
    }

    pub fn get(&self, coeff: usize, frame: usize) -> f64 {
        self.values[coeff * self.n_frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.n_coeffs).map(|k| self.get(k, frame)).collect()
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_f64(&[self.n_coeffs, self.n_frames], &self.values)
            .expect("shape matches data")
    }
}

pub fn mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Maps an index of the reflect-padded signal onto `0..n`, mirroring about
/// the end samples without repeating them, as often as needed.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// Centered frames `[T × win]`, row-major, with `T = 1 + floor(N / hop)`.
pub fn frame_signal_unit(signal: &[f64], config: &MfccConfig) -> Result<Vec<f64>, FeatureError> {
    config.validate()?;
    if signal.is_empty() {
        return Err(FeatureError::EmptySignal);
    }
    let (win, hop, n) = (config.win_samples, config.hop_samples, signal.len());
    let pad = (win / 2) as isize;
    let t = config.n_frames(n);
    let mut out = Vec::with_capacity(t * win);
    for f in 0..t {
        let start = (f * hop) as isize - pad;
        for j in 0..win as isize {
            let i = start + j;
            let idx = if (0..n as isize).contains(&i) { i as usize } else { reflect(i, n) };
            out.push(signal[idx]);
        }
    }
    Ok(out)
}

pub fn frame_signal(audio: &AudioClip, config: &MfccConfig) -> Result<Vec<f64>, FeatureError> {
    frame_signal_unit(&audio.to_unit(), config)
}

/// Center frequency in Hz of every mel filter.
pub fn mel_centers(config: &MfccConfig) -> Vec<f64> {
    let (lo, hi) = (mel(config.fmin), mel(config.fmax));
    let step = (hi - lo) / (config.n_mels + 1) as f64;
    (1..=config.n_mels).map(|i| mel_to_hz(lo + step * i as f64)).collect()
}

/// Triangular filters `[n_mels × (fft/2 + 1)]`, row-major, peak value 1.
///
/// Each side of a triangle spans at least one FFT bin.
pub fn mel_filterbank(config: &MfccConfig) -> Result<Vec<f64>, FeatureError> {
    config.validate()?;
    let bins = config.n_bins();
    let df = SAMPLE_RATE as f64 / config.fft_size as f64;
    let (lo, hi) = (mel(config.fmin), mel(config.fmax));
    let step = (hi - lo) / (config.n_mels + 1) as f64;
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect();
    let mut fb = vec![0.0; config.n_mels * bins];
    for m in 0..config.n_mels {
        let c = edges[m + 1];
        let left = (c - edges[m]).max(df);
        let right = (edges[m + 2] - c).max(df);
        let row = &mut fb[m * bins..(m + 1) * bins];
        for (j, w) in row.iter_mut().enumerate() {
            let f = j as f64 * df;
            *w = ((f - (c - left)) / left).min(((c + right) - f) / right).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(FeatureError::TooManyMels {
                n_mels: config.n_mels,
                fft_size: config.fft_size,
            });
        }
    }
    Ok(fb)
}

/// Orthonormal DCT-II basis `[n_out × n]`, row-major.
pub fn dct_matrix(n_out: usize, n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n_out * n];
    for k in 0..n_out {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            d[k * n + i] = s * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    d
}

/// Inverts a full orthonormal DCT-II column: `x = Dᵀ y`.
pub fn inverse_dct(coeffs: &[f64]) -> Vec<f64> {
    let n = coeffs.len();
    let d = dct_matrix(n, n);
    (0..n)
        .map(|i| (0..n).map(|k| d[k * n + i] * coeffs[k]).sum())
        .collect()
}

/// Reusable extractor with the window, filterbank, DCT and FFT plan built once.
pub struct Mfcc {
    config: MfccConfig,
    window: Vec<f64>,
    filterbank: Vec<f64>,
    /// Non-zero span of each filter: first bin and weights.
    spans: Vec<(usize, Vec<f64>)>,
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Mfcc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mfcc").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Mfcc {
    pub fn new(config: MfccConfig) -> Result<Self, FeatureError> {
        let filterbank = mel_filterbank(&config)?;
        let w = config.win_samples;
        // periodic Hann
        let window = (0..w)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / w as f64).cos())
            .collect();
        let dct = dct_matrix(config.n_mfcc, config.n_mels);
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        let bins = config.n_bins();
        let spans = filterbank
            .chunks_exact(bins)
            .map(|row| {
                let first = row.iter().position(|&w| w != 0.0).unwrap_or(0);
                let last = row.iter().rposition(|&w| w != 0.0).unwrap_or(0);
                (first, row[first..=last].to_vec())
            })
            .collect();
        Ok(Self {
            config,
            window,
            filterbank,
            spans,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &[f64] {
        &self.filterbank
    }

    /// Log-mel energies `[T × n_mels]`, row-major.
    pub fn log_mel_unit(&self, signal: &[f64]) -> Result<Vec<f64>, FeatureError> {
        let c = &self.config;
        c.validate()?;
        if signal.is_empty() {
            return Err(FeatureError::EmptySignal);
        }
        let (win, hop, fft_n, n) = (c.win_samples, c.hop_samples, c.fft_size, signal.len());
        let pad = (win / 2) as isize;
        let t = c.n_frames(n);
        let m = c.n_mels;
        let mut mel_e = vec![0.0; t * m];
        let mut buf = vec![Complex::new(0.0, 0.0); fft_n];
        let mut power = vec![0.0; c.n_bins()];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for (f, out) in mel_e.chunks_exact_mut(m).enumerate() {
            let start = (f * hop) as isize - pad;
            for (j, (b, &w)) in buf.iter_mut().zip(&self.window).enumerate() {
                let i = start + j as isize;
                let idx = if (0..n as isize).contains(&i) { i as usize } else { reflect(i, n) };
                *b = Complex::new(signal[idx] * w, 0.0);
            }
            buf[win..].fill(Complex::new(0.0, 0.0));
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, z) in power.iter_mut().zip(&buf) {
                *p = z.norm_sqr();
            }
            for (o, (first, w)) in out.iter_mut().zip(&self.spans) {
                let e: f64 = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
                *o = e.max(c.log_floor).ln();
            }
        }
        Ok(mel_e)
    }

    pub fn compute_unit(&self, signal: &[f64]) -> Result<MfccMatrix, FeatureError> {
        let c = &self.config;
        let log_mel = self.log_mel_unit(signal)?;
        let (m, k) = (c.n_mels, c.n_mfcc);
        let t = log_mel.len() / m;
        let mut values = vec![0.0; k * t];
        // [K × M] · [M × T]
        f64::gemm(
            k,
            m,
            t,
            1.0,
            &self.dct,
            (m as isize, 1),
            &log_mel,
            (1, m as isize),
            0.0,
            &mut values,
            (t as isize, 1),
        );
        let hop_s = c.hop_samples as f64 / SAMPLE_RATE as f64;
        Ok(MfccMatrix {
            values,
            n_coeffs: k,
            n_frames: t,
            frame_times: (0..t).map(|i| i as f64 * hop_s).collect(),
        })
    }

    pub fn compute(&self, audio: &AudioClip) -> Result<MfccMatrix, FeatureError> {
        self.compute_unit(&audio.to_unit())
    }
}

pub fn mfcc(audio: &AudioClip, config: &MfccConfig) -> Result<MfccMatrix, FeatureError> {
    Mfcc::new(config.clone())?.compute(audio)
}
