//! The layer set used by the classifier: 1-D convolution, 1-D batch
//! normalization, LSTM, soft-attention pooling, linear and dropout.
//!
//! Layers own no tensors. They hold [`ParamId`]s into a [`ParamStore`] and
//! record their forward computation on a [`Tape`].

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::real::Real;
use super::tape::{BatchNormMode, BatchStats, Tape, Var};
use super::tensor::Tensor;
use super::NnError;

/// Training or inference behaviour for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exact trainable parameter count of a layer.
pub trait ParamCount {
    fn param_count(&self) -> usize;
}

fn uniform<F: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let fan_in = in_channels * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[out_channels, in_channels, kernel], fan_in, rng),
            true,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
        })
    }

    /// Output length for an input of `len` frames, or `None` if too short.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        (len >= self.kernel).then(|| (len - self.kernel) / self.stride + 1)
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var, NnError> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        tape.conv1d(x, w, b, self.stride)
    }
}

impl ParamCount for Conv1d {
    fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel + self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
    ) -> Result<Self, NnError> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], F::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                false,
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], F::one()),
                false,
            )?,
            channels,
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        })
    }

    /// Returns the output and, in training mode, the statistics that
    /// [`update_running`](Self::update_running) folds into the running estimate.
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<F>>), NnError> {
        let gamma = tape.param(self.gamma)?;
        let beta = tape.param(self.beta)?;
        let eps = F::lit(self.eps);
        match mode {
            Mode::Train => tape.batchnorm(x, gamma, beta, BatchNormMode::Train, eps),
            Mode::Eval => {
                let store = tape.store().ok_or(NnError::NoParamStore)?;
                let mean = store.value(self.running_mean).data();
                let var = store.value(self.running_var).data();
                tape.batchnorm(x, gamma, beta, BatchNormMode::Eval { mean, var }, eps)
            }
        }
    }

    /// `running = (1 - momentum) * running + momentum * observed`
    pub fn update_running<F: Real>(&self, store: &mut ParamStore<F>, stats: &BatchStats<F>) {
        let m = F::lit(self.momentum);
        let keep = F::one() - m;
        for (r, &s) in store.value_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in store.value_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * s;
        }
    }
}

impl ParamCount for BatchNorm1d {
    fn param_count(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl Lstm {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let g4 = 4 * hidden_size;
        Ok(Self {
            w_ih: store.add(
                format!("{name}.w_ih"),
                uniform(&[g4, input_size], input_size, rng),
                true,
            )?,
            w_hh: store.add(
                format!("{name}.w_hh"),
                uniform(&[g4, hidden_size], hidden_size, rng),
                true,
            )?,
            b_ih: store.add(format!("{name}.b_ih"), Tensor::zeros(&[g4]), true)?,
            b_hh: store.add(format!("{name}.b_hh"), Tensor::zeros(&[g4]), true)?,
            input_size,
            hidden_size,
        })
    }

    /// `x [T x input]` to hidden states `[T x hidden]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var, NnError> {
        let w_ih = tape.param(self.w_ih)?;
        let w_hh = tape.param(self.w_hh)?;
        let b_ih = tape.param(self.b_ih)?;
        let b_hh = tape.param(self.b_hh)?;
        tape.lstm(x, w_ih, w_hh, b_ih, b_hh)
    }
}

impl ParamCount for Lstm {
    fn param_count(&self) -> usize {
        let (i, h) = (self.input_size, self.hidden_size);
        4 * (i * h + h * h + 2 * h)
    }
}

/// Attention pooling over time: `e_t = v . tanh(W h_t)`, weights are
/// `softmax(e)` and the pooled vector is `sum_t weight_t h_t`.
#[derive(Clone, Debug)]
pub struct SoftAttention {
    pub w: ParamId,
    pub v: ParamId,
    pub dim: usize,
}

impl SoftAttention {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            w: store.add(format!("{name}.w"), uniform(&[dim, dim], dim, rng), true)?,
            v: store.add(format!("{name}.v"), uniform(&[dim], dim, rng), true)?,
            dim,
        })
    }

    /// Returns `(pooled [d], weights [T])`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, h: Var) -> Result<(Var, Var), NnError> {
        let (steps, dim) = tape.value(h).dims2()?;
        if dim != self.dim {
            return Err(NnError::ShapeMismatch {
                op: "soft_attention",
                left: vec![self.dim],
                right: vec![steps, dim],
            });
        }
        let w = tape.param(self.w)?;
        let v = tape.param(self.v)?;
        let proj = tape.matmul(h, w, false, true)?;
        let act = tape.tanh(proj);
        let v_col = tape.reshape(v, &[dim, 1])?;
        let scores = tape.matmul(act, v_col, false, false)?;
        let scores = tape.reshape(scores, &[steps])?;
        let weights = tape.softmax(scores)?;
        let w_col = tape.reshape(weights, &[steps, 1])?;
        let pooled = tape.matmul(h, w_col, true, false)?;
        let pooled = tape.reshape(pooled, &[dim])?;
        Ok((pooled, weights))
    }
}

impl ParamCount for SoftAttention {
    fn param_count(&self) -> usize {
        self.dim * self.dim + self.dim
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform(&[out_features, in_features], in_features, rng),
                true,
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]), true)?,
            in_features,
            out_features,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Result<Var, NnError> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        tape.linear(x, w, b)
    }

    pub fn weight_count(&self) -> usize {
        self.in_features * self.out_features
    }
}

impl ParamCount for Linear {
    fn param_count(&self) -> usize {
        self.weight_count() + self.out_features
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub const DEFAULT_RATE: f64 = 0.2;

    pub fn forward<F: Real, R: Rng>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, NnError> {
        match mode {
            Mode::Eval => Ok(x),
            Mode::Train if self.rate == 0.0 => Ok(x),
            Mode::Train => tape.dropout(x, self.rate, rng),
        }
    }
}

impl Default for Dropout {
    fn default() -> Self {
        Self {
            rate: Self::DEFAULT_RATE,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn table_parameter_counts() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv1d::new(&mut store, "c1", 128, 128, 5, 2, &mut rng).unwrap();
        let conv2 = Conv1d::new(&mut store, "c2", 128, 128, 4, 1, &mut rng).unwrap();
        let bn = BatchNorm1d::new(&mut store, "bn", 128).unwrap();
        let l1 = Lstm::new(&mut store, "l1", 128, 128, &mut rng).unwrap();
        let l2 = Lstm::new(&mut store, "l2", 1024, 128, &mut rng).unwrap();
        let att = SoftAttention::new(&mut store, "a", 128, &mut rng).unwrap();
        let d1 = Linear::new(&mut store, "d1", 256, 256, &mut rng).unwrap();
        let d2 = Linear::new(&mut store, "d2", 256, 6, &mut rng).unwrap();
        assert_eq!(conv.param_count(), 82_048);
        assert_eq!(conv2.param_count(), 65_664);
        assert_eq!(bn.param_count(), 256);
        assert_eq!(l1.param_count(), 132_096);
        assert_eq!(l2.param_count(), 590_848);
        assert_eq!(att.param_count(), 16_512);
        assert_eq!(d1.weight_count(), 65_536);
        assert_eq!(d2.weight_count(), 1_536);
        // the declared counts agree with what was allocated
        let allocated: usize = [conv.weight, conv.bias]
            .iter()
            .map(|&id| store.value(id).len())
            .sum();
        assert_eq!(allocated, conv.param_count());
    }

    #[test]
    fn dropout_keeps_the_expected_fraction() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::with_params(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let x = tape.constant(Tensor::full(&[n], 1.0));
        let d = Dropout { rate: 0.2 };
        let same = d.forward(&mut tape, x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());
        let y = d.forward(&mut tape, x, Mode::Train, &mut rng).unwrap();
        let out = tape.value(y).data();
        let kept = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let sigma = (0.8f64 * 0.2 / n as f64).sqrt();
        assert!((kept - 0.8).abs() < 3.0 * sigma, "kept {kept}");
        assert!(out.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn conv_output_lengths_follow_valid_padding() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c1 = Conv1d::new(&mut store, "c1", 1, 1, 5, 2, &mut rng).unwrap();
        let c2 = Conv1d::new(&mut store, "c2", 1, 1, 4, 1, &mut rng).unwrap();
        assert_eq!(c1.output_len(641), Some(319));
        assert_eq!(c2.output_len(319), Some(316));
        assert_eq!(c2.output_len(316), Some(313));
        assert_eq!(c2.output_len(3), None);
    }
}
