//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients into leaves (inputs and parameters). Layer-sized
//! operations (convolution, batch normalization, LSTM) are single nodes with
//! hand-written adjoints, so a full forward pass records a few dozen nodes.

use std::collections::HashMap;

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::real::{axpy, dot, sigmoid, Real};
use super::tensor::Tensor;
use super::NnError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<F> {
    Owned(Tensor<F>),
    Param(ParamId),
}

struct Node<F> {
    value: Value<F>,
    requires_grad: bool,
    op: Op<F>,
}

struct LstmCache<F> {
    /// Activated gates per step, `[T x 4h]` in i, f, g, o order.
    gates: Vec<F>,
    cells: Vec<F>,
    tanh_cells: Vec<F>,
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Row {
        src: Var,
        index: usize,
    },
    Pick {
        src: Var,
        index: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<F>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        cache: LstmCache<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
}

/// How a batch-normalization node obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, F> {
    /// Normalize by the statistics of the input itself.
    Train,
    /// Normalize by the supplied running statistics.
    Eval { mean: &'a [F], var: &'a [F] },
}

/// Per-channel statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<F>,
}

pub struct Tape<'p, F: Real> {
    params: Option<&'p ParamStore<F>>,
    param_vars: HashMap<ParamId, Var>,
    nodes: Vec<Node<F>>,
    leaf_grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Default for Tape<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Real> Tape<'p, F> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    /// A tape whose parameter leaves read from `params` without copying.
    pub fn with_params(params: &'p ParamStore<F>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// The parameter store this tape reads from, if any.
    pub fn store(&self) -> Option<&'p ParamStore<F>> {
        self.params
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.input(value, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var, NnError> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.params.ok_or(NnError::NoParamStore)?;
        if id.0 >= store.len() {
            return Err(NnError::UnknownParam(format!("#{}", id.0)));
        }
        let trainable = store.get(id).trainable;
        self.nodes.push(Node {
            value: Value::Param(id),
            requires_grad: trainable,
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("param node without store")
                .value(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// A copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NnError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NnError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.needs(a);
        self.push(out, rg, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(out, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / F::lit(t.len() as f64));
        let rg = self.needs(a);
        self.push(out, rg, Op::Mean(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        let rg = self.needs(a);
        self.push(out, rg, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.needs(a);
        self.push(out, rg, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.needs(a);
        self.push(out, rg, Op::Sigmoid(a))
    }

    /// `op(a) * op(b)` for 2-D operands, where `op` optionally transposes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, NnError> {
        let da = self.value(a).dims2()?;
        let db = self.value(b).dims2()?;
        let (m, k) = if ta { (da.1, da.0) } else { da };
        let (k2, n) = if tb { (db.1, db.0) } else { db };
        if k != k2 {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm_view(
            self.value(a).data(),
            da,
            ta,
            self.value(b).data(),
            db,
            tb,
            F::zero(),
            &mut out,
        );
        let rg = self.needs(a) || self.needs(b);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, rg, Op::MatMul { a, b, ta, tb }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NnError> {
        let out = self.value(a).transpose2()?;
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Concatenates 1-D tensors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 1 {
                return Err(NnError::Rank {
                    expected: 1,
                    shape: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        let n = data.len();
        Ok(self.push(Tensor::new(&[n], data)?, rg, Op::Concat(parts.to_vec())))
    }

    /// Row `index` of a 2-D tensor, as a 1-D tensor.
    pub fn row(&mut self, src: Var, index: usize) -> Result<Var, NnError> {
        let (rows, cols) = self.value(src).dims2()?;
        if index >= rows {
            return Err(NnError::IndexOutOfRange {
                op: "row",
                index,
                len: rows,
            });
        }
        let out = Tensor::new(&[cols], self.value(src).row(index).to_vec())?;
        let rg = self.needs(src);
        Ok(self.push(out, rg, Op::Row { src, index }))
    }

    /// Element `index` of a 1-D tensor, as a scalar.
    pub fn pick(&mut self, src: Var, index: usize) -> Result<Var, NnError> {
        let t = self.value(src);
        if t.ndim() != 1 {
            return Err(NnError::Rank {
                expected: 1,
                shape: t.shape().to_vec(),
            });
        }
        if index >= t.len() {
            return Err(NnError::IndexOutOfRange {
                op: "pick",
                index,
                len: t.len(),
            });
        }
        let out = Tensor::scalar(t.data()[index]);
        let rg = self.needs(src);
        Ok(self.push(out, rg, Op::Pick { src, index }))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let t = self.value(a);
        if t.ndim() != 1 || t.is_empty() {
            return Err(NnError::Rank {
                expected: 1,
                shape: t.shape().to_vec(),
            });
        }
        let out = Tensor::new(t.shape(), softmax_slice(t.data()))?;
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let t = self.value(a);
        if t.ndim() != 1 || t.is_empty() {
            return Err(NnError::Rank {
                expected: 1,
                shape: t.shape().to_vec(),
            });
        }
        let max = t.data().iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + t.data().iter().map(|&x| (x - max).exp()).sum::<F>().ln();
        let out = t.map(|x| x - lse);
        let rg = self.needs(a);
        Ok(self.push(out, rg, Op::LogSoftmax(a)))
    }

    /// `w x + b` for a 1-D input.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (out_dim, in_dim) = self.value(w).dims2()?;
        let xt = self.value(x);
        if xt.shape() != [in_dim] || self.value(b).shape() != [out_dim] {
            return Err(NnError::ShapeMismatch {
                op: "linear",
                left: self.value(w).shape().to_vec(),
                right: xt.shape().to_vec(),
            });
        }
        let (wt, bt) = (self.value(w), self.value(b));
        let out: Vec<F> = (0..out_dim)
            .map(|o| dot(wt.row(o), xt.data()) + bt.data()[o])
            .collect();
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(&[out_dim], out)?, rg, Op::Linear { x, w, b }))
    }

    /// Valid-padding cross-correlation of `x [in_ch x L]` with
    /// `w [out_ch x in_ch x kernel]` at the given stride.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, NnError> {
        let (in_ch, len) = self.value(x).dims2()?;
        let ws = self.value(w).shape().to_vec();
        let [out_ch, w_in, kernel] = ws[..] else {
            return Err(NnError::Rank {
                expected: 3,
                shape: ws,
            });
        };
        if w_in != in_ch || self.value(b).shape() != [out_ch] {
            return Err(NnError::ShapeMismatch {
                op: "conv1d",
                left: ws,
                right: self.value(x).shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(NnError::InvalidArgument("conv1d stride must be positive".into()));
        }
        if len < kernel {
            return Err(NnError::SequenceTooShort {
                op: "conv1d",
                len,
                min: kernel,
            });
        }
        let out_len = (len - kernel) / stride + 1;
        let ck = in_ch * kernel;
        let xd = self.value(x).data();
        let mut cols = vec![F::zero(); out_len * ck];
        for t in 0..out_len {
            let row = &mut cols[t * ck..(t + 1) * ck];
            for c in 0..in_ch {
                let src = &xd[c * len + t * stride..c * len + t * stride + kernel];
                row[c * kernel..(c + 1) * kernel].copy_from_slice(src);
            }
        }
        let bd = self.value(b).data();
        let mut out = vec![F::zero(); out_ch * out_len];
        for o in 0..out_ch {
            out[o * out_len..(o + 1) * out_len].fill(bd[o]);
        }
        F::gemm(
            out_ch,
            ck,
            out_len,
            F::one(),
            self.value(w).data(),
            (ck as isize, 1),
            &cols,
            (1, ck as isize),
            F::one(),
            &mut out,
            (out_len as isize, 1),
        );
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let t = Tensor::new(&[out_ch, out_len], out)?;
        Ok(self.push(
            t,
            rg,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                cols,
            },
        ))
    }

    /// Per-channel normalization of `x [C x L]` over the length axis.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, F>,
        eps: F,
    ) -> Result<(Var, Option<BatchStats<F>>), NnError> {
        let (ch, len) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return Err(NnError::ShapeMismatch {
                op: "batchnorm",
                left: self.value(gamma).shape().to_vec(),
                right: self.value(x).shape().to_vec(),
            });
        }
        let xd = self.value(x).data();
        let mut xhat = vec![F::zero(); ch * len];
        let mut inv_std = vec![F::zero(); ch];
        let stats = match mode {
            BatchNormMode::Train => {
                if len < 2 {
                    return Err(NnError::SequenceTooShort {
                        op: "batchnorm",
                        len,
                        min: 2,
                    });
                }
                let n = F::lit(len as f64);
                let mut means = Vec::with_capacity(ch);
                let mut vars = Vec::with_capacity(ch);
                for c in 0..ch {
                    let row = &xd[c * len..(c + 1) * len];
                    let mean = row.iter().copied().sum::<F>() / n;
                    let ss: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum();
                    let var = ss / n;
                    let inv = F::one() / (var + eps).sqrt();
                    inv_std[c] = inv;
                    for (h, &v) in xhat[c * len..(c + 1) * len].iter_mut().zip(row) {
                        *h = (v - mean) * inv;
                    }
                    means.push(mean);
                    vars.push(ss / F::lit((len - 1) as f64));
                }
                Some(BatchStats {
                    mean: means,
                    var: vars,
                })
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(NnError::ShapeMismatch {
                        op: "batchnorm",
                        left: vec![mean.len()],
                        right: vec![ch],
                    });
                }
                for c in 0..ch {
                    let inv = F::one() / (var[c] + eps).sqrt();
                    inv_std[c] = inv;
                    for (h, &v) in xhat[c * len..(c + 1) * len]
                        .iter_mut()
                        .zip(&xd[c * len..(c + 1) * len])
                    {
                        *h = (v - mean[c]) * inv;
                    }
                }
                None
            }
        };
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![F::zero(); ch * len];
        for c in 0..ch {
            for (o, &h) in out[c * len..(c + 1) * len]
                .iter_mut()
                .zip(&xhat[c * len..(c + 1) * len])
            {
                *o = g[c] * h + bt[c];
            }
        }
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let t = Tensor::new(&[ch, len], out)?;
        let train = stats.is_some();
        let v = self.push(
            t,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((v, stats))
    }

    /// Single-layer LSTM over `x [T x in]` from a zero state, returning every
    /// hidden state `[T x h]`. Gate order is input, forget, cell, output.
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
    ) -> Result<Var, NnError> {
        let (steps, in_dim) = self.value(x).dims2()?;
        let (g4, w_in) = self.value(w_ih).dims2()?;
        let hidden = g4 / 4;
        if w_in != in_dim
            || g4 != 4 * hidden
            || self.value(w_hh).shape() != [g4, hidden]
            || self.value(b_ih).shape() != [g4]
            || self.value(b_hh).shape() != [g4]
        {
            return Err(NnError::ShapeMismatch {
                op: "lstm",
                left: self.value(w_ih).shape().to_vec(),
                right: self.value(x).shape().to_vec(),
            });
        }
        if steps == 0 {
            return Err(NnError::SequenceTooShort {
                op: "lstm",
                len: 0,
                min: 1,
            });
        }
        let bias: Vec<F> = self
            .value(b_ih)
            .data()
            .iter()
            .zip(self.value(b_hh).data())
            .map(|(&a, &b)| a + b)
            .collect();
        let mut gates = vec![F::zero(); steps * g4];
        for t in 0..steps {
            gates[t * g4..(t + 1) * g4].copy_from_slice(&bias);
        }
        F::gemm(
            steps,
            in_dim,
            g4,
            F::one(),
            self.value(x).data(),
            (in_dim as isize, 1),
            self.value(w_ih).data(),
            (1, in_dim as isize),
            F::one(),
            &mut gates,
            (g4 as isize, 1),
        );
        let whh = self.value(w_hh).data();
        let mut cells = vec![F::zero(); steps * hidden];
        let mut tanh_cells = vec![F::zero(); steps * hidden];
        let mut hs = vec![F::zero(); steps * hidden];
        for t in 0..steps {
            let pre = &mut gates[t * g4..(t + 1) * g4];
            if t > 0 {
                let h_prev = &hs[(t - 1) * hidden..t * hidden];
                for (r, p) in pre.iter_mut().enumerate() {
                    *p = *p + dot(&whh[r * hidden..(r + 1) * hidden], h_prev);
                }
            }
            for j in 0..hidden {
                let i = sigmoid(pre[j]);
                let f = sigmoid(pre[hidden + j]);
                let g = pre[2 * hidden + j].tanh();
                let o = sigmoid(pre[3 * hidden + j]);
                pre[j] = i;
                pre[hidden + j] = f;
                pre[2 * hidden + j] = g;
                pre[3 * hidden + j] = o;
                let c_prev = if t > 0 {
                    cells[(t - 1) * hidden + j]
                } else {
                    F::zero()
                };
                let c = f * c_prev + i * g;
                let tc = c.tanh();
                cells[t * hidden + j] = c;
                tanh_cells[t * hidden + j] = tc;
                hs[t * hidden + j] = o * tc;
            }
        }
        let rg = [x, w_ih, w_hh, b_ih, b_hh].iter().any(|&v| self.needs(v));
        let out = Tensor::new(&[steps, hidden], hs)?;
        Ok(self.push(
            out,
            rg,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                cache: LstmCache {
                    gates,
                    cells,
                    tanh_cells,
                },
            },
        ))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let keep = F::lit(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Dropout { x, mask }))
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        self.backward_scaled(loss, F::one())
    }

    /// Like [`backward`](Self::backward) with the seed gradient set to `seed`
    /// (e.g. `1 / batch` when averaging per-sample losses).
    pub fn backward_scaled(&mut self, loss: Var, seed: F) -> Result<(), NnError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NnError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let loss_shape = lt.shape().to_vec();
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&loss_shape, seed));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (v, contrib) in self.node_backward(i, &g) {
                if !self.needs(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Adds every parameter-leaf gradient into `grads`.
    pub fn collect_param_grads(&self, grads: &mut Gradients<F>) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                grads.accumulate(id, g);
            }
        }
    }

    fn like(&self, v: Var, data: Vec<F>) -> Tensor<F> {
        Tensor::new(self.value(v).shape(), data).expect("gradient shape")
    }

    fn node_backward(&self, i: usize, g: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let out = match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(_) => unreachable!("param nodes are leaves"),
        };
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                let gb = gd.iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|v| v * *f))],
            Op::Sum(a) => {
                let t = self.value(*a);
                vec![(*a, Tensor::full(t.shape(), g.item()))]
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.item() / F::lit(t.len() as f64);
                vec![(*a, Tensor::full(t.shape(), v))]
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                vec![(*a, self.like(*a, d))]
            }
            Op::Tanh(a) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (F::one() - y * y))
                    .collect();
                vec![(*a, self.like(*a, d))]
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (F::one() - y))
                    .collect();
                vec![(*a, self.like(*a, d))]
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = av.dims2().expect("2-D");
                let db = bv.dims2().expect("2-D");
                let dc = out.dims2().expect("2-D");
                let mut res = Vec::new();
                if self.needs(*a) {
                    let mut ga = vec![F::zero(); av.len()];
                    if !*ta {
                        // dA = dC * op(B)^T
                        gemm_view(gd, dc, false, bv.data(), db, !*tb, F::zero(), &mut ga);
                    } else {
                        // dA = op(B) * dC^T
                        gemm_view(bv.data(), db, *tb, gd, dc, true, F::zero(), &mut ga);
                    }
                    res.push((*a, self.like(*a, ga)));
                }
                if self.needs(*b) {
                    let mut gb = vec![F::zero(); bv.len()];
                    if !*tb {
                        // dB = op(A)^T * dC
                        gemm_view(av.data(), da, !*ta, gd, dc, false, F::zero(), &mut gb);
                    } else {
                        // dB = dC^T * op(A)
                        gemm_view(gd, dc, true, av.data(), da, *ta, F::zero(), &mut gb);
                    }
                    res.push((*b, self.like(*b, gb)));
                }
                res
            }
            Op::Transpose(a) => vec![(*a, g.transpose2().expect("2-D"))],
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                vec![(*a, g.clone().reshape(&shape).expect("same length"))]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.value(p).len();
                    res.push((p, self.like(p, gd[offset..offset + n].to_vec())));
                    offset += n;
                }
                res
            }
            Op::Row { src, index } => {
                let t = self.value(*src);
                let cols = t.shape()[1];
                let mut d = vec![F::zero(); t.len()];
                d[index * cols..(index + 1) * cols].copy_from_slice(gd);
                vec![(*src, self.like(*src, d))]
            }
            Op::Pick { src, index } => {
                let t = self.value(*src);
                let mut d = vec![F::zero(); t.len()];
                d[*index] = g.item();
                vec![(*src, self.like(*src, d))]
            }
            Op::Softmax(a) => {
                let y = out.data();
                let s: F = gd.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
                let d = gd.iter().zip(y).map(|(&gv, &yv)| yv * (gv - s)).collect();
                vec![(*a, self.like(*a, d))]
            }
            Op::LogSoftmax(a) => {
                let s: F = gd.iter().copied().sum();
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv - y.exp() * s)
                    .collect();
                vec![(*a, self.like(*a, d))]
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (out_dim, in_dim) = wv.dims2().expect("2-D");
                let mut res = Vec::new();
                if self.needs(*x) {
                    let mut gx = vec![F::zero(); in_dim];
                    for o in 0..out_dim {
                        axpy(gd[o], wv.row(o), &mut gx);
                    }
                    res.push((*x, self.like(*x, gx)));
                }
                if self.needs(*w) {
                    let mut gw = vec![F::zero(); out_dim * in_dim];
                    for o in 0..out_dim {
                        axpy(gd[o], xv.data(), &mut gw[o * in_dim..(o + 1) * in_dim]);
                    }
                    res.push((*w, self.like(*w, gw)));
                }
                if self.needs(*b) {
                    res.push((*b, g.clone()));
                }
                res
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                cols,
            } => {
                let (in_ch, len) = self.value(*x).dims2().expect("2-D");
                let ws = self.value(*w).shape();
                let (out_ch, kernel) = (ws[0], ws[2]);
                let out_len = out.shape()[1];
                let ck = in_ch * kernel;
                let mut res = Vec::new();
                if self.needs(*x) {
                    let mut dcols = vec![F::zero(); out_len * ck];
                    // dcols [L' x CK] = g^T [L' x out] * W [out x CK]
                    F::gemm(
                        out_len,
                        out_ch,
                        ck,
                        F::one(),
                        gd,
                        (1, out_len as isize),
                        self.value(*w).data(),
                        (ck as isize, 1),
                        F::zero(),
                        &mut dcols,
                        (ck as isize, 1),
                    );
                    let mut gx = vec![F::zero(); in_ch * len];
                    for t in 0..out_len {
                        let row = &dcols[t * ck..(t + 1) * ck];
                        for c in 0..in_ch {
                            let dst = &mut gx[c * len + t * stride..c * len + t * stride + kernel];
                            for (d, &s) in dst.iter_mut().zip(&row[c * kernel..(c + 1) * kernel]) {
                                *d = *d + s;
                            }
                        }
                    }
                    res.push((*x, self.like(*x, gx)));
                }
                if self.needs(*w) {
                    let mut gw = vec![F::zero(); out_ch * ck];
                    F::gemm(
                        out_ch,
                        out_len,
                        ck,
                        F::one(),
                        gd,
                        (out_len as isize, 1),
                        cols,
                        (ck as isize, 1),
                        F::zero(),
                        &mut gw,
                        (ck as isize, 1),
                    );
                    res.push((*w, self.like(*w, gw)));
                }
                if self.needs(*b) {
                    let gb = (0..out_ch)
                        .map(|o| gd[o * out_len..(o + 1) * out_len].iter().copied().sum())
                        .collect();
                    res.push((*b, self.like(*b, gb)));
                }
                res
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (ch, len) = out.dims2().expect("2-D");
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); ch];
                let mut dbeta = vec![F::zero(); ch];
                let mut gx = vec![F::zero(); ch * len];
                let n = F::lit(len as f64);
                for c in 0..ch {
                    let gr = &gd[c * len..(c + 1) * len];
                    let hr = &xhat[c * len..(c + 1) * len];
                    let sum_g: F = gr.iter().copied().sum();
                    let sum_gh: F = gr.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                    dgamma[c] = sum_gh;
                    dbeta[c] = sum_g;
                    let k = gam[c] * inv_std[c];
                    let dst = &mut gx[c * len..(c + 1) * len];
                    if *train {
                        for ((d, &gv), &h) in dst.iter_mut().zip(gr).zip(hr) {
                            *d = k * (gv - sum_g / n - h * sum_gh / n);
                        }
                    } else {
                        for (d, &gv) in dst.iter_mut().zip(gr) {
                            *d = k * gv;
                        }
                    }
                }
                vec![
                    (*x, self.like(*x, gx)),
                    (*gamma, self.like(*gamma, dgamma)),
                    (*beta, self.like(*beta, dbeta)),
                ]
            }
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b_ih,
                b_hh,
                cache,
            } => self.lstm_backward(gd, out, [*x, *w_ih, *w_hh, *b_ih, *b_hh], cache),
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                vec![(*x, self.like(*x, d))]
            }
        }
    }

    fn lstm_backward(
        &self,
        gd: &[F],
        out: &Tensor<F>,
        vars: [Var; 5],
        cache: &LstmCache<F>,
    ) -> Vec<(Var, Tensor<F>)> {
        let [x, w_ih, w_hh, b_ih, b_hh] = vars;
        let (steps, hidden) = out.dims2().expect("2-D");
        let g4 = 4 * hidden;
        let in_dim = self.value(x).shape()[1];
        let whh = self.value(w_hh).data();
        let hs = out.data();
        let mut dpre = vec![F::zero(); steps * g4];
        let mut dh_next = vec![F::zero(); hidden];
        let mut dc_next = vec![F::zero(); hidden];
        let one = F::one();
        for t in (0..steps).rev() {
            let gates = &cache.gates[t * g4..(t + 1) * g4];
            let dp = &mut dpre[t * g4..(t + 1) * g4];
            for j in 0..hidden {
                let (i, f, g, o) = (
                    gates[j],
                    gates[hidden + j],
                    gates[2 * hidden + j],
                    gates[3 * hidden + j],
                );
                let tc = cache.tanh_cells[t * hidden + j];
                let c_prev = if t > 0 {
                    cache.cells[(t - 1) * hidden + j]
                } else {
                    F::zero()
                };
                let dh = gd[t * hidden + j] + dh_next[j];
                let d_o = dh * tc;
                let dc = dc_next[j] + dh * o * (one - tc * tc);
                dp[j] = dc * g * i * (one - i);
                dp[hidden + j] = dc * c_prev * f * (one - f);
                dp[2 * hidden + j] = dc * i * (one - g * g);
                dp[3 * hidden + j] = d_o * o * (one - o);
                dc_next[j] = dc * f;
            }
            dh_next.fill(F::zero());
            if t > 0 {
                for (r, &d) in dp.iter().enumerate() {
                    axpy(d, &whh[r * hidden..(r + 1) * hidden], &mut dh_next);
                }
            }
        }
        let mut res = Vec::new();
        if self.needs(x) {
            let mut gx = vec![F::zero(); steps * in_dim];
            F::gemm(
                steps,
                g4,
                in_dim,
                one,
                &dpre,
                (g4 as isize, 1),
                self.value(w_ih).data(),
                (in_dim as isize, 1),
                F::zero(),
                &mut gx,
                (in_dim as isize, 1),
            );
            res.push((x, self.like(x, gx)));
        }
        if self.needs(w_ih) {
            let mut gw = vec![F::zero(); g4 * in_dim];
            F::gemm(
                g4,
                steps,
                in_dim,
                one,
                &dpre,
                (1, g4 as isize),
                self.value(x).data(),
                (in_dim as isize, 1),
                F::zero(),
                &mut gw,
                (in_dim as isize, 1),
            );
            res.push((w_ih, self.like(w_ih, gw)));
        }
        if self.needs(w_hh) {
            let mut gw = vec![F::zero(); g4 * hidden];
            if steps > 1 {
                F::gemm(
                    g4,
                    steps - 1,
                    hidden,
                    one,
                    &dpre[g4..],
                    (1, g4 as isize),
                    &hs[..(steps - 1) * hidden],
                    (hidden as isize, 1),
                    F::zero(),
                    &mut gw,
                    (hidden as isize, 1),
                );
            }
            res.push((w_hh, self.like(w_hh, gw)));
        }
        if self.needs(b_ih) || self.needs(b_hh) {
            let mut gb = vec![F::zero(); g4];
            for t in 0..steps {
                for (a, &d) in gb.iter_mut().zip(&dpre[t * g4..(t + 1) * g4]) {
                    *a = *a + d;
                }
            }
            res.push((b_ih, self.like(b_ih, gb.clone())));
            res.push((b_hh, self.like(b_hh, gb)));
        }
        res
    }
}

/// Writes `op(a) * op(b)` into `c` (row-major, `beta`-scaled), where
/// `a_dims`/`b_dims` are the stored shapes before the optional transpose.
#[allow(clippy::too_many_arguments)]
fn gemm_view<F: Real>(
    a: &[F],
    a_dims: (usize, usize),
    ta: bool,
    b: &[F],
    b_dims: (usize, usize),
    tb: bool,
    beta: F,
    c: &mut [F],
) {
    let (m, k) = if ta { (a_dims.1, a_dims.0) } else { a_dims };
    let n = if tb { b_dims.0 } else { b_dims.1 };
    let a_strides = if ta {
        (1, a_dims.1 as isize)
    } else {
        (a_dims.1 as isize, 1)
    };
    let b_strides = if tb {
        (1, b_dims.1 as isize)
    } else {
        (b_dims.1 as isize, 1)
    };
    F::gemm(
        m,
        k,
        n,
        F::one(),
        a,
        a_strides,
        b,
        b_strides,
        beta,
        c,
        (n as isize, 1),
    );
}

pub(crate) fn softmax_slice<F: Real>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gives_twice_input() {
        let mut tape = Tape::new();
        let data = [1.0, -2.0, 3.5, 0.25];
        let x = tape.input(t(&[4], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap().data(), &want[..]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(NnError::NotScalar { .. })));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]), true);
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        // d(x * const)/dx = const
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn conv_rejects_short_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[2, 3]), false);
        let w = tape.input(Tensor::zeros(&[1, 2, 4]), false);
        let b = tape.input(Tensor::zeros(&[1]), false);
        assert!(matches!(
            tape.conv1d(x, w, b, 1),
            Err(NnError::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn conv_matches_direct_correlation() {
        let mut tape = Tape::new();
        let xd: Vec<f64> = (0..14).map(|i| (i as f64 * 0.37).sin()).collect();
        let wd: Vec<f64> = (0..18).map(|i| (i as f64 * 0.91).cos()).collect();
        let x = tape.input(t(&[2, 7], &xd), false);
        let w = tape.input(t(&[3, 2, 3], &wd), false);
        let b = tape.input(t(&[3], &[0.1, -0.2, 0.3]), false);
        let y = tape.conv1d(x, w, b, 2).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[3, 3]);
        for o in 0..3 {
            for p in 0..3 {
                let mut acc = [0.1, -0.2, 0.3][o];
                for c in 0..2 {
                    for k in 0..3 {
                        acc += wd[o * 6 + c * 3 + k] * xd[c * 7 + p * 2 + k];
                    }
                }
                assert!((out.data()[o * 3 + p] - acc).abs() < 1e-12);
            }
        }
    }
}
