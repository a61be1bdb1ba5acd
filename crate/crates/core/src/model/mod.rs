//! The dual-branch classifier and its single-branch baselines.
//!
//! Parameter names are stable and are what checkpoints are keyed by:
//! `b1.conv{i}.{weight,bias}`, `b1.bn{i}.{gamma,beta,running_mean,running_var}`,
//! `l1.{w_ih,w_hh,b_ih,b_hh}`, `a1.{w,v}`, `l2.*`, `a2.*`,
//! `d.fc1.{weight,bias}`, `d.fc2.{weight,bias}` and `centers`.

mod checkpoint;
mod report;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::neuralcore::{
    BatchNorm1d, BatchStats, Conv1d, Dropout, Linear, Lstm, Mode, NnError, ParamId, ParamStore,
    Real, SoftAttention, Tape, Tensor, Var,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_META, CHECKPOINT_PARAMS};
pub use report::{ParamReport, ParamRow};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{block}: expected input {expected}, got {found:?}")]
    Shape {
        block: &'static str,
        expected: String,
        found: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{0} model needs the {1} input")]
    MissingInput(ModelKind, &'static str),
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
    #[error("unknown model kind {0:?} (expected mewehv, cnnmfcc or waveonly)")]
    UnknownKind(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum ModelKind {
    #[serde(rename = "MeWEHV")]
    MeWEHV,
    #[serde(rename = "CNNMFCC")]
    CnnMfcc,
    #[serde(rename = "WaveOnly")]
    WaveOnly,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::MeWEHV, ModelKind::CnnMfcc, ModelKind::WaveOnly];

    pub fn uses_mfcc(self) -> bool {
        self != ModelKind::WaveOnly
    }

    pub fn uses_wave(self) -> bool {
        self != ModelKind::CnnMfcc
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::MeWEHV => "MeWEHV",
            ModelKind::CnnMfcc => "CNNMFCC",
            ModelKind::WaveOnly => "WaveOnly",
        })
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mewehv" => Ok(ModelKind::MeWEHV),
            "cnnmfcc" => Ok(ModelKind::CnnMfcc),
            "waveonly" | "wave" => Ok(ModelKind::WaveOnly),
            _ => Err(ModelError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
}

/// Layer sizes. [`ModelDims::new`] gives the full-size network; the fields
/// may be shrunk for fast tests.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDims {
    pub classes: usize,
    /// Wave-encoder embedding width.
    pub width: usize,
    /// MFCC rows, which are also the convolution channels.
    pub n_mfcc: usize,
    pub convs: Vec<ConvSpec>,
    /// LSTM hidden size and attention dimension of each branch.
    pub hidden: usize,
    pub dropout: f64,
}

impl ModelDims {
    pub fn new(classes: usize, width: usize) -> Self {
        Self {
            classes,
            width,
            n_mfcc: 128,
            convs: vec![
                ConvSpec { kernel: 5, stride: 2 },
                ConvSpec { kernel: 4, stride: 1 },
                ConvSpec { kernel: 4, stride: 1 },
            ],
            hidden: 128,
            dropout: Dropout::DEFAULT_RATE,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidDims(m.to_string()));
        if self.classes < 2 {
            return bad("at least 2 classes are required");
        }
        if self.width == 0 || self.n_mfcc == 0 || self.hidden == 0 {
            return bad("width, n_mfcc and hidden must be positive");
        }
        if self.convs.iter().any(|c| c.kernel == 0 || c.stride == 0) {
            return bad("conv kernels and strides must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Length of the rich embedding for `kind`.
    pub fn embedding_dim(&self, kind: ModelKind) -> usize {
        match kind {
            ModelKind::MeWEHV => 2 * self.hidden,
            _ => self.hidden,
        }
    }

    /// Shortest MFCC input the convolution stack accepts.
    pub fn min_mfcc_frames(&self) -> usize {
        self.convs
            .iter()
            .rev()
            .fold(1, |len, c| (len - 1) * c.stride + c.kernel)
    }
}

#[derive(Clone, Debug)]
pub struct MfccBranch {
    pub convs: Vec<(Conv1d, BatchNorm1d)>,
    pub lstm: Lstm,
    pub attention: SoftAttention,
}

#[derive(Clone, Debug)]
pub struct WaveBranch {
    pub lstm: Lstm,
    pub attention: SoftAttention,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub fc1: Linear,
    pub dropout: Dropout,
    pub fc2: Linear,
}

/// One row of a forward shape trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub block: &'static str,
    pub layer: &'static str,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShapeTrace {
    pub rows: Vec<TraceRow>,
}

impl ShapeTrace {
    fn push(&mut self, block: &'static str, layer: &'static str, input: &[usize], output: &[usize]) {
        self.rows.push(TraceRow {
            block,
            layer,
            input: input.to_vec(),
            output: output.to_vec(),
        });
    }
}

fn record<F: Real>(
    trace: &mut Option<&mut ShapeTrace>,
    tape: &Tape<'_, F>,
    block: &'static str,
    layer: &'static str,
    input: Var,
    output: Var,
) {
    if let Some(t) = trace.as_deref_mut() {
        t.push(block, layer, tape.value(input).shape(), tape.value(output).shape());
    }
}

/// Branch inputs for one clip. Which ones are required depends on the kind.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a, F> {
    /// `[n_mfcc × frames]`
    pub mfcc: Option<&'a Tensor<F>>,
    /// `[frames × width]`
    pub wave: Option<&'a Tensor<F>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// `nll + λ·center`, both reaching every parameter.
    Joint,
    /// nll trains only the head; center loss trains branches and centers.
    Split,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Joint => "joint",
            LossMode::Split => "split",
        })
    }
}

impl FromStr for LossMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(LossMode::Joint),
            "split" => Ok(LossMode::Split),
            _ => Err(ModelError::InvalidDims(format!("unknown loss mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            mode: LossMode::Joint,
        }
    }
}

/// Graph nodes of one sample's loss.
#[derive(Clone, Debug)]
pub struct LossParts<F> {
    pub total: Var,
    pub nll: Var,
    pub center: Var,
    pub log_probs: Var,
    pub embedding: Var,
    pub bn_stats: Vec<BatchStats<F>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub mfcc_branch: Option<MfccBranch>,
    pub wave_branch: Option<WaveBranch>,
    pub head: Head,
    pub centers: ParamId,
}

impl Model {
    /// Creates the parameters in a fresh store, drawing initial weights from
    /// a generator seeded with `seed`.
    pub fn build<F: Real>(
        kind: ModelKind,
        dims: ModelDims,
        seed: u64,
    ) -> Result<(Self, ParamStore<F>), ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = dims.hidden;
        let mfcc_branch = if kind.uses_mfcc() {
            let mut convs = Vec::with_capacity(dims.convs.len());
            for (i, c) in dims.convs.iter().enumerate() {
                let conv = Conv1d::new(
                    &mut store,
                    &format!("b1.conv{i}"),
                    dims.n_mfcc,
                    dims.n_mfcc,
                    c.kernel,
                    c.stride,
                    &mut rng,
                )?;
                let bn = BatchNorm1d::new(&mut store, &format!("b1.bn{i}"), dims.n_mfcc)?;
                convs.push((conv, bn));
            }
            Some(MfccBranch {
                convs,
                lstm: Lstm::new(&mut store, "l1", dims.n_mfcc, h, &mut rng)?,
                attention: SoftAttention::new(&mut store, "a1", h, &mut rng)?,
            })
        } else {
            None
        };
        let wave_branch = if kind.uses_wave() {
            Some(WaveBranch {
                lstm: Lstm::new(&mut store, "l2", dims.width, h, &mut rng)?,
                attention: SoftAttention::new(&mut store, "a2", h, &mut rng)?,
            })
        } else {
            None
        };
        let d = dims.embedding_dim(kind);
        let head = Head {
            fc1: Linear::new(&mut store, "d.fc1", d, d, &mut rng)?,
            dropout: Dropout { rate: dims.dropout },
            fc2: Linear::new(&mut store, "d.fc2", d, dims.classes, &mut rng)?,
        };
        let centers = store.add("centers", Tensor::zeros(&[dims.classes, d]), true)?;
        Ok((
            Self {
                kind,
                dims,
                mfcc_branch,
                wave_branch,
                head,
                centers,
            },
            store,
        ))
    }

    pub fn embedding_dim(&self) -> usize {
        self.dims.embedding_dim(self.kind)
    }

    /// B1, transpose, L1 and A1: `[n_mfcc × T]` to `[hidden]`. Also returns
    /// each batch norm's training statistics.
    pub fn forward_mfcc_branch<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        mfcc: Var,
        mode: Mode,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<(Var, Vec<BatchStats<F>>), ModelError> {
        let branch = self
            .mfcc_branch
            .as_ref()
            .ok_or(ModelError::MissingInput(self.kind, "mfcc branch"))?;
        let shape = tape.value(mfcc).shape().to_vec();
        let min = self.dims.min_mfcc_frames();
        if shape.len() != 2 || shape[0] != self.dims.n_mfcc || shape[1] < min {
            return Err(ModelError::Shape {
                block: "B1",
                expected: format!("[{}, >= {min}]", self.dims.n_mfcc),
                found: shape,
            });
        }
        let mut x = mfcc;
        let mut stats = Vec::new();
        for (conv, bn) in &branch.convs {
            let y = conv.forward(tape, x)?;
            record(&mut trace, tape, "B1", "Conv1d", x, y);
            let (z, s) = bn.forward(tape, y, mode)?;
            record(&mut trace, tape, "B1", "BatchNorm1d", y, z);
            stats.extend(s);
            x = tape.relu(z);
            record(&mut trace, tape, "B1", "ReLU", z, x);
        }
        let xt = tape.transpose(x)?;
        let h = branch.lstm.forward(tape, xt)?;
        record(&mut trace, tape, "L1", "LSTM", xt, h);
        let (pooled, _) = branch.attention.forward(tape, h)?;
        record(&mut trace, tape, "A1", "SoftAttention", h, pooled);
        Ok((pooled, stats))
    }

    /// L2 and A2: `[frames × width]` to `[hidden]`.
    pub fn forward_wave_branch<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        emb: Var,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var, ModelError> {
        let branch = self
            .wave_branch
            .as_ref()
            .ok_or(ModelError::MissingInput(self.kind, "wave branch"))?;
        let shape = tape.value(emb).shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.dims.width {
            return Err(ModelError::Shape {
                block: "L2",
                expected: format!("[>= 1, {}]", self.dims.width),
                found: shape,
            });
        }
        let h = branch.lstm.forward(tape, emb)?;
        record(&mut trace, tape, "L2", "LSTM", emb, h);
        let (pooled, _) = branch.attention.forward(tape, h)?;
        record(&mut trace, tape, "A2", "SoftAttention", h, pooled);
        Ok(pooled)
    }

    /// Block D: two linear layers with ReLU and dropout between, then
    /// log-softmax.
    pub fn classify<F: Real, R: Rng>(
        &self,
        tape: &mut Tape<'_, F>,
        embedding: Var,
        mode: Mode,
        rng: &mut R,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var, ModelError> {
        let h = &self.head;
        let a = h.fc1.forward(tape, embedding)?;
        record(&mut trace, tape, "D", "Linear", embedding, a);
        let b = tape.relu(a);
        record(&mut trace, tape, "D", "ReLU", a, b);
        let c = h.dropout.forward(tape, b, mode, rng)?;
        record(&mut trace, tape, "D", "Dropout", b, c);
        let d = h.fc2.forward(tape, c)?;
        record(&mut trace, tape, "D", "Linear", c, d);
        let out = tape.log_softmax(d)?;
        record(&mut trace, tape, "D", "LogSoftmax", d, out);
        Ok(out)
    }

    /// The rich embedding: the branch outputs, concatenated in branch order.
    pub fn embed<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        input: ModelInput<'_, F>,
        mode: Mode,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<(Var, Vec<BatchStats<F>>), ModelError> {
        let mut parts = Vec::new();
        let mut stats = Vec::new();
        if self.kind.uses_mfcc() {
            let m = input.mfcc.ok_or(ModelError::MissingInput(self.kind, "mfcc"))?;
            let m = tape.constant(m.clone());
            let (b1, s) = self.forward_mfcc_branch(tape, m, mode, trace.as_deref_mut())?;
            parts.push(b1);
            stats = s;
        }
        if self.kind.uses_wave() {
            let e = input.wave.ok_or(ModelError::MissingInput(self.kind, "wave embeddings"))?;
            let e = tape.constant(e.clone());
            parts.push(self.forward_wave_branch(tape, e, trace)?);
        }
        let r = if parts.len() == 2 { fuse(tape, parts[0], parts[1])? } else { parts[0] };
        Ok((r, stats))
    }

    /// `½‖r − centers[label]‖²`
    pub fn center_loss<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        embedding: Var,
        label: usize,
    ) -> Result<Var, ModelError> {
        self.check_label(label)?;
        let centers = tape.param(self.centers)?;
        let c = tape.row(centers, label)?;
        let diff = tape.sub(embedding, c)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        Ok(tape.scale(s, F::lit(0.5)))
    }

    pub fn check_label(&self, label: usize) -> Result<(), ModelError> {
        if label >= self.dims.classes {
            return Err(ModelError::LabelOutOfRange {
                label,
                classes: self.dims.classes,
            });
        }
        Ok(())
    }

    /// Loss for one labelled clip.
    #[allow(clippy::too_many_arguments)]
    pub fn total_loss<F: Real, R: Rng>(
        &self,
        tape: &mut Tape<'_, F>,
        input: ModelInput<'_, F>,
        label: usize,
        loss: LossConfig,
        mode: Mode,
        rng: &mut R,
    ) -> Result<LossParts<F>, ModelError> {
        self.check_label(label)?;
        let (r, bn_stats) = self.embed(tape, input, mode, None)?;
        let head_in = match loss.mode {
            LossMode::Joint => r,
            LossMode::Split => tape.detach(r),
        };
        let log_probs = self.classify(tape, head_in, mode, rng, None)?;
        let nll = nll_loss(tape, log_probs, label)?;
        let center = self.center_loss(tape, r, label)?;
        let weighted = tape.scale(center, F::lit(loss.lambda));
        let total = tape.add(nll, weighted)?;
        Ok(LossParts {
            total,
            nll,
            center,
            log_probs,
            embedding: r,
            bn_stats,
        })
    }

    /// Folds per-sample batch-norm statistics into the running estimates, in
    /// the order given.
    pub fn update_running_stats<F: Real>(&self, store: &mut ParamStore<F>, stats: &[BatchStats<F>]) {
        let Some(branch) = &self.mfcc_branch else {
            return;
        };
        let n = branch.convs.len();
        for (i, s) in stats.iter().enumerate() {
            branch.convs[i % n].1.update_running(store, s);
        }
    }

    pub fn param_report<F: Real>(&self, store: &ParamStore<F>) -> ParamReport {
        ParamReport::new(self, store)
    }
}

/// Concatenates two branch embeddings: `b1` first.
pub fn fuse<F: Real>(tape: &mut Tape<'_, F>, b1: Var, b2: Var) -> Result<Var, ModelError> {
    Ok(tape.concat(&[b1, b2])?)
}

/// `−log_probs[label]`
pub fn nll_loss<F: Real>(tape: &mut Tape<'_, F>, log_probs: Var, label: usize) -> Result<Var, ModelError> {
    let n = tape.value(log_probs).len();
    if label >= n {
        return Err(ModelError::LabelOutOfRange { label, classes: n });
    }
    let p = tape.pick(log_probs, label)?;
    Ok(tape.scale(p, -F::one()))
}
