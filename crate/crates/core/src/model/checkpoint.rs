//! Checkpoint directory: `params.mwev` holds one `MWEV` record per parameter
//! (record name = parameter name, store order), `checkpoint.meta` is a
//! `key = value` sidecar describing how to rebuild the model.

use std::path::Path;

use super::{ConvSpec, LossConfig, LossMode, Model, ModelDims, ModelError, ModelKind};
use crate::encoder::{encode_record, read_records, write_bytes};
use crate::kv;
use crate::neuralcore::{ParamStore, Real, Tensor};

pub const CHECKPOINT_PARAMS: &str = "params.mwev";
pub const CHECKPOINT_META: &str = "checkpoint.meta";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub loss: LossConfig,
    /// Initialization seed of the model.
    pub seed: u64,
    /// Class names in label-index order.
    pub labels: Vec<String>,
    /// Free-form entries, such as encoder settings.
    pub extra: Vec<(String, String)>,
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let convs: Vec<String> = d.convs.iter().map(|c| format!("{}/{}", c.kernel, c.stride)).collect();
        let mut e: Vec<(String, String)> = vec![
            ("kind".into(), self.kind.to_string()),
            ("classes".into(), d.classes.to_string()),
            ("width".into(), d.width.to_string()),
            ("n_mfcc".into(), d.n_mfcc.to_string()),
            ("convs".into(), convs.join(",")),
            ("hidden".into(), d.hidden.to_string()),
            ("dropout".into(), d.dropout.to_string()),
            ("lambda".into(), self.loss.lambda.to_string()),
            ("loss_mode".into(), self.loss.mode.to_string()),
            ("seed".into(), self.seed.to_string()),
        ];
        e.extend(self.labels.iter().map(|l| ("label[]".to_string(), l.clone())));
        e.extend(self.extra.iter().cloned());
        kv::render(&e)
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::Checkpoint(m);
        let entries = kv::parse(text).map_err(|e| bad(e.to_string()))?;
        let get = |k: &str| {
            entries
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| bad(format!("missing key {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, ModelError> {
            v.parse().map_err(|_| ModelError::Checkpoint(format!("bad value {v:?} for {k}")))
        }
        let convs = get("convs")?
            .split(',')
            .map(|s| {
                let (k, st) = s.split_once('/').ok_or_else(|| bad(format!("bad conv spec {s:?}")))?;
                Ok(ConvSpec {
                    kernel: num("convs", k)?,
                    stride: num("convs", st)?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        const KNOWN: [&str; 11] = [
            "kind", "classes", "width", "n_mfcc", "convs", "hidden", "dropout", "lambda", "loss_mode",
            "seed", "label[]",
        ];
        Ok(Self {
            kind: get("kind")?.parse()?,
            dims: ModelDims {
                classes: num("classes", get("classes")?)?,
                width: num("width", get("width")?)?,
                n_mfcc: num("n_mfcc", get("n_mfcc")?)?,
                convs,
                hidden: num("hidden", get("hidden")?)?,
                dropout: num("dropout", get("dropout")?)?,
            },
            loss: LossConfig {
                lambda: num("lambda", get("lambda")?)?,
                mode: get("loss_mode")?.parse::<LossMode>()?,
            },
            seed: num("seed", get("seed")?)?,
            labels: entries
                .iter()
                .filter(|(k, _)| k == "label[]")
                .map(|(_, v)| v.clone())
                .collect(),
            extra: entries
                .iter()
                .filter(|(k, _)| !KNOWN.contains(&k.as_str()))
                .cloned()
                .collect(),
        })
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Writes every parameter, including batch-norm running statistics, at
/// 32-bit precision.
pub fn save_checkpoint<F: Real>(
    dir: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore<F>,
) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", dir.display())))?;
    let mut buf = Vec::new();
    for (_, p) in store.iter() {
        let shape = p.value.shape();
        let rows = shape.first().copied().unwrap_or(1);
        let cols = p.value.len() / rows;
        let values: Vec<f32> = p.value.data().iter().map(|v| v.as_f64() as f32).collect();
        encode_record(&mut buf, &p.name, None, rows, cols, &values)?;
    }
    write_bytes(&dir.join(CHECKPOINT_PARAMS), &buf)?;
    write_bytes(&dir.join(CHECKPOINT_META), meta.to_text().as_bytes())?;
    Ok(())
}

/// Rebuilds the model described by the sidecar and loads every parameter.
pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<(Model, ParamStore<F>, CheckpointMeta), ModelError> {
    let meta_path = dir.join(CHECKPOINT_META);
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    let meta = CheckpointMeta::from_text(&text)?;
    if meta.labels.len() != meta.dims.classes {
        return Err(ModelError::Checkpoint(format!(
            "{} labels listed for {} classes",
            meta.labels.len(),
            meta.dims.classes
        )));
    }
    let (model, mut store) = Model::build::<F>(meta.kind, meta.dims.clone(), meta.seed)?;
    let records = read_records(&dir.join(CHECKPOINT_PARAMS))?;
    if records.len() != store.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} parameter records for a model with {} parameters",
            records.len(),
            store.len()
        )));
    }
    for rec in records {
        let id = store
            .id(&rec.name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unexpected parameter {}", rec.name)))?;
        let target = store.value_mut(id);
        let rows = target.shape().first().copied().unwrap_or(1);
        if rec.rows != rows || rec.values.len() != target.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter {} has shape {:?}, record is {} x {}",
                rec.name,
                target.shape(),
                rec.rows,
                rec.cols
            )));
        }
        let shape = target.shape().to_vec();
        *target = Tensor::from_f32(&shape, &rec.values)?;
    }
    Ok((model, store, meta))
}
