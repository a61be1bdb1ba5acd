use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::kv;
use crate::model::{LossMode, ModelKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Language,
    Accent,
    Speaker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Toy,
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

macro_rules! text_enum {
    ($t:ty, $($v:ident = $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok(Self::$v),)+
                    _ => Err(format!("expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
    };
}

text_enum!(Task, Language = "language", Accent = "accent", Speaker = "speaker");
text_enum!(EncoderKind, Toy = "toy", Precomputed = "precomputed");
text_enum!(Precision, F32 = "f32", F64 = "f64");

/// Every setting of a training run. Each field is one `key = value` entry
/// of the config file and one `--key` flag of the CLI.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Column name in result tables.
    pub dataset: String,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub encoder: EncoderKind,
    pub encoder_dir: Option<PathBuf>,
    pub encoder_seed: u64,
    pub width: usize,
    pub kind: ModelKind,
    pub hidden: usize,
    pub classes: Option<usize>,
    pub lambda: f64,
    pub loss_mode: LossMode,
    pub lr: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub clip_seconds: f64,
    pub cap_per_class: Option<usize>,
    /// Stop once validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
    /// Require disjoint speaker sets across splits. Defaults to on for
    /// language and accent tasks and off for speaker identification.
    pub speaker_disjoint: Option<bool>,
    pub workers: usize,
    pub precision: Precision,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Accent,
            dataset: "dataset".into(),
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            encoder: EncoderKind::Toy,
            encoder_dir: None,
            encoder_seed: 0,
            width: 1024,
            kind: ModelKind::MeWEHV,
            hidden: 128,
            classes: None,
            lambda: 0.01,
            loss_mode: LossMode::Joint,
            lr: 1e-3,
            clip_norm: 5.0,
            dropout: 0.2,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            out: PathBuf::from("runs/default"),
            clip_seconds: 8.0,
            cap_per_class: None,
            target_val_accuracy: None,
            speaker_disjoint: None,
            workers: 1,
            precision: Precision::F32,
        }
    }
}

pub const CONFIG_KEYS: [&str; 28] = [
    "task",
    "dataset",
    "train_manifest",
    "val_manifest",
    "test_manifest",
    "encoder",
    "encoder_dir",
    "encoder_seed",
    "width",
    "kind",
    "hidden",
    "classes",
    "lambda",
    "loss_mode",
    "lr",
    "clip_norm",
    "dropout",
    "epochs",
    "batch_size",
    "seed",
    "out",
    "clip_seconds",
    "cap_per_class",
    "target_val_accuracy",
    "speaker_disjoint",
    "workers",
    "precision",
    "n_mfcc",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| HarnessError::Config(format!("{key} = {value:?}: {e}")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, HarnessError>
where
    T::Err: fmt::Display,
{
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl ExperimentConfig {
    /// Applies one setting. Relative paths are joined onto `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), HarnessError> {
        let path = |v: &str| -> Option<PathBuf> {
            (!v.is_empty()).then(|| {
                let p = PathBuf::from(v);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            })
        };
        match key {
            "task" => self.task = parse(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "train_manifest" => self.train_manifest = path(value),
            "val_manifest" => self.val_manifest = path(value),
            "test_manifest" => self.test_manifest = path(value),
            "encoder" => self.encoder = parse(key, value)?,
            "encoder_dir" => self.encoder_dir = path(value),
            "encoder_seed" => self.encoder_seed = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "kind" => self.kind = value.parse().map_err(|e| HarnessError::Config(format!("{e}")))?,
            "hidden" => self.hidden = parse(key, value)?,
            "classes" => self.classes = optional(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "loss_mode" => {
                self.loss_mode = value.parse().map_err(|e| HarnessError::Config(format!("{e}")))?
            }
            "lr" => self.lr = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = path(value).unwrap_or_default(),
            "clip_seconds" => self.clip_seconds = parse(key, value)?,
            "cap_per_class" => self.cap_per_class = optional(key, value)?,
            "target_val_accuracy" => self.target_val_accuracy = optional(key, value)?,
            "speaker_disjoint" => self.speaker_disjoint = optional(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            "n_mfcc" => {
                let n: usize = parse(key, value)?;
                if n != 128 {
                    return Err(HarnessError::Config("n_mfcc is fixed at 128".into()));
                }
            }
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base)
    }

    pub fn from_text(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut c = Self::default();
        for (k, v) in kv::parse(text).map_err(|e| HarnessError::Config(e.to_string()))? {
            c.set(&k, &v, base)?;
        }
        Ok(c)
    }

    pub fn apply(&mut self, overrides: &[(String, String)], base: &Path) -> Result<(), HarnessError> {
        for (k, v) in overrides {
            self.set(k, v, base)?;
        }
        Ok(())
    }

    pub fn speaker_disjoint(&self) -> bool {
        self.speaker_disjoint.unwrap_or(self.task != Task::Speaker)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.train_manifest.is_none() || self.val_manifest.is_none() {
            return bad("train_manifest and val_manifest are required");
        }
        if self.encoder == EncoderKind::Precomputed && self.encoder_dir.is_none() {
            return bad("the precomputed encoder needs encoder_dir");
        }
        if self.workers != 1 {
            return bad("only workers = 1 is supported");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.lambda >= 0.0) || !(self.clip_norm >= 0.0) {
            return bad("lr must be positive; lambda and clip_norm non-negative");
        }
        if !(self.clip_seconds > 0.0) {
            return bad("clip_seconds must be positive");
        }
        if let Some(t) = self.target_val_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return bad("target_val_accuracy must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let o = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let entries: Vec<(String, String)> = [
            ("task", self.task.to_string()),
            ("dataset", self.dataset.clone()),
            ("train_manifest", p(&self.train_manifest)),
            ("val_manifest", p(&self.val_manifest)),
            ("test_manifest", p(&self.test_manifest)),
            ("encoder", self.encoder.to_string()),
            ("encoder_dir", p(&self.encoder_dir)),
            ("encoder_seed", self.encoder_seed.to_string()),
            ("width", self.width.to_string()),
            ("kind", self.kind.to_string()),
            ("hidden", self.hidden.to_string()),
            ("classes", o(self.classes.map(|c| c.to_string()))),
            ("lambda", self.lambda.to_string()),
            ("loss_mode", self.loss_mode.to_string()),
            ("lr", self.lr.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("dropout", self.dropout.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("clip_seconds", self.clip_seconds.to_string()),
            ("cap_per_class", o(self.cap_per_class.map(|c| c.to_string()))),
            ("target_val_accuracy", o(self.target_val_accuracy.map(|c| c.to_string()))),
            ("speaker_disjoint", o(self.speaker_disjoint.map(|c| c.to_string()))),
            ("workers", self.workers.to_string()),
            ("precision", self.precision.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        kv::render(&entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let text = "# run\nkind = cnnmfcc\nepochs = 3\ntrain_manifest = m/train.csv\nval_manifest = /abs/val.csv\ntarget_val_accuracy = 0.9\n";
        let mut c = ExperimentConfig::from_text(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.kind, ModelKind::CnnMfcc);
        assert_eq!(c.train_manifest.as_deref(), Some(Path::new("/cfg/m/train.csv")));
        assert_eq!(c.val_manifest.as_deref(), Some(Path::new("/abs/val.csv")));
        c.apply(&[("epochs".into(), "7".into())], Path::new(".")).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.target_val_accuracy, Some(0.9));
        c.validate().unwrap();
    }

    #[test]
    fn rendered_config_parses_back() {
        let mut c = ExperimentConfig::default();
        c.train_manifest = Some("/t.csv".into());
        c.cap_per_class = Some(4);
        c.speaker_disjoint = Some(false);
        let back = ExperimentConfig::from_text(&c.to_text(), Path::new("")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_key_is_settable() {
        let samples = [
            ("task", "speaker"), ("dataset", "x"), ("train_manifest", "a"), ("val_manifest", "b"),
            ("test_manifest", "c"), ("encoder", "precomputed"), ("encoder_dir", "d"),
            ("encoder_seed", "3"), ("width", "768"), ("kind", "waveonly"), ("hidden", "64"),
            ("classes", "4"), ("lambda", "0.5"), ("loss_mode", "split"), ("lr", "0.01"),
            ("clip_norm", "0"), ("dropout", "0.1"), ("epochs", "2"), ("batch_size", "8"),
            ("seed", "9"), ("out", "o"), ("clip_seconds", "1"), ("cap_per_class", "10"),
            ("target_val_accuracy", "0.95"), ("speaker_disjoint", "true"), ("workers", "1"),
            ("precision", "f64"), ("n_mfcc", "128"),
        ];
        assert_eq!(samples.len(), CONFIG_KEYS.len());
        let mut c = ExperimentConfig::default();
        for (k, v) in samples {
            assert!(CONFIG_KEYS.contains(&k));
            c.set(k, v, Path::new("/")).unwrap();
        }
        assert!(c.set("nope", "1", Path::new("/")).is_err());
        assert!(c.set("epochs", "many", Path::new("/")).is_err());
        c.workers = 2;
        assert!(c.validate().is_err());
    }
}
