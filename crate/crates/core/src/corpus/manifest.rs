use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CorpusError;

pub const MANIFEST_HEADER: [&str; 7] = [
    "clip_id",
    "path",
    "speaker_id",
    "video_id",
    "gender",
    "label",
    "duration_s",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "male" => Ok(Gender::Male),
            "female" => Ok(Gender::Female),
            other => Err(CorpusError::InvalidField {
                field: "gender",
                value: other.to_string(),
            }),
        }
    }
}

/// One manifest row. `label` is the accent, language or class the clip is
/// classified under; `path` is relative to the manifest's directory unless
/// absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub path: String,
    pub speaker_id: String,
    pub video_id: String,
    pub gender: Gender,
    pub label: String,
    pub duration_s: f64,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        for (field, value) in [
            ("clip_id", &self.clip_id),
            ("path", &self.path),
            ("speaker_id", &self.speaker_id),
            ("video_id", &self.video_id),
            ("label", &self.label),
        ] {
            if value.is_empty() {
                return Err(CorpusError::InvalidField {
                    field,
                    value: format!("empty {field} in clip {:?}", self.clip_id),
                });
            }
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(CorpusError::InvalidField {
                field: "duration_s",
                value: self.duration_s.to_string(),
            });
        }
        Ok(())
    }

    /// Field lookup by manifest column name.
    pub fn key(&self, name: &str) -> Option<&str> {
        match name {
            "clip_id" => Some(&self.clip_id),
            "path" => Some(&self.path),
            "speaker_id" => Some(&self.speaker_id),
            "video_id" => Some(&self.video_id),
            "gender" => Some(self.gender.as_str()),
            "label" => Some(&self.label),
            _ => None,
        }
    }

    pub fn resolve_path(&self, manifest_dir: &Path) -> std::path::PathBuf {
        let p = Path::new(&self.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_dir.join(p)
        }
    }
}

pub fn write_manifest_to<W: Write>(writer: W, records: &[ClipRecord]) -> Result<(), CorpusError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(writer);
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        r.validate()?;
        w.serialize(r)?;
    }
    w.flush().map_err(|source| CorpusError::Io {
        path: Default::default(),
        source,
    })
}

pub fn read_manifest_from<R: Read>(reader: R) -> Result<Vec<ClipRecord>, CorpusError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(CorpusError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut out = Vec::new();
    for row in r.deserialize::<ClipRecord>() {
        let rec = row?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    write_manifest_to(&mut buf, records)?;
    std::fs::write(path, buf).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_manifest_from(std::io::BufReader::new(file))
}
