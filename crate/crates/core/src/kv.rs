//! `key = value` text with `#` comments, as used by run configs and
//! checkpoint sidecars.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key}")]
    Duplicate { line: usize, key: String },
}

/// Parses the text into ordered entries. Keys may not repeat, except that
/// keys ending in `[]` collect every occurrence.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, KvError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if !k.ends_with("[]") && seen.insert(k.to_string(), i).is_some() {
            return Err(KvError::Duplicate {
                line: i + 1,
                key: k.to_string(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn render(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
