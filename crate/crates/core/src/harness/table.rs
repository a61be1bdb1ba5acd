use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::train::REPORT_FILE;
use super::HarnessError;
use crate::model::ModelKind;

/// Accuracies equal after rounding to this many decimals count as tied.
pub const TIE_DECIMALS: i32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    /// Mean headline accuracy over the runs of this kind and dataset.
    pub accuracy: f64,
    pub runs: usize,
    /// Trainable parameters of the model.
    pub params: usize,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub kind: ModelKind,
    /// One entry per dataset column.
    pub cells: Vec<Option<TableCell>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub datasets: Vec<String>,
    pub rows: Vec<TableRow>,
    /// Columns whose best accuracy is shared by more than one row.
    pub ties: Vec<String>,
}

/// Every `report.json` below `dir`, in path order.
pub fn collect_reports(dir: &Path) -> Result<Vec<MetricsReport>, HarnessError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
        let io = |source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        };
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if path.file_name().is_some_and(|n| n == REPORT_FILE) {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    if paths.is_empty() {
        return Err(HarnessError::NoReports(dir.to_path_buf()));
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|source| HarnessError::Io {
                path: p.clone(),
                source,
            })?;
            Ok(MetricsReport::from_json(&text)?)
        })
        .collect()
}

fn rounded(x: f64) -> i64 {
    (x * 10f64.powi(TIE_DECIMALS)).round() as i64
}

/// Rows are model kinds, columns datasets. Each column's best accuracy is
/// flagged; rows equal to it at [`TIE_DECIMALS`] decimals are flagged too.
pub fn build_table(reports: &[MetricsReport]) -> Result<ReportTable, HarnessError> {
    let mut groups: BTreeMap<(ModelKind, &str), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        if r.headline_accuracy().is_some() {
            groups.entry((r.kind, r.dataset.as_str())).or_default().push(r);
        }
    }
    if groups.is_empty() {
        return Err(HarnessError::Config("no evaluated runs to tabulate".into()));
    }
    let datasets: Vec<String> = groups
        .keys()
        .map(|(_, d)| d.to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rows: Vec<TableRow> = ModelKind::ALL
        .iter()
        .filter(|k| groups.keys().any(|(gk, _)| gk == *k))
        .map(|&kind| TableRow {
            kind,
            cells: datasets
                .iter()
                .map(|d| {
                    groups.get(&(kind, d.as_str())).map(|runs| TableCell {
                        accuracy: runs.iter().filter_map(|r| r.headline_accuracy()).sum::<f64>()
                            / runs.len() as f64,
                        runs: runs.len(),
                        params: runs[0].params.total,
                        best: false,
                    })
                })
                .collect(),
        })
        .collect();
    let mut ties = Vec::new();
    for (j, d) in datasets.iter().enumerate() {
        let Some(top) = rows
            .iter()
            .filter_map(|r| r.cells[j].as_ref().map(|c| rounded(c.accuracy)))
            .max()
        else {
            continue;
        };
        let mut flagged = 0;
        for row in &mut rows {
            if let Some(c) = &mut row.cells[j] {
                if rounded(c.accuracy) == top {
                    c.best = true;
                    flagged += 1;
                }
            }
        }
        if flagged > 1 {
            ties.push(d.clone());
        }
    }
    Ok(ReportTable { datasets, rows, ties })
}

pub fn parse_table(json: &str) -> Result<ReportTable, serde_json::Error> {
    serde_json::from_str(json)
}

impl ReportTable {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("table serializes");
        s.push('\n');
        s
    }

    /// Accuracies in percent with two decimals; `*` marks the best of a
    /// column.
    pub fn to_text(&self) -> String {
        let mut header = vec!["model".to_string()];
        header.extend(self.datasets.iter().cloned());
        header.push("params".to_string());
        let mut lines = vec![header];
        for row in &self.rows {
            let mut line = vec![row.kind.to_string()];
            for c in &row.cells {
                line.push(match c {
                    Some(c) => format!("{:.2}{}", 100.0 * c.accuracy, if c.best { " *" } else { "" }),
                    None => "-".to_string(),
                });
            }
            let params: BTreeSet<usize> = row.cells.iter().flatten().map(|c| c.params).collect();
            line.push(params.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("/"));
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|j| lines.iter().map(|l| l[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&rule.join("  "));
                out.push('\n');
            }
        }
        out.push_str("* best accuracy in the column\n");
        if !self.ties.is_empty() {
            out.push_str(&format!("tied best in: {}\n", self.ties.join(", ")));
        }
        out
    }
}
