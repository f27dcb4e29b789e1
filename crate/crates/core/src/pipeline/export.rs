//! Embedding export for external plotting (t-SNE, UMAP, ...).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{KsodError, Result};
use crate::verifier::EmbeddingSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Tsv,
    Jsonl,
}

impl FromStr for ExportFormat {
    type Err = KsodError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(ExportFormat::Tsv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(KsodError::Config(format!("unknown export format `{other}`"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    vector: Vec<f64>,
    label: String,
}

/// tsv: one row per point, coordinates at 17 significant digits, class
/// name last. jsonl: `{"vector": [...], "label": name}` per line.
pub fn render_embeddings(set: &EmbeddingSet, format: ExportFormat) -> Result<String> {
    if set.is_empty() {
        return Err(KsodError::Input("nothing to export".into()));
    }
    let mut out = String::new();
    for (v, &l) in set.vectors.iter().zip(&set.labels) {
        let label = &set.class_names[l];
        match format {
            ExportFormat::Tsv => {
                if label.contains(['\t', '\n', '\r']) {
                    return Err(KsodError::Input(format!("class name {label:?} cannot go in tsv")));
                }
                for x in v {
                    write!(out, "{x:.16e}\t").unwrap();
                }
                out.push_str(label);
            }
            ExportFormat::Jsonl => out.push_str(&serde_json::to_string(&Row {
                vector: v.clone(),
                label: label.clone(),
            })?),
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(set: &EmbeddingSet, path: &Path, format: ExportFormat) -> Result<()> {
    let text = render_embeddings(set, format)?;
    fs::write(path, text).map_err(|e| KsodError::io(path, e))
}

/// Reads an export back. Class ids follow first appearance.
pub fn parse_embeddings(content: &str, format: ExportFormat) -> Result<EmbeddingSet> {
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| KsodError::Parse {
            line: i + 1,
            message,
        };
        let (vector, label) = match format {
            ExportFormat::Jsonl => {
                let row: Row = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
                (row.vector, row.label)
            }
            ExportFormat::Tsv => {
                let (coords, label) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| parse_err("expected tab-separated columns".into()))?;
                let vector = coords
                    .split('\t')
                    .map(|c| c.parse::<f64>().map_err(|e| parse_err(format!("`{c}`: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                (vector, label.to_string())
            }
        };
        let id = match class_names.iter().position(|c| *c == label) {
            Some(id) => id,
            None => {
                class_names.push(label);
                class_names.len() - 1
            }
        };
        vectors.push(vector);
        labels.push(id);
    }
    EmbeddingSet::new(vectors, labels, class_names)
}

pub fn load_embeddings(path: &Path, format: ExportFormat) -> Result<EmbeddingSet> {
    let content = fs::read_to_string(path).map_err(|e| KsodError::io(path, e))?;
    parse_embeddings(&content, format)
}
