use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::evaluate;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::seqdata::DnaSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMetric {
    #[default]
    Acc,
    Auc,
}

impl TransferMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "acc" => Ok(Self::Acc),
            "auc" => Ok(Self::Auc),
            _ => invalid!("unknown metric {s}; expected acc or auc"),
        }
    }
}

/// Model `i` evaluated on dataset `j`, with each row divided by its diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub metric: TransferMetric,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub raw: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
    /// Rows left unnormalized because their diagonal is zero.
    pub unnormalized_rows: Vec<usize>,
}

impl TransferMatrix {
    fn grid_tsv(&self, grid: &[Vec<f64>]) -> String {
        let mut out = format!("source\t{}\n", self.targets.join("\t"));
        for (name, row) in self.sources.iter().zip(grid) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            out.push_str(&format!("{name}\t{}\n", cells.join("\t")));
        }
        out
    }

    pub fn raw_tsv(&self) -> String {
        self.grid_tsv(&self.raw)
    }

    pub fn normalized_tsv(&self) -> String {
        self.grid_tsv(&self.normalized)
    }
}

/// Divides each row by its diagonal entry. Rows with a zero diagonal are returned unchanged
/// and listed.
pub fn normalize_rows(raw: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut skipped = Vec::new();
    let grid = raw
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let diag = row[i];
            if diag == 0.0 {
                skipped.push(i);
                row.clone()
            } else {
                row.iter().map(|v| v / diag).collect()
            }
        })
        .collect();
    (grid, skipped)
}

/// Each model scores each dataset with its own tokenizer. Model `i` is assumed to belong to
/// dataset `i`.
pub fn transfer_matrix<T: Scalar>(
    models: &[(String, &Model<T>)],
    datasets: &[(String, &[DnaSample])],
    metric: TransferMetric,
) -> Result<TransferMatrix> {
    if models.is_empty() || models.len() != datasets.len() {
        invalid!("{} models for {} datasets; need one model per dataset", models.len(), datasets.len());
    }
    let mut raw = Vec::with_capacity(models.len());
    for (_, model) in models {
        let mut row = Vec::with_capacity(datasets.len());
        for (_, samples) in datasets {
            let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
            let r = evaluate(&model.predict_proba(samples)?, &labels)?;
            row.push(match metric {
                TransferMetric::Acc => r.acc,
                TransferMetric::Auc => r.auc,
            });
        }
        raw.push(row);
    }
    let (normalized, unnormalized_rows) = normalize_rows(&raw);
    Ok(TransferMatrix {
        metric,
        sources: models.iter().map(|(n, _)| n.clone()).collect(),
        targets: datasets.iter().map(|(n, _)| n.clone()).collect(),
        raw,
        normalized,
        unnormalized_rows,
    })
}
