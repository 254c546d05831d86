//! Threshold metrics at a fixed cutoff plus rank-based AUC and step-wise AUPRC.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Scores at or above this value are predicted positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub acc: f64,
    pub sn: f64,
    pub sp: f64,
    pub mcc: f64,
    /// Set when a zero factor in the MCC denominator forced `mcc = 0`.
    pub mcc_degenerate: bool,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        invalid!("{} scores but {} labels", scores.len(), labels.len());
    }
    if scores.is_empty() {
        invalid!("no scores to evaluate");
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        invalid!("non-finite score {s}");
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        invalid!("label {l} is not 0 or 1");
    }
    Ok(())
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

/// Counts with `score >= threshold` predicted positive.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_inputs(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn metrics(&self) -> ThresholdMetrics {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        let degenerate = den == 0.0;
        ThresholdMetrics {
            acc: ratio(self.tp + self.tn, self.total()),
            sn: ratio(self.tp, self.tp + self.fn_),
            sp: ratio(self.tn, self.tn + self.fp),
            mcc: if degenerate { 0.0 } else { (tp * tn - fp * fn_) / den.sqrt() },
            mcc_degenerate: degenerate,
        }
    }
}

/// Indices ordered by score descending; ties keep input order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Mann–Whitney AUC: `(concordant + 0.5 · tied) / (n_pos · n_neg)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        invalid!("AUC needs both classes ({n_pos} positive, {n_neg} negative)");
    }
    let order = descending(scores);
    // Walk tied blocks from the top; each positive beats every negative below its block.
    let mut neg_below = n_neg as f64;
    let mut twice_u = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0.0, 0.0);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1.0;
            } else {
                n += 1.0;
            }
            j += 1;
        }
        neg_below -= n;
        twice_u += p * (2.0 * neg_below + n);
        i = j;
    }
    Ok(twice_u / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Step-wise area under the precision–recall curve over a descending sweep, tied scores
/// entering as one block.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        invalid!("AUPRC needs at least one positive");
    }
    let order = descending(scores);
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let tp_before = tp;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if tp > tp_before {
            area += (tp - tp_before) as f64 * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok((area / n_pos as f64).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub sn: f64,
    pub sp: f64,
    pub mcc: f64,
    pub auc: f64,
    pub auprc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub confusion: Confusion,
    pub mcc_degenerate: bool,
}

pub const REPORT_TSV_HEADER: &str = "acc\tsn\tsp\tmcc\tauc\tauprc\tn_pos\tn_neg\ttp\ttn\tfp\tfn\tmcc_degenerate";

impl MetricReport {
    pub fn tsv_row(&self) -> String {
        let c = &self.confusion;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.acc,
            self.sn,
            self.sp,
            self.mcc,
            self.auc,
            self.auprc,
            self.n_pos,
            self.n_neg,
            c.tp,
            c.tn,
            c.fp,
            c.fn_,
            self.mcc_degenerate
        )
    }

    /// Header line plus one data row.
    pub fn to_tsv(&self) -> String {
        format!("{REPORT_TSV_HEADER}\n{}\n", self.tsv_row())
    }
}

/// Full report at the default threshold. Both classes must be present.
pub fn evaluate(scores: &[f64], labels: &[u8]) -> Result<MetricReport> {
    let c = confusion(scores, labels, DEFAULT_THRESHOLD)?;
    let t = c.metrics();
    let (n_pos, n_neg) = class_counts(labels);
    Ok(MetricReport {
        acc: t.acc,
        sn: t.sn,
        sp: t.sp,
        mcc: t.mcc,
        auc: auc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        n_pos,
        n_neg,
        confusion: c,
        mcc_degenerate: t.mcc_degenerate,
    })
}
