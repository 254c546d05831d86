use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ConfidenceSets, PositionMode, View, MIN_SAMPLES};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::stats::{benjamini_hochberg, cohens_d, welch_t};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CadOptions {
    pub view: View,
    pub position_mode: PositionMode,
    /// Average repeated occurrences within a sequence into one value.
    pub per_sequence: bool,
}

impl Default for CadOptions {
    fn default() -> Self {
        Self {
            view: View::Kmer,
            position_mode: PositionMode::Surface,
            per_sequence: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadRecord {
    pub motif: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub mean_pos: f64,
    pub mean_neg: f64,
    /// Cohen's d of positive versus negative attention.
    pub cad: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub p_bh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CadReport {
    pub options: CadOptions,
    /// Ranked by `cad`, descending.
    pub records: Vec<CadRecord>,
    /// Motifs meeting the occurrence threshold but with zero pooled variance.
    pub skipped_degenerate: usize,
    /// Motifs dropped by the occurrence threshold.
    pub below_min_samples: usize,
}

pub const CAD_TSV_HEADER: &str = "motif\tn_pos\tn_neg\tmean_pos\tmean_neg\tcad\tt\tdf\tp\tp_bh";

impl CadReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{CAD_TSV_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.motif, r.n_pos, r.n_neg, r.mean_pos, r.mean_neg, r.cad, r.t, r.df, r.p, r.p_bh
            ));
        }
        out
    }
}

/// `[CLS]`-to-token attention values grouped by motif key.
fn collect<T: Scalar>(set: &[super::Scored<T>], opts: &CadOptions) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in set {
        let map = match opts.view {
            View::Kmer => s.trace.kmer_attention.as_ref(),
            View::Bpe => s.trace.bpe_attention.as_ref(),
        };
        let Some(map) = map else {
            invalid!("model has no {} attention to analyse", opts.view.name());
        };
        let row = map.cls_row();
        let tokens = opts.view.tokens(&s.encoded);
        let mut local: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for i in 0..tokens.len() {
            // Key 0 is [CLS] itself.
            local.entry(opts.position_mode.key(tokens, i)).or_default().push(row[i + 1].as_f64());
        }
        for (k, v) in local {
            let dst = out.entry(k).or_default();
            if opts.per_sequence {
                dst.push(v.iter().sum::<f64>() / v.len() as f64);
            } else {
                dst.extend(v);
            }
        }
    }
    Ok(out)
}

/// Ranks motifs by the effect size of positive-versus-negative `[CLS]` attention.
pub fn cad_analysis<T: Scalar>(sets: &ConfidenceSets<T>, opts: CadOptions) -> Result<CadReport> {
    let pos = collect(&sets.pos, &opts)?;
    let neg = collect(&sets.neg, &opts)?;
    let mut records = Vec::new();
    let (mut skipped, mut below) = (0, 0);
    let keys: std::collections::BTreeSet<&String> = pos.keys().chain(neg.keys()).collect();
    for motif in keys {
        let (a, b) = (pos.get(motif).map_or(&[][..], Vec::as_slice), neg.get(motif).map_or(&[][..], Vec::as_slice));
        if a.len() < MIN_SAMPLES || b.len() < MIN_SAMPLES {
            below += 1;
            continue;
        }
        let (Some(d), Some(w)) = (cohens_d(a, b)?, welch_t(a, b)?) else {
            skipped += 1;
            continue;
        };
        records.push(CadRecord {
            motif: motif.clone(),
            n_pos: a.len(),
            n_neg: b.len(),
            mean_pos: a.iter().sum::<f64>() / a.len() as f64,
            mean_neg: b.iter().sum::<f64>() / b.len() as f64,
            cad: d.d,
            t: w.t,
            df: w.df,
            p: w.p,
            p_bh: 0.0,
        });
    }
    let adjusted = benjamini_hochberg(&records.iter().map(|r| r.p).collect::<Vec<_>>());
    for (r, q) in records.iter_mut().zip(adjusted) {
        r.p_bh = q;
    }
    records.sort_by(|a, b| b.cad.total_cmp(&a.cad).then_with(|| a.motif.cmp(&b.motif)));
    Ok(CadReport {
        options: opts,
        records,
        skipped_degenerate: skipped,
        below_min_samples: below,
    })
}
