//! Contrastive signal purification: attention effect sizes per motif (CAD) and effect-size
//! weighted integrated-gradient token contributions (CWGA), plus FASTA export of top windows.

mod cad;
mod cwga;
mod fasta;

pub use cad::{cad_analysis, CadOptions, CadRecord, CadReport, CAD_TSV_HEADER};
pub use cwga::{
    cwga, cwga_dim_select, token_attributions, Baseline, CwgaOptions, CwgaRecord, CwgaReport, DimSelection, Route,
    CWGA_TSV_HEADER,
    SampleContribution, TokenAttribution,
};
pub use fasta::{export_motif_fasta, motif_windows, MotifWindow};

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncodedSample, Model, ModelTrace};
use crate::scalar::Scalar;
use crate::seqdata::{DnaSample, TokenSeq};

/// Minimum occurrences per class for a motif (and samples per class for a set).
pub const MIN_SAMPLES: usize = 3;
pub const DEFAULT_CONFIDENCE: f64 = 0.9;
/// Samples per class analysed by CWGA.
pub const DEFAULT_CWGA_SAMPLES: usize = 100;
pub const DEFAULT_TOP_DIMS: usize = 40;
pub const DEFAULT_IG_STEPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Kmer,
    Bpe,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Kmer => "kmer",
            View::Bpe => "bpe",
        }
    }

    pub fn tokens(self, e: &EncodedSample) -> &TokenSeq {
        match self {
            View::Kmer => &e.kmer,
            View::Bpe => &e.bpe,
        }
    }
}

/// How token scores are grouped across sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// By token surface string, wherever it occurs.
    #[default]
    Surface,
    /// By surface string and start offset (`TOKEN@offset`).
    Positional,
}

impl PositionMode {
    pub fn name(self) -> &'static str {
        match self {
            PositionMode::Surface => "surface",
            PositionMode::Positional => "positional",
        }
    }

    pub(crate) fn key(self, tokens: &TokenSeq, i: usize) -> String {
        match self {
            PositionMode::Surface => tokens.token_strings[i].clone(),
            PositionMode::Positional => format!("{}@{}", tokens.token_strings[i], tokens.offsets[i]),
        }
    }
}

/// A correctly classified sample with its eval-mode trace.
#[derive(Debug, Clone)]
pub struct Scored<T: Scalar> {
    pub sample: DnaSample,
    pub encoded: EncodedSample,
    pub trace: ModelTrace<T>,
}

impl<T: Scalar> Scored<T> {
    pub fn confidence(&self) -> f64 {
        self.trace.confidence().as_f64()
    }
}

#[derive(Debug, Clone)]
pub struct ConfidenceSets<T: Scalar> {
    pub pos: Vec<Scored<T>>,
    pub neg: Vec<Scored<T>>,
    pub threshold: f64,
    pub cap: Option<usize>,
}

impl<T: Scalar> ConfidenceSets<T> {
    /// The same sets with the class roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            pos: self.neg.clone(),
            neg: self.pos.clone(),
            threshold: self.threshold,
            cap: self.cap,
        }
    }
}

/// Correctly classified samples whose top softmax probability exceeds `threshold`, split by
/// class. With a cap, each class keeps its `cap` most confident members.
pub fn select_high_confidence<T: Scalar>(
    model: &Model<T>,
    samples: &[DnaSample],
    threshold: f64,
    cap: Option<usize>,
) -> Result<ConfidenceSets<T>> {
    let scored: Vec<Scored<T>> = samples
        .par_iter()
        .map(|s| {
            let encoded = model.encode(&s.sequence)?;
            let trace = crate::model::trace_with(&model.config, &model.params, &encoded, crate::model::Mode::Eval)?;
            Ok(Scored {
                sample: s.clone(),
                encoded,
                trace,
            })
        })
        .collect::<Result<_>>()?;
    partition(scored, threshold, cap)
}

pub(crate) fn partition<T: Scalar>(scored: Vec<Scored<T>>, threshold: f64, cap: Option<usize>) -> Result<ConfidenceSets<T>> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for s in scored {
        if s.trace.prediction() == s.sample.label && s.confidence() > threshold {
            if s.sample.label == 1 { pos.push(s) } else { neg.push(s) }
        }
    }
    if let Some(cap) = cap {
        for set in [&mut pos, &mut neg] {
            set.sort_by(|a, b| {
                b.confidence()
                    .partial_cmp(&a.confidence())
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| a.sample.id.cmp(&b.sample.id))
            });
            set.truncate(cap);
        }
    }
    if pos.len() < MIN_SAMPLES || neg.len() < MIN_SAMPLES {
        return Err(Error::Insufficient(format!(
            "{} positive and {} negative samples above confidence {threshold}; need {MIN_SAMPLES} of each",
            pos.len(),
            neg.len()
        )));
    }
    Ok(ConfidenceSets {
        pos,
        neg,
        threshold,
        cap,
    })
}
