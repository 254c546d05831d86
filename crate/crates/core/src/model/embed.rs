use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{init_params, trace_with, Mode, Model, ModelTrace};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::seqdata::DnaSample;

/// Where in the network a sample representation is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// `h_kmer` of a freshly initialized network with the model's seed.
    Raw,
    /// `h_kmer` of the trained network.
    PostEncoder,
    /// `h_mod`.
    PostFilm,
    /// `h_moe`.
    PostMoe,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Raw, Stage::PostEncoder, Stage::PostFilm, Stage::PostMoe];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::PostEncoder => "post_encoder",
            Stage::PostFilm => "post_film",
            Stage::PostMoe => "post_moe",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    fn pick<T: Clone>(self, t: &ModelTrace<T>) -> Vec<T> {
        match self {
            Stage::Raw | Stage::PostEncoder => t.h_kmer.clone(),
            Stage::PostFilm => t.h_mod.clone(),
            Stage::PostMoe => t.h_moe.clone(),
        }
    }
}

/// The stage representation of every sample, in input order.
pub fn stage_embedding<T: Scalar>(model: &Model<T>, samples: &[DnaSample], stage: Stage) -> Result<Vec<Vec<T>>> {
    let fresh = match stage {
        Stage::Raw => Some(init_params::<T>(&model.config, model.seed)?),
        _ => None,
    };
    let params = fresh.as_ref().unwrap_or(&model.params);
    samples
        .par_iter()
        .map(|s| {
            let enc = model.encode(&s.sequence)?;
            Ok(stage.pick(&trace_with(&model.config, params, &enc, Mode::Eval)?))
        })
        .collect()
}

/// Writes `id<TAB>label<TAB>v1..vd` rows.
pub fn export_stage_embeddings<T: Scalar>(
    model: &Model<T>,
    samples: &[DnaSample],
    stage: Stage,
    path: &Path,
) -> Result<usize> {
    let rows = stage_embedding(model, samples, stage)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (s, row) in samples.iter().zip(&rows) {
        write!(out, "{}\t{}", s.id, s.label)?;
        for v in row {
            write!(out, "\t{}", v.as_f64())?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(rows.len())
}
