//! The dual-view classifier: configuration, parameters, graph construction, traces,
//! checkpoints and stage-wise embedding export.

mod checkpoint;
mod config;
mod embed;
mod network;
mod params;
mod tokenizer;

pub use checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use config::{Fusion, ModelConfig};
pub use embed::{export_stage_embeddings, stage_embedding, Stage};
pub use network::{
    classify, encode_bpe_view, encode_kmer_view, encoder_view, film_modulate, forward, fuse, moe_forward,
    transformer_layer, EmbeddingOverrides, FilmNodes, ForwardNodes, Mode, MoeNodes, ViewNodes,
};
pub use params::{check_params, init_params, param_count, Overlay, ParamSource};
pub use tokenizer::{EncodedSample, Tokenizer};

use rayon::prelude::*;

use crate::autodiff::{Graph, NodeId, ParamMap};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::seqdata::DnaSample;

/// Final-layer attention of one view: probabilities `[heads, rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<T>,
}

impl<T: Scalar> AttentionMap<T> {
    fn read(g: &Graph<'_, T>, node: NodeId) -> Option<Self> {
        let (heads, rows, cols, p) = g.attention_probs(node)?;
        Some(Self {
            heads,
            rows,
            cols,
            probs: p.to_vec(),
        })
    }

    /// Head-averaged attention of query row `q` over all keys.
    pub fn row_mean(&self, q: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for h in 0..self.heads {
            let base = (h * self.rows + q) * self.cols;
            for (o, &p) in out.iter_mut().zip(&self.probs[base..base + self.cols]) {
                *o += p;
            }
        }
        let n = T::of(self.heads as f64);
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// `[CLS]` query row, head-averaged.
    pub fn cls_row(&self) -> Vec<T> {
        self.row_mean(0)
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrace<T> {
    pub h_kmer: Vec<T>,
    pub h_bpe: Option<Vec<T>>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
    pub h_mod: Vec<T>,
    pub gate_weights: Option<Vec<T>>,
    pub expert_outputs: Vec<Vec<T>>,
    pub h_moe: Vec<T>,
    pub logits: [T; 2],
    pub probs: [T; 2],
    pub kmer_attention: Option<AttentionMap<T>>,
    pub bpe_attention: Option<AttentionMap<T>>,
}

impl<T: Scalar> ModelTrace<T> {
    pub fn prediction(&self) -> u8 {
        u8::from(self.probs[1] > self.probs[0])
    }

    pub fn confidence(&self) -> T {
        self.probs[0].max(self.probs[1])
    }

    pub fn p_positive(&self) -> T {
        self.probs[1]
    }
}

/// Numerically stable two-class softmax.
pub fn softmax2<T: Scalar>(z: [T; 2]) -> [T; 2] {
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

/// Runs the network on one encoded sample and collects the trace.
pub fn trace_with<T: Scalar, P: ParamSource<T>>(
    config: &ModelConfig,
    params: &P,
    sample: &EncodedSample,
    mode: Mode,
) -> Result<ModelTrace<T>> {
    let mut g = Graph::new();
    g.set_params_require_grad(false);
    let n = forward(&mut g, params, config, sample, mode, EmbeddingOverrides::default())?;
    let v = |id: NodeId| g.value(id).data().to_vec();
    let z = g.value(n.logits).data();
    let logits = [z[0], z[1]];
    Ok(ModelTrace {
        h_kmer: v(n.h_kmer),
        h_bpe: n.h_bpe.map(v),
        gamma: n.film.map(|f| v(f.gamma)),
        beta: n.film.map(|f| v(f.beta)),
        h_mod: v(n.h_mod),
        gate_weights: n.moe.as_ref().map(|m| v(m.gate)),
        expert_outputs: n.moe.as_ref().map_or_else(Vec::new, |m| m.experts.iter().map(|&e| v(e)).collect()),
        h_moe: v(n.h_moe),
        logits,
        probs: softmax2(logits),
        kmer_attention: n.kmer.final_attention.and_then(|a| AttentionMap::read(&g, a)),
        bpe_attention: n.bpe.and_then(|b| b.final_attention).and_then(|a| AttentionMap::read(&g, a)),
    })
}

/// A configured network with its tokenizers and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamMap<T>,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Self::from_parts(config, tokenizer, params, seed)
    }

    pub fn from_parts(config: ModelConfig, tokenizer: Tokenizer, params: ParamMap<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if tokenizer.k != config.kmer {
            invalid!("tokenizer k = {} but config k = {}", tokenizer.k, config.kmer);
        }
        if tokenizer.bpe.len() > config.bpe_vocab {
            invalid!("BPE vocabulary of {} exceeds configured {}", tokenizer.bpe.len(), config.bpe_vocab);
        }
        check_params(&config, &params)?;
        Ok(Self {
            config,
            tokenizer,
            params,
            seed,
        })
    }

    pub fn encode(&self, sequence: &str) -> Result<EncodedSample> {
        if sequence.len() != self.config.seq_len {
            invalid!("sequence length {} differs from model length {}", sequence.len(), self.config.seq_len);
        }
        self.tokenizer.encode(sequence)
    }

    /// Eval-mode trace of one sequence.
    pub fn trace(&self, sequence: &str) -> Result<ModelTrace<T>> {
        trace_with(&self.config, &self.params, &self.encode(sequence)?, Mode::Eval)
    }

    /// Eval-mode traces in input order, computed in parallel.
    pub fn trace_all(&self, samples: &[DnaSample]) -> Result<Vec<ModelTrace<T>>> {
        samples.par_iter().map(|s| self.trace(&s.sequence)).collect()
    }

    /// `P(positive)` for each sample, in input order.
    pub fn predict_proba(&self, samples: &[DnaSample]) -> Result<Vec<f64>> {
        samples
            .par_iter()
            .map(|s| self.trace(&s.sequence).map(|t| t.p_positive().as_f64()))
            .collect()
    }
}
