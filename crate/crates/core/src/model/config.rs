use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::seqdata::kmer_vocab_size;

/// How the two sequence views are combined before the expert mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `γ, β` from the BPE view modulate the k-mer view.
    #[default]
    Film,
    /// `γ, β` from the k-mer view modulate the BPE view.
    Reverse,
    /// Linear projection of `[h_kmer ; h_bpe]`.
    Concat,
    /// BPE view removed; `h_kmer` is used directly.
    KmerOnly,
}

/// Network dimensions. Every parameter shape derives from this alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub seq_len: usize,
    pub kmer: usize,
    pub bpe_vocab: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ff: usize,
    pub n_experts: usize,
    pub expert_segments: usize,
    pub expert_heads: usize,
    pub expert_ff: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub fusion: Fusion,
    pub use_moe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(64)
    }
}

impl ModelConfig {
    /// Desk-scale defaults for a hidden width `d`.
    pub fn toy(d: usize) -> Self {
        let segments = 4;
        Self {
            d_model: d,
            seq_len: 41,
            kmer: 6,
            bpe_vocab: crate::seqdata::DEFAULT_BPE_VOCAB,
            encoder_layers: 2,
            encoder_heads: 4,
            encoder_ff: 2 * d,
            n_experts: 4,
            expert_segments: segments,
            expert_heads: 4,
            expert_ff: 4 * (d / segments),
            classifier_hidden: 20,
            dropout: 0.5,
            layer_norm_eps: 1e-5,
            fusion: Fusion::Film,
            use_moe: true,
        }
    }

    /// Full-width shapes: d = 768, four experts over four segments, d_ff = 256.
    pub fn full_width() -> Self {
        Self {
            encoder_layers: 12,
            encoder_heads: 12,
            encoder_ff: 3072,
            expert_ff: 256,
            ..Self::toy(768)
        }
    }

    pub fn kmer_vocab(&self) -> usize {
        kmer_vocab_size(self.kmer)
    }

    pub fn segment_width(&self) -> usize {
        self.d_model / self.expert_segments.max(1)
    }

    /// Positions available to the encoders: sequence characters plus `[CLS]`.
    pub fn max_positions(&self) -> usize {
        self.seq_len + 1
    }

    pub fn uses_bpe_view(&self) -> bool {
        self.fusion != Fusion::KmerOnly
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if d == 0 || self.seq_len == 0 {
            invalid!("d_model and seq_len must be positive");
        }
        if self.kmer == 0 || self.kmer > self.seq_len || self.kmer > 12 {
            invalid!("k-mer size {} must be in 1..=min(seq_len, 12)", self.kmer);
        }
        if self.encoder_heads == 0 || !d.is_multiple_of(self.encoder_heads) {
            invalid!("d_model {d} not divisible by {} encoder heads", self.encoder_heads);
        }
        if self.use_moe {
            if self.n_experts == 0 {
                invalid!("at least one expert is required");
            }
            if self.expert_segments == 0 || !d.is_multiple_of(self.expert_segments) {
                invalid!("d_model {d} not divisible into {} segments", self.expert_segments);
            }
            if self.expert_heads == 0 || !self.segment_width().is_multiple_of(self.expert_heads) {
                invalid!(
                    "segment width {} not divisible by {} expert heads",
                    self.segment_width(),
                    self.expert_heads
                );
            }
        }
        if self.bpe_vocab < crate::seqdata::NUM_SPECIALS + 4 {
            invalid!("bpe_vocab {} smaller than the base alphabet", self.bpe_vocab);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            invalid!("dropout {} must be in [0, 1)", self.dropout);
        }
        if self.layer_norm_eps <= 0.0 {
            invalid!("layer_norm_eps must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::full_width().validate().unwrap();
        assert_eq!(ModelConfig::full_width().segment_width(), 192);
        assert_eq!(ModelConfig::default().expert_ff, 64);
    }

    #[test]
    fn divisibility_is_enforced() {
        let mut c = ModelConfig::toy(64);
        c.expert_segments = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(64);
        c.expert_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(64);
        c.encoder_heads = 6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ModelConfig::toy(64);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.n_experts = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
