use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::seqdata::{tokenize_kmer, train_bpe, BpeVocab, DnaSample, TokenSeq, CLS_ID};

/// Both tokenizers a model was trained with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub k: usize,
    pub bpe: BpeVocab,
}

impl Tokenizer {
    /// Trains the BPE vocabulary on the given training sequences.
    pub fn train(samples: &[DnaSample], k: usize, bpe_vocab_size: usize) -> Result<Self> {
        let corpus: Vec<&str> = samples.iter().map(|s| s.sequence.as_str()).collect();
        Ok(Self {
            k,
            bpe: train_bpe(&corpus, bpe_vocab_size)?,
        })
    }

    pub fn encode(&self, sequence: &str) -> Result<EncodedSample> {
        Ok(EncodedSample {
            kmer: tokenize_kmer(sequence, self.k)?,
            bpe: self.bpe.tokenize(sequence),
        })
    }
}

/// One sequence tokenized for both views, without `[CLS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub kmer: TokenSeq,
    pub bpe: TokenSeq,
}

impl EncodedSample {
    pub fn kmer_ids(&self) -> Vec<usize> {
        with_cls(&self.kmer)
    }

    pub fn bpe_ids(&self) -> Vec<usize> {
        with_cls(&self.bpe)
    }
}

fn with_cls(t: &TokenSeq) -> Vec<usize> {
    std::iter::once(CLS_ID).chain(t.token_ids.iter().copied()).collect()
}
