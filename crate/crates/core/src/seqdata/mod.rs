//! DNA sample ingestion, tokenization and synthetic planted-motif datasets.

mod bpe;
mod dataset;
mod kmer;
mod synth;

pub use bpe::{train_bpe, BpeVocab, DEFAULT_BPE_VOCAB};
pub use dataset::{
    parse_samples, write_fasta, write_tsv, Dataset, DnaSample, Format, LoadReport, Rejection,
};
pub use kmer::{kmer_id, kmer_vocab_size, tokenize_kmer};
pub use synth::{synth_planted_dataset, SynthSpec};

/// Padding token id shared by both vocabularies.
pub const PAD_ID: usize = 0;
/// Classification token id shared by both vocabularies.
pub const CLS_ID: usize = 1;
/// Unknown-symbol token id shared by both vocabularies.
pub const UNK_ID: usize = 2;
/// Number of special tokens that precede the regular vocabulary.
pub const NUM_SPECIALS: usize = 3;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[CLS]", "[UNK]"];
pub const BASES: [char; 4] = ['A', 'C', 'G', 'T'];

/// Tokenization scheme that produced a [`TokenSeq`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scheme {
    Kmer(usize),
    Bpe,
}

/// Token ids with their surface strings and the character offset each token starts at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub token_ids: Vec<usize>,
    pub token_strings: Vec<String>,
    pub offsets: Vec<usize>,
    pub scheme: Scheme,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Half-open character span covered by token `i`.
    pub fn span(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.token_strings[i].len()
    }
}

pub(crate) fn is_base(c: u8) -> bool {
    matches!(c, b'A' | b'C' | b'G' | b'T')
}

/// Returns the first non-ACGT character, if any.
pub(crate) fn first_invalid(seq: &str) -> Option<(usize, char)> {
    seq.bytes()
        .enumerate()
        .find(|(_, c)| !is_base(*c))
        .map(|(i, c)| (i, c as char))
}
