use super::{first_invalid, Scheme, TokenSeq, NUM_SPECIALS};
use crate::error::{invalid, Result};

/// Number of ids in the k-mer vocabulary, specials included.
pub fn kmer_vocab_size(k: usize) -> usize {
    NUM_SPECIALS + 4usize.pow(k as u32)
}

/// Base-4 index of a k-mer shifted past the special tokens.
pub fn kmer_id(kmer: &[u8]) -> usize {
    let index = kmer.iter().fold(0usize, |acc, &c| {
        acc * 4
            + match c {
                b'A' => 0,
                b'C' => 1,
                b'G' => 2,
                _ => 3,
            }
    });
    NUM_SPECIALS + index
}

/// Overlapping stride-1 k-mers. The `[CLS]` token is added by the model, not here.
pub fn tokenize_kmer(sequence: &str, k: usize) -> Result<TokenSeq> {
    if k == 0 || k > sequence.len() {
        invalid!("k-mer size {k} must be in 1..={}", sequence.len());
    }
    if k > 12 {
        invalid!("k-mer size {k} exceeds the supported maximum of 12");
    }
    if let Some((i, c)) = first_invalid(sequence) {
        invalid!("character {c:?} at position {i} is not A/C/G/T");
    }
    let bytes = sequence.as_bytes();
    let n = bytes.len() - k + 1;
    let mut seq = TokenSeq {
        token_ids: Vec::with_capacity(n),
        token_strings: Vec::with_capacity(n),
        offsets: Vec::with_capacity(n),
        scheme: Scheme::Kmer(k),
    };
    for (i, window) in bytes.windows(k).enumerate() {
        seq.token_ids.push(kmer_id(window));
        seq.token_strings.push(sequence[i..i + k].to_string());
        seq.offsets.push(i);
    }
    Ok(seq)
}
