use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Scheme, TokenSeq, BASES, NUM_SPECIALS, SPECIAL_TOKENS, UNK_ID};
use crate::error::{invalid, Result};

pub const DEFAULT_BPE_VOCAB: usize = 512;

/// Byte-pair vocabulary over the DNA alphabet. Ids: specials, then `A C G T`, then one id per
/// newly created merge string in training order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
    // (left id, right id, merged id), parallel to `merges`
    merge_ids: Vec<(usize, usize, usize)>,
}

impl BpeVocab {
    /// Vocabulary with only the specials and the four bases.
    pub fn base() -> Self {
        let mut v = BpeVocab {
            merges: Vec::new(),
            tokens: Vec::new(),
            token_to_id: HashMap::new(),
            merge_ids: Vec::new(),
        };
        for s in SPECIAL_TOKENS {
            v.intern(s.to_string());
        }
        for b in BASES {
            v.intern(b.to_string());
        }
        v
    }

    /// Rebuilds a vocabulary by replaying merges in order.
    pub fn from_merges(merges: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut v = Self::base();
        for (l, r) in merges {
            v.push_merge(l, r)?;
        }
        Ok(v)
    }

    fn intern(&mut self, s: String) -> usize {
        if let Some(&id) = self.token_to_id.get(&s) {
            return id;
        }
        let id = self.tokens.len();
        self.token_to_id.insert(s.clone(), id);
        self.tokens.push(s);
        id
    }

    fn push_merge(&mut self, l: String, r: String) -> Result<()> {
        let (Some(&li), Some(&ri)) = (self.token_to_id.get(&l), self.token_to_id.get(&r)) else {
            invalid!("merge ({l:?}, {r:?}) references unknown symbols");
        };
        if li < NUM_SPECIALS || ri < NUM_SPECIALS {
            invalid!("merge ({l:?}, {r:?}) involves a special token");
        }
        let merged = self.intern(format!("{l}{r}"));
        self.merge_ids.push((li, ri, merged));
        self.merges.push((l, r));
        Ok(())
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Applies the merges in training order. Symbols outside the vocabulary become `[UNK]`.
    pub fn tokenize(&self, sequence: &str) -> TokenSeq {
        let mut ids: Vec<usize> = Vec::with_capacity(sequence.len());
        let mut offsets: Vec<usize> = Vec::with_capacity(sequence.len());
        let mut widths: Vec<usize> = Vec::with_capacity(sequence.len());
        for (i, c) in sequence.char_indices() {
            let mut buf = [0u8; 4];
            ids.push(self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK_ID));
            offsets.push(i);
            widths.push(c.len_utf8());
        }
        for &(l, r, m) in &self.merge_ids {
            let mut w = 0;
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    ids[w] = m;
                    offsets[w] = offsets[i];
                    widths[w] = widths[i] + widths[i + 1];
                    i += 2;
                } else {
                    ids[w] = ids[i];
                    offsets[w] = offsets[i];
                    widths[w] = widths[i];
                    i += 1;
                }
                w += 1;
            }
            ids.truncate(w);
            offsets.truncate(w);
            widths.truncate(w);
        }
        let token_strings = offsets
            .iter()
            .zip(&widths)
            .map(|(&o, &w)| sequence[o..o + w].to_string())
            .collect();
        TokenSeq {
            token_ids: ids,
            token_strings,
            offsets,
            scheme: Scheme::Bpe,
        }
    }
}

/// Greedy most-frequent-pair BPE. Stops when `vocab_size` distinct tokens exist or no
/// adjacent pair occurs at least twice. Count ties go to the lexicographically smallest
/// `(left, right)` pair.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<BpeVocab> {
    if corpus.is_empty() {
        invalid!("BPE corpus is empty");
    }
    let mut vocab = BpeVocab::base();
    if vocab_size < vocab.len() {
        invalid!("vocab_size {vocab_size} is below the {} base symbols", vocab.len());
    }
    let mut words: BTreeMap<&str, usize> = BTreeMap::new();
    for s in corpus {
        *words.entry(s.as_ref()).or_default() += 1;
    }
    let mut words: Vec<(Vec<usize>, usize)> = words
        .into_iter()
        .map(|(w, n)| {
            let syms = w
                .chars()
                .map(|c| {
                    let mut buf = [0u8; 4];
                    vocab.id(c.encode_utf8(&mut buf)).unwrap_or(UNK_ID)
                })
                .collect();
            (syms, n)
        })
        .collect();

    while vocab.len() < vocab_size {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for (syms, n) in &words {
            for pair in syms.windows(2) {
                if pair[0] >= NUM_SPECIALS && pair[1] >= NUM_SPECIALS {
                    *counts.entry((pair[0], pair[1])).or_default() += n;
                }
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&vocab.tokens[pa.0], &vocab.tokens[pa.1]);
                let kb = (&vocab.tokens[pb.0], &vocab.tokens[pb.1]);
                kb.cmp(&ka)
            })
        });
        let Some(((l, r), count)) = best else { break };
        if count < 2 {
            break;
        }
        let (ls, rs) = (vocab.tokens[l].clone(), vocab.tokens[r].clone());
        vocab.push_merge(ls, rs)?;
        let merged = vocab.merge_ids.last().unwrap().2;
        for (syms, _) in &mut words {
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    Ok(vocab)
}

#[derive(Serialize, Deserialize)]
struct BpeVocabRepr {
    merges: Vec<[String; 2]>,
    specials: Vec<String>,
}

impl Serialize for BpeVocab {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        BpeVocabRepr {
            merges: self.merges.iter().map(|(l, r)| [l.clone(), r.clone()]).collect(),
            specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BpeVocab {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = BpeVocabRepr::deserialize(deserializer)?;
        if repr.specials != SPECIAL_TOKENS {
            return Err(serde::de::Error::custom(format!(
                "unsupported special tokens {:?}",
                repr.specials
            )));
        }
        BpeVocab::from_merges(repr.merges.into_iter().map(|[l, r]| (l, r)))
            .map_err(serde::de::Error::custom)
    }
}
