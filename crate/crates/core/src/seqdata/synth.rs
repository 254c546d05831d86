use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{first_invalid, Dataset, DnaSample, BASES};
use crate::error::{invalid, Result};

/// Parameters of a planted-motif dataset: positives carry `core_motif` at `core_pos` and
/// `tract` at `tract_pos` over a uniform background; negatives are uniform with those two
/// windows scrubbed of exact matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub name: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub length: usize,
    pub core_motif: String,
    pub core_pos: usize,
    pub tract: String,
    pub tract_pos: usize,
    /// Fraction of each class routed to the test split.
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "planted".into(),
            n_pos: 1000,
            n_neg: 1000,
            length: 41,
            core_motif: "GAGG".into(),
            core_pos: 18,
            tract: "AAAA".into(),
            tract_pos: 8,
            test_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn core_window(&self) -> std::ops::Range<usize> {
        self.core_pos..self.core_pos + self.core_motif.len()
    }

    pub fn tract_window(&self) -> std::ops::Range<usize> {
        self.tract_pos..self.tract_pos + self.tract.len()
    }

    fn validate(&self) -> Result<()> {
        for (what, motif) in [("core motif", &self.core_motif), ("tract", &self.tract)] {
            if motif.is_empty() {
                invalid!("{what} is empty");
            }
            if let Some((i, c)) = first_invalid(motif) {
                invalid!("{what} has {c:?} at {i}");
            }
        }
        let (a, b) = (self.core_window(), self.tract_window());
        if a.end > self.length || b.end > self.length {
            invalid!("planted windows {a:?} and {b:?} must fit in length {}", self.length);
        }
        if a.start < b.end && b.start < a.end {
            invalid!("planted windows {a:?} and {b:?} overlap");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            invalid!("test_fraction {} must be in [0, 1)", self.test_fraction);
        }
        Ok(())
    }
}

fn random_bases(rng: &mut ChaCha8Rng, out: &mut [u8]) {
    for b in out {
        *b = BASES[rng.gen_range(0..4)] as u8;
    }
}

/// Deterministic for a fixed `(spec, seed)`.
pub fn synth_planted_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (core, tract) = (spec.core_motif.as_bytes(), spec.tract.as_bytes());
    let (cw, tw) = (spec.core_window(), spec.tract_window());
    let mut make = |label: u8, i: usize| {
        let mut seq = vec![0u8; spec.length];
        random_bases(&mut rng, &mut seq);
        if label == 1 {
            seq[cw.clone()].copy_from_slice(core);
            seq[tw.clone()].copy_from_slice(tract);
        } else {
            while &seq[cw.clone()] == core {
                random_bases(&mut rng, &mut seq[cw.clone()]);
            }
            while &seq[tw.clone()] == tract {
                random_bases(&mut rng, &mut seq[tw.clone()]);
            }
        }
        let kind = if label == 1 { "pos" } else { "neg" };
        DnaSample::new(
            format!("{}_{kind}_{i:05}", spec.name),
            String::from_utf8(seq).expect("ACGT is ASCII"),
            label,
        )
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, n) in [(1u8, spec.n_pos), (0u8, spec.n_neg)] {
        let n_test = (n as f64 * spec.test_fraction).round() as usize;
        for i in 0..n {
            let s = make(label, i);
            if i < n - n_test {
                train.push(s);
            } else {
                test.push(s);
            }
        }
    }
    Dataset::new(spec.name.clone(), train, test)
}
