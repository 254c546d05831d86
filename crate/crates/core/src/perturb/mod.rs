//! In-silico mutagenesis with class-preserving rewrite rules, and cross-dataset transfer.

mod mutagenesis;
mod transfer;

pub use mutagenesis::{mutagenesis_eval, Condition, MutagenesisReport, MUTAGENESIS_TSV_HEADER};
pub use transfer::{normalize_rows, transfer_matrix, TransferMatrix, TransferMetric};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seqdata::is_base;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    PositivesOnly,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    AllOccurrences,
    FirstOnly,
}

/// Same-length substitution of `pattern` by `replacement`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationRule {
    pub pattern: String,
    pub replacement: String,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub mode: MatchMode,
}

impl MutationRule {
    pub fn new(pattern: &str, replacement: &str) -> Result<Self> {
        let rule = Self {
            pattern: pattern.to_string(),
            replacement: replacement.to_string(),
            scope: Scope::default(),
            mode: MatchMode::default(),
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pattern.is_empty() || self.pattern.len() != self.replacement.len() {
            invalid!("rule {} -> {}: lengths must match and be non-zero", self.pattern, self.replacement);
        }
        if !self.pattern.bytes().chain(self.replacement.bytes()).all(is_base) {
            invalid!("rule {} -> {}: only A, C, G, T allowed", self.pattern, self.replacement);
        }
        Ok(())
    }

    pub fn applies_to(&self, label: u8) -> bool {
        self.scope == Scope::All || label == 1
    }

    /// Left-to-right, non-overlapping rewrite. Returns the edit count.
    fn rewrite(&self, seq: &mut [u8]) -> usize {
        let (p, r) = (self.pattern.as_bytes(), self.replacement.as_bytes());
        let mut edits = 0;
        let mut i = 0;
        while i + p.len() <= seq.len() {
            if &seq[i..i + p.len()] == p {
                seq[i..i + p.len()].copy_from_slice(r);
                edits += 1;
                if self.mode == MatchMode::FirstOnly {
                    break;
                }
                i += p.len();
            } else {
                i += 1;
            }
        }
        edits
    }
}

/// A named list of rules applied together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub name: String,
    pub rules: Vec<MutationRule>,
}

/// The core-motif knockout `GAGG -> CTCC`.
pub fn core_rule() -> MutationRule {
    MutationRule::new("GAGG", "CTCC").expect("valid rule")
}

/// The A-tract knockout `AAAA -> TATA`.
pub fn tract_rule() -> MutationRule {
    MutationRule::new("AAAA", "TATA").expect("valid rule")
}

/// Single-rule sets for the core motif and the A-tract.
pub fn default_rule_sets() -> Vec<RuleSet> {
    vec![
        RuleSet {
            name: "mut_core".into(),
            rules: vec![core_rule()],
        },
        RuleSet {
            name: "mut_tract".into(),
            rules: vec![tract_rule()],
        },
    ]
}

/// Applies `rules` in order, ignoring scope. Returns the mutated sequence and total edits.
pub fn apply_rules(sequence: &str, rules: &[MutationRule]) -> Result<(String, usize)> {
    let mut seq = sequence.as_bytes().to_vec();
    let mut edits = 0;
    for rule in rules {
        rule.validate()?;
        edits += rule.rewrite(&mut seq);
    }
    Ok((String::from_utf8(seq).expect("bases are ASCII"), edits))
}

/// Parses a JSON list of rules.
pub fn parse_rules(json: &str) -> Result<Vec<MutationRule>> {
    let rules: Vec<MutationRule> = serde_json::from_str(json)?;
    rules.iter().try_for_each(MutationRule::validate)?;
    Ok(rules)
}
