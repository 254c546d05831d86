use serde::{Deserialize, Serialize};

use super::{MutationRule, RuleSet, Scope};
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::seqdata::DnaSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub rules: Vec<MutationRule>,
    pub report: MetricReport,
    /// Edits per sample, in input order.
    pub edits: Vec<usize>,
    /// Samples with at least one edit.
    pub n_mutated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutagenesisReport {
    /// `wt`, each rule set, then `combined`.
    pub conditions: Vec<Condition>,
    /// Whether specificity was required to be identical across conditions.
    pub sp_checked: bool,
}

pub const MUTAGENESIS_TSV_HEADER: &str = "condition\tn_mutated\tacc\tsn\tsp\tmcc\tauc\tauprc\tn_pos\tn_neg\ttp\ttn\tfp\tfn\tmcc_degenerate";

impl MutagenesisReport {
    pub fn condition(&self, name: &str) -> Option<&Condition> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{MUTAGENESIS_TSV_HEADER}\n");
        for c in &self.conditions {
            out.push_str(&format!("{}\t{}\t{}\n", c.name, c.n_mutated, c.report.tsv_row()));
        }
        out
    }
}

fn run_condition<T: Scalar>(model: &Model<T>, samples: &[DnaSample], name: &str, rules: &[MutationRule]) -> Result<Condition> {
    let mut edits = Vec::with_capacity(samples.len());
    let mutated: Vec<DnaSample> = samples
        .iter()
        .map(|s| {
            let active: Vec<MutationRule> = rules.iter().filter(|r| r.applies_to(s.label)).cloned().collect();
            let (seq, n) = super::apply_rules(&s.sequence, &active)?;
            edits.push(n);
            Ok(DnaSample {
                sequence: seq,
                ..s.clone()
            })
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let report = evaluate(&model.predict_proba(&mutated)?, &labels)?;
    Ok(Condition {
        name: name.to_string(),
        rules: rules.to_vec(),
        report,
        n_mutated: edits.iter().filter(|&&e| e > 0).count(),
        edits,
    })
}

/// Scores the wild type, each rule set and all rules combined. When every rule leaves
/// negatives untouched, specificity must be bit-identical across conditions.
pub fn mutagenesis_eval<T: Scalar>(model: &Model<T>, samples: &[DnaSample], rule_sets: &[RuleSet]) -> Result<MutagenesisReport> {
    let mut names = std::collections::BTreeSet::from(["wt", "combined"]);
    for set in rule_sets {
        if !names.insert(set.name.as_str()) {
            invalid!("duplicate or reserved condition name {}", set.name);
        }
        set.rules.iter().try_for_each(MutationRule::validate)?;
    }
    let combined: Vec<MutationRule> = rule_sets.iter().flat_map(|s| s.rules.iter().cloned()).collect();
    let mut plan: Vec<(&str, &[MutationRule])> = vec![("wt", &[])];
    plan.extend(rule_sets.iter().map(|s| (s.name.as_str(), s.rules.as_slice())));
    plan.push(("combined", &combined));
    let conditions: Vec<Condition> = plan
        .into_iter()
        .map(|(name, rules)| run_condition(model, samples, name, rules))
        .collect::<Result<_>>()?;
    let sp_checked = combined.iter().all(|r| r.scope == Scope::PositivesOnly);
    if sp_checked {
        let wt = conditions[0].report.sp;
        if let Some(c) = conditions.iter().find(|c| c.report.sp.to_bits() != wt.to_bits()) {
            return Err(Error::SpecificityDrift(format!("{}: {} vs wt {}", c.name, c.report.sp, wt)));
        }
    }
    Ok(MutagenesisReport { conditions, sp_checked })
}
