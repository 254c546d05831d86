use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ConfidenceSets, PositionMode, Scored, View, DEFAULT_CWGA_SAMPLES, DEFAULT_IG_STEPS, DEFAULT_TOP_DIMS};
use crate::autodiff::{integrated_gradients, Graph, Tensor};
use crate::error::{invalid, Result};
use crate::model::{encode_bpe_view, encode_kmer_view, fuse, Model};
use crate::scalar::Scalar;
use crate::seqdata::PAD_ID;
use crate::stats::{cohens_d, welch_t};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimSelection {
    /// Index into the FiLM output `h_mod`.
    pub dim: usize,
    /// Mean positive minus mean negative activation.
    pub delta: f64,
    /// Cohen's d, used as the aggregation weight.
    pub cohens_d: f64,
    pub p_value: f64,
    /// 1-based rank by `|cohens_d|`.
    pub rank: usize,
}

/// The `k` FiLM-output dimensions with the largest `|d|` between the classes. Returns all
/// dimensions when `k` exceeds the width.
pub fn cwga_dim_select<T: Scalar>(sets: &ConfidenceSets<T>, k: usize) -> Result<Vec<DimSelection>> {
    let Some(first) = sets.pos.first() else {
        invalid!("no positive samples");
    };
    let width = first.trace.h_mod.len();
    let column = |set: &[Scored<T>], d: usize| -> Vec<f64> { set.iter().map(|s| s.trace.h_mod[d].as_f64()).collect() };
    let mut dims = Vec::with_capacity(width);
    for d in 0..width {
        let (a, b) = (column(&sets.pos, d), column(&sets.neg, d));
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        dims.push(DimSelection {
            dim: d,
            delta: mean(&a) - mean(&b),
            cohens_d: cohens_d(&a, &b)?.map_or(0.0, |c| c.d),
            p_value: welch_t(&a, &b)?.map_or(1.0, |w| w.p),
            rank: 0,
        });
    }
    dims.sort_by(|a, b| b.cohens_d.abs().total_cmp(&a.cohens_d.abs()).then(a.dim.cmp(&b.dim)));
    dims.truncate(k);
    for (i, d) in dims.iter_mut().enumerate() {
        d.rank = i + 1;
    }
    Ok(dims)
}

/// Reference point of the attribution path in embedding space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// All-zero token embeddings.
    #[default]
    Zero,
    /// Every row set to the `[PAD]` embedding.
    Pad,
}

/// How the weighted sum over dimensions is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// One attribution of `Σ_d w_d · h_mod[d]` per sample.
    #[default]
    Fused,
    /// One attribution per selected dimension, combined afterwards.
    PerDimension,
}

/// Integrated-gradients attribution of a weighted FiLM-output target to each token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenAttribution<T> {
    pub view: View,
    /// One value per token, `[CLS]` excluded.
    pub tokens: Vec<T>,
    pub cls: T,
    pub f_input: T,
    pub f_baseline: T,
    /// `|Σ attribution − (f(x) − f(baseline))|`.
    pub completeness_gap: T,
}

/// Attributes `Σ_d weights[d] · h_mod[d]` to the token-embedding rows of one view, with the
/// other view held at its clean value. Each token's score is the sum over its embedding row.
pub fn token_attributions<T: Scalar>(
    model: &Model<T>,
    s: &Scored<T>,
    view: View,
    weights: &[T],
    steps: usize,
    baseline: Baseline,
) -> Result<TokenAttribution<T>> {
    let config = &model.config;
    let d = config.d_model;
    if weights.len() != d {
        invalid!("{} target weights for width {d}", weights.len());
    }
    if view == View::Bpe && !config.uses_bpe_view() {
        invalid!("model has no BPE view");
    }
    let ids = match view {
        View::Kmer => s.encoded.kmer_ids(),
        View::Bpe => s.encoded.bpe_ids(),
    };
    let table = model.params.get(&format!("{}.tok_emb", view.name())).expect("checked parameter set");
    let rows = |pick: &dyn Fn(usize) -> usize| -> Result<Tensor<T>> {
        let data = ids.iter().flat_map(|&i| table.row_slice(pick(i)).iter().copied()).collect();
        Tensor::new(vec![ids.len(), d], data)
    };
    let input = rows(&|i| i)?;
    let base = match baseline {
        Baseline::Zero => Tensor::zeros(input.shape()),
        Baseline::Pad => rows(&|_| PAD_ID)?,
    };
    let seed = Tensor::new(vec![1, d], weights.to_vec())?;
    let fixed = |v: &[T]| Tensor::new(vec![1, d], v.to_vec());
    let objective = |emb: &Tensor<T>| -> Result<(T, Tensor<T>)> {
        let mut g = Graph::new();
        g.set_params_require_grad(false);
        let e = g.input(emb.clone(), true)?;
        let (h_kmer, h_bpe) = match view {
            View::Kmer => {
                let h = encode_kmer_view(&mut g, &model.params, config, &ids, Some(e))?.1;
                let hb = match &s.trace.h_bpe {
                    Some(v) => Some(g.input(fixed(v)?, false)?),
                    None => None,
                };
                (h, hb)
            }
            View::Bpe => {
                let hk = g.input(fixed(&s.trace.h_kmer)?, false)?;
                (hk, Some(encode_bpe_view(&mut g, &model.params, config, &ids, Some(e))?.1))
            }
        };
        let (_, h_mod) = fuse(&mut g, &model.params, config, h_kmer, h_bpe)?;
        let value = g.value(h_mod).data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        let mut grads = g.backward_from(h_mod, seed.clone())?;
        Ok((value, grads.take(e).unwrap_or_else(|| Tensor::zeros(emb.shape()))))
    };
    let attr = integrated_gradients(objective, &input, &base, steps)?;
    let per_row: Vec<T> = (0..ids.len()).map(|r| attr.attribution.row_slice(r).iter().copied().sum()).collect();
    Ok(TokenAttribution {
        view,
        cls: per_row[0],
        tokens: per_row[1..].to_vec(),
        f_input: attr.f_input,
        f_baseline: attr.f_baseline,
        completeness_gap: attr.completeness_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwgaOptions {
    pub n_samples: usize,
    pub top_dims: usize,
    pub ig_steps: usize,
    pub baseline: Baseline,
    pub route: Route,
    pub position_mode: PositionMode,
    pub views: Vec<View>,
}

impl Default for CwgaOptions {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_CWGA_SAMPLES,
            top_dims: DEFAULT_TOP_DIMS,
            ig_steps: DEFAULT_IG_STEPS,
            baseline: Baseline::Zero,
            route: Route::Fused,
            position_mode: PositionMode::Surface,
            views: vec![View::Kmer, View::Bpe],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwgaRecord {
    pub view: View,
    pub token: String,
    /// Start offset when grouped positionally.
    pub position: Option<usize>,
    /// `Σ_d d_d · (A_pos^d(t) − A_neg^d(t))`.
    pub c: f64,
    /// `c / max |c|` within the view.
    pub c_hat: f64,
    pub rank: usize,
}

/// Weighted contribution of every token of one positive sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleContribution {
    pub id: String,
    pub view: View,
    pub tokens: Vec<String>,
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
    pub contributions: Vec<f64>,
    /// Index of the token with the largest `|contribution|`.
    pub top: usize,
}

impl SampleContribution {
    /// Character span `[start, end)` of the top token.
    pub fn top_span(&self) -> (usize, usize) {
        (self.offsets[self.top], self.offsets[self.top] + self.lengths[self.top])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwgaReport {
    pub options: CwgaOptions,
    pub dims: Vec<DimSelection>,
    /// Per view, ranked by `c_hat` descending.
    pub records: Vec<CwgaRecord>,
    pub positives: Vec<SampleContribution>,
    /// Views whose contributions were all zero.
    pub all_zero: Vec<View>,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Largest `gap / max(|f(x) − f(baseline)|, 1e-12)` over every attribution run.
    pub max_relative_gap: f64,
}

pub const CWGA_TSV_HEADER: &str = "view\ttoken\tposition_mode\tC\tC_hat\trank";

impl CwgaReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{CWGA_TSV_HEADER}\n");
        for r in &self.records {
            let token = match r.position {
                Some(p) => format!("{}@{p}", r.token),
                None => r.token.clone(),
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.view.name(),
                token,
                self.options.position_mode.name(),
                r.c,
                r.c_hat,
                r.rank
            ));
        }
        out
    }
}

fn relative_gap<T: Scalar>(a: &TokenAttribution<T>) -> f64 {
    a.completeness_gap.as_f64() / (a.f_input - a.f_baseline).abs().as_f64().max(1e-12)
}

/// Per-sample token scores for one target, in sample order.
fn attribute_set<T: Scalar>(
    model: &Model<T>,
    set: &[Scored<T>],
    view: View,
    weights: &[T],
    opts: &CwgaOptions,
) -> Result<Vec<TokenAttribution<T>>> {
    set.par_iter()
        .map(|s| token_attributions(model, s, view, weights, opts.ig_steps, opts.baseline))
        .collect()
}

/// Mean over the set of each sample's summed score per token key (absent keys count as 0).
fn class_means<T: Scalar>(set: &[Scored<T>], attrs: &[TokenAttribution<T>], view: View, mode: PositionMode) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    for (s, a) in set.iter().zip(attrs) {
        let tokens = view.tokens(&s.encoded);
        for (i, v) in a.tokens.iter().enumerate() {
            *sums.entry(mode.key(tokens, i)).or_default() += v.as_f64();
        }
    }
    let n = set.len() as f64;
    sums.values_mut().for_each(|v| *v /= n);
    sums
}

fn contrast(pos: &BTreeMap<String, f64>, neg: &BTreeMap<String, f64>, scale: f64, out: &mut BTreeMap<String, f64>) {
    let keys: std::collections::BTreeSet<&String> = pos.keys().chain(neg.keys()).collect();
    for k in keys {
        let d = pos.get(k).copied().unwrap_or(0.0) - neg.get(k).copied().unwrap_or(0.0);
        *out.entry(k.clone()).or_default() += scale * d;
    }
}

/// The `n` most confident members, ties broken by id.
fn most_confident<T: Scalar>(set: &[Scored<T>], n: usize) -> Vec<Scored<T>> {
    let mut v = set.to_vec();
    v.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()).then_with(|| a.sample.id.cmp(&b.sample.id)));
    v.truncate(n);
    v
}

fn split_key(key: &str, mode: PositionMode) -> (String, Option<usize>) {
    match (mode, key.rsplit_once('@')) {
        (PositionMode::Positional, Some((t, p))) => (t.to_string(), p.parse().ok()),
        _ => (key.to_string(), None),
    }
}

/// Contrastive weighted gradient attribution over high-confidence sets.
pub fn cwga<T: Scalar>(model: &Model<T>, sets: &ConfidenceSets<T>, opts: &CwgaOptions) -> Result<CwgaReport> {
    let sets = &ConfidenceSets {
        pos: most_confident(&sets.pos, opts.n_samples),
        neg: most_confident(&sets.neg, opts.n_samples),
        threshold: sets.threshold,
        cap: Some(opts.n_samples),
    };
    let dims = cwga_dim_select(sets, opts.top_dims)?;
    if dims.is_empty() {
        invalid!("no FiLM-output dimensions to aggregate");
    }
    let width = model.config.d_model;
    let mut weights = vec![T::zero(); width];
    for s in &dims {
        weights[s.dim] = T::of(s.cohens_d);
    }
    let mut records = Vec::new();
    let mut positives = Vec::new();
    let mut all_zero = Vec::new();
    let mut max_gap = 0.0f64;
    for &view in &opts.views {
        let mut c: BTreeMap<String, f64> = BTreeMap::new();
        let pos_scores: Vec<Vec<f64>> = match opts.route {
            Route::Fused => {
                let pa = attribute_set(model, &sets.pos, view, &weights, opts)?;
                let na = attribute_set(model, &sets.neg, view, &weights, opts)?;
                max_gap = pa.iter().chain(&na).map(relative_gap).fold(max_gap, f64::max);
                contrast(
                    &class_means(&sets.pos, &pa, view, opts.position_mode),
                    &class_means(&sets.neg, &na, view, opts.position_mode),
                    1.0,
                    &mut c,
                );
                pa.iter().map(|a| a.tokens.iter().map(|v| v.as_f64()).collect()).collect()
            }
            Route::PerDimension => {
                let mut per_sample: Vec<Vec<f64>> =
                    sets.pos.iter().map(|s| vec![0.0; view.tokens(&s.encoded).len()]).collect();
                for sel in &dims {
                    let mut one_hot = vec![T::zero(); width];
                    one_hot[sel.dim] = T::one();
                    let pa = attribute_set(model, &sets.pos, view, &one_hot, opts)?;
                    let na = attribute_set(model, &sets.neg, view, &one_hot, opts)?;
                    max_gap = pa.iter().chain(&na).map(relative_gap).fold(max_gap, f64::max);
                    contrast(
                        &class_means(&sets.pos, &pa, view, opts.position_mode),
                        &class_means(&sets.neg, &na, view, opts.position_mode),
                        sel.cohens_d,
                        &mut c,
                    );
                    for (acc, a) in per_sample.iter_mut().zip(&pa) {
                        for (x, v) in acc.iter_mut().zip(&a.tokens) {
                            *x += sel.cohens_d * v.as_f64();
                        }
                    }
                }
                per_sample
            }
        };
        let max_abs = c.values().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs == 0.0 {
            all_zero.push(view);
        }
        let mut view_records: Vec<CwgaRecord> = c
            .into_iter()
            .map(|(key, value)| {
                let (token, position) = split_key(&key, opts.position_mode);
                CwgaRecord {
                    view,
                    token,
                    position,
                    c: value,
                    c_hat: if max_abs > 0.0 { value / max_abs } else { 0.0 },
                    rank: 0,
                }
            })
            .collect();
        view_records.sort_by(|a, b| {
            b.c_hat
                .total_cmp(&a.c_hat)
                .then_with(|| a.token.cmp(&b.token))
                .then(a.position.cmp(&b.position))
        });
        for (i, r) in view_records.iter_mut().enumerate() {
            r.rank = i + 1;
        }
        records.extend(view_records);
        for (s, scores) in sets.pos.iter().zip(pos_scores) {
            let tokens = view.tokens(&s.encoded);
            let top = (0..scores.len())
                .max_by(|&a, &b| scores[a].abs().total_cmp(&scores[b].abs()).then(b.cmp(&a)))
                .unwrap_or(0);
            positives.push(SampleContribution {
                id: s.sample.id.clone(),
                view,
                tokens: tokens.token_strings.clone(),
                offsets: tokens.offsets.clone(),
                lengths: tokens.token_strings.iter().map(String::len).collect(),
                contributions: scores,
                top,
            });
        }
    }
    Ok(CwgaReport {
        options: opts.clone(),
        dims,
        records,
        positives,
        all_zero,
        n_pos: sets.pos.len(),
        n_neg: sets.neg.len(),
        max_relative_gap: max_gap,
    })
}
