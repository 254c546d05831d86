use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Fusion, ModelConfig};
use crate::autodiff::{ParamMap, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Read access to named parameter tensors.
pub trait ParamSource<T: Scalar> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>>;

    fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensor(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }
}

impl<T: Scalar> ParamSource<T> for ParamMap<T> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.get(name)
    }
}

/// A parameter set with a few tensors replaced, e.g. perturbed embedding tables.
pub struct Overlay<'a, T: Scalar> {
    pub base: &'a ParamMap<T>,
    pub overrides: &'a ParamMap<T>,
}

impl<T: Scalar> ParamSource<T> for Overlay<'_, T> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.overrides.get(name).or_else(|| self.base.get(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// U(-1/√fan_in, 1/√fan_in)
    FanIn(usize),
    Embedding,
    Zeros,
    Ones,
    /// `[1…1, 0…0]`: the FiLM generator starts at the identity modulation.
    FilmBias,
}

/// Name, shape and initializer of every parameter, in initialization order.
pub(crate) fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.d_model;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

    let mut views = vec![("kmer", c.kmer_vocab())];
    if c.uses_bpe_view() {
        views.push(("bpe", c.bpe_vocab));
    }
    for (view, vocab) in views {
        push(format!("{view}.tok_emb"), vec![vocab, d], Init::Embedding);
        push(format!("{view}.pos_emb"), vec![c.max_positions(), d], Init::Embedding);
        push(format!("{view}.emb_ln.g"), vec![d], Init::Ones);
        push(format!("{view}.emb_ln.b"), vec![d], Init::Zeros);
        for l in 0..c.encoder_layers {
            layer_specs(&mut push, &format!("{view}.layer{l}"), d, c.encoder_ff);
        }
        if view == "kmer" {
            push("kmer.pooler.w".into(), vec![d, d], Init::FanIn(d));
            push("kmer.pooler.b".into(), vec![d], Init::Zeros);
        }
    }
    match c.fusion {
        Fusion::Film | Fusion::Reverse => {
            push("film.w1".into(), vec![d, d], Init::FanIn(d));
            push("film.b1".into(), vec![d], Init::Zeros);
            push("film.w2".into(), vec![d, 2 * d], Init::FanIn(d));
            push("film.b2".into(), vec![2 * d], Init::FilmBias);
        }
        Fusion::Concat => {
            push("fuse.w".into(), vec![2 * d, d], Init::FanIn(2 * d));
            push("fuse.b".into(), vec![d], Init::Zeros);
        }
        Fusion::KmerOnly => {}
    }
    if c.use_moe {
        push("gate.w".into(), vec![d, c.n_experts], Init::FanIn(d));
        push("gate.b".into(), vec![c.n_experts], Init::Zeros);
        let s = c.segment_width();
        for e in 0..c.n_experts {
            layer_specs(&mut push, &format!("expert{e}.layer"), s, c.expert_ff);
            push(format!("expert{e}.out_ln.g"), vec![d], Init::Ones);
            push(format!("expert{e}.out_ln.b"), vec![d], Init::Zeros);
        }
        push("moe_out.w".into(), vec![d, d], Init::FanIn(d));
        push("moe_out.b".into(), vec![d], Init::Zeros);
    }
    let h = c.classifier_hidden;
    push("cls.w1".into(), vec![d, h], Init::FanIn(d));
    push("cls.b1".into(), vec![h], Init::Zeros);
    push("cls.w2".into(), vec![h, 2], Init::FanIn(h));
    push("cls.b2".into(), vec![2], Init::Zeros);
    specs
}

fn layer_specs(push: &mut impl FnMut(String, Vec<usize>, Init), prefix: &str, width: usize, ff: usize) {
    for p in ["q", "k", "v", "o"] {
        push(format!("{prefix}.w{p}"), vec![width, width], Init::FanIn(width));
        push(format!("{prefix}.b{p}"), vec![width], Init::Zeros);
    }
    push(format!("{prefix}.ln1.g"), vec![width], Init::Ones);
    push(format!("{prefix}.ln1.b"), vec![width], Init::Zeros);
    push(format!("{prefix}.ff1.w"), vec![width, ff], Init::FanIn(width));
    push(format!("{prefix}.ff1.b"), vec![ff], Init::Zeros);
    push(format!("{prefix}.ff2.w"), vec![ff, width], Init::FanIn(ff));
    push(format!("{prefix}.ff2.b"), vec![width], Init::Zeros);
    push(format!("{prefix}.ln2.g"), vec![width], Init::Ones);
    push(format!("{prefix}.ln2.b"), vec![width], Init::Zeros);
}

/// Seeded initialization of every parameter named by the config.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamMap<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (name, shape, init) in param_specs(config) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::FanIn(fan_in) => {
                let a = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect()
            }
            Init::Embedding => (0..n).map(|_| T::of(rng.gen_range(-0.5..0.5))).collect(),
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::FilmBias => (0..n).map(|i| if i < n / 2 { T::one() } else { T::zero() }).collect(),
        };
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

/// Checks that `params` has exactly the names and shapes the config implies.
pub fn check_params<T: Scalar>(config: &ModelConfig, params: &ParamMap<T>) -> Result<()> {
    let specs = param_specs(config);
    if specs.len() != params.len() {
        return Err(Error::ConfigMismatch(format!(
            "expected {} parameter tensors, found {}",
            specs.len(),
            params.len()
        )));
    }
    for (name, shape, _) in specs {
        match params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {
                if !t.is_finite() {
                    return Err(Error::NonFinite(name));
                }
            }
            Some(t) => {
                return Err(Error::ConfigMismatch(format!(
                    "{name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::ConfigMismatch(format!("missing parameter {name}"))),
        }
    }
    Ok(())
}

pub fn param_count(config: &ModelConfig) -> usize {
    param_specs(config)
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}
