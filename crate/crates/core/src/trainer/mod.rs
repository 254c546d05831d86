//! Flooding-regularized cross-entropy with FGM adversarial passes, AdamW, the training
//! loop and stratified k-fold model selection.

mod cv;
mod optim;

pub use cv::{cross_validate, select_best, stratified_folds, CvReport, CvRow};
pub use optim::{adamw_step, OptState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamMap, Tensor};
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{
    encode_bpe_view, encode_kmer_view, forward, EmbeddingOverrides, EncodedSample, Model, ModelConfig, Mode,
    Overlay, ParamSource, Tokenizer,
};
use crate::scalar::Scalar;
use crate::seqdata::DnaSample;

/// Embedding tables perturbed by FGM.
pub const FGM_TARGETS: [&str; 2] = ["kmer.tok_emb", "bpe.tok_emb"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FloodScope {
    /// Flood the batch-mean cross-entropy once.
    #[default]
    Batch,
    /// Flood each sample's cross-entropy, then average.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FgmNorm {
    /// Each targeted table scaled to norm ε on its own.
    #[default]
    PerTensor,
    /// All targeted tables scaled together to joint norm ε.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub flood_level: f64,
    pub fgm_epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    pub adversarial: bool,
    /// Warm each encoder up on its own linear probe before joint training.
    pub fine_tune_init: bool,
    pub warmup_epochs: usize,
    pub flood_scope: FloodScope,
    pub fgm_norm: FgmNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            weight_decay: 0.01,
            flood_level: 0.0,
            fgm_epsilon: 1.0,
            epochs: 10,
            seed: 0,
            adversarial: true,
            fine_tune_init: false,
            warmup_epochs: 1,
            flood_scope: FloodScope::Batch,
            fgm_norm: FgmNorm::PerTensor,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            invalid!("learning rate must be positive");
        }
        if self.batch_size == 0 {
            invalid!("batch size must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.flood_level >= 0.0 && self.fgm_epsilon >= 0.0) {
            invalid!("weight decay, flood level and FGM epsilon must be non-negative");
        }
        Ok(())
    }
}

/// `-log softmax(z)[label]`, max-shifted.
pub fn cross_entropy<T: Scalar>(logits: [T; 2], label: u8) -> T {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[usize::from(label)]
}

/// `|ce - b| + b`, evaluated branchwise so the `ce >= b` branch returns `ce` exactly.
pub fn flooding_loss<T: Scalar>(ce: T, b: T) -> T {
    if ce >= b {
        ce
    } else {
        b + (b - ce)
    }
}

/// `d flooding_loss / d ce`: `sign(ce - b)`, zero at the kink.
pub fn flood_factor<T: Scalar>(ce: T, b: T) -> T {
    if ce > b {
        T::one()
    } else if ce < b {
        -T::one()
    } else {
        T::zero()
    }
}

/// `r = ε · g / ‖g‖₂` for each gradient (or jointly across all of them). Zero gradients
/// give zero perturbations.
pub fn fgm_perturb<T: Scalar>(grads: &ParamMap<T>, eps: f64, norm: FgmNorm) -> Result<ParamMap<T>> {
    if grads.is_empty() {
        invalid!("FGM needs at least one targeted embedding gradient");
    }
    let joint = grads.values().map(|g| g.l2_norm().as_f64().powi(2)).sum::<f64>().sqrt();
    Ok(grads
        .iter()
        .map(|(name, g)| {
            let n = match norm {
                FgmNorm::PerTensor => g.l2_norm().as_f64(),
                FgmNorm::Joint => joint,
            };
            let r = if n > 0.0 {
                let s = T::of(eps / n);
                g.map(|x| x * s)
            } else {
                Tensor::zeros(g.shape())
            };
            (name.clone(), r)
        })
        .collect())
}

/// What the loss is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Full,
    /// Linear probe on one encoder's pooled output (`probe.{view}.w/b`).
    Probe(&'static str),
}

fn head_logits<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    config: &ModelConfig,
    sample: &EncodedSample,
    mode: Mode,
    head: Head,
) -> Result<NodeId> {
    match head {
        Head::Full => Ok(forward(g, p, config, sample, mode, EmbeddingOverrides::default())?.logits),
        Head::Probe(view) => {
            let h = if view == "kmer" {
                encode_kmer_view(g, p, config, &sample.kmer_ids(), None)?.1
            } else {
                encode_bpe_view(g, p, config, &sample.bpe_ids(), None)?.1
            };
            let w = g.param(&format!("probe.{view}.w"), p.require(&format!("probe.{view}.w"))?);
            let b = g.param(&format!("probe.{view}.b"), p.require(&format!("probe.{view}.b"))?);
            let z = g.matmul(h, w)?;
            g.add(z, b)
        }
    }
}

/// Cross-entropy of one sample and its gradient with respect to every parameter used.
pub fn sample_gradient<T: Scalar, P: ParamSource<T>>(
    config: &ModelConfig,
    params: &P,
    sample: &EncodedSample,
    label: u8,
    mode: Mode,
    head: Head,
) -> Result<(T, ParamMap<T>)> {
    let mut g = Graph::new();
    let logits = head_logits(&mut g, params, config, sample, mode, head)?;
    let loss = g.cross_entropy(logits, usize::from(label))?;
    let ce = g.value(loss).data()[0];
    Ok((ce, g.backward(loss)?.into_params()))
}

/// SplitMix64 finalizer over a combined key.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9E37_79B9_7F4A_7C15, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(acc << 6);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Flooded loss of the clean pass.
    pub loss: f64,
    /// Mean cross-entropy of the clean pass.
    pub ce: f64,
    /// Flooded loss of the adversarial pass, when one ran.
    pub adv_loss: Option<f64>,
}

struct PassOutput<T> {
    loss: T,
    ce: T,
    grads: ParamMap<T>,
}

/// One forward/backward sweep over a batch. Gradients are accumulated in sample order so the
/// result does not depend on the worker count.
fn batch_pass<T: Scalar, P: ParamSource<T> + Sync>(
    config: &ModelConfig,
    params: &P,
    batch: &[(&EncodedSample, u8)],
    cfg: &TrainConfig,
    seeds: &[u64],
    head: Head,
) -> Result<PassOutput<T>> {
    let n = T::of(batch.len() as f64);
    let b = T::of(cfg.flood_level);
    let chunk = rayon::current_num_threads().max(1);
    let mut acc: Option<ParamMap<T>> = None;
    let mut ces = Vec::with_capacity(batch.len());
    for (items, item_seeds) in batch.chunks(chunk).zip(seeds.chunks(chunk)) {
        let results: Vec<Result<(T, ParamMap<T>)>> = items
            .par_iter()
            .zip(item_seeds)
            .map(|(&(s, label), &seed)| sample_gradient(config, params, s, label, Mode::Train { seed }, head))
            .collect();
        for r in results {
            let (ce, mut grads) = r?;
            if !ce.is_finite() {
                return Err(Error::NonFinite(format!("cross-entropy {ce} at sample {}", ces.len())));
            }
            if cfg.flood_scope == FloodScope::Sample {
                let f = flood_factor(ce, b);
                grads.values_mut().for_each(|g| g.scale(f));
            }
            ces.push(ce);
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => {
                    for (name, g) in grads {
                        match a.get_mut(&name) {
                            Some(t) => t.add_assign(&g)?,
                            None => {
                                a.insert(name, g);
                            }
                        }
                    }
                }
            }
        }
    }
    let Some(mut grads) = acc else {
        invalid!("empty batch");
    };
    let ce = ces.iter().copied().sum::<T>() / n;
    let (loss, scale) = match cfg.flood_scope {
        FloodScope::Batch => (flooding_loss(ce, b), flood_factor(ce, b) / n),
        FloodScope::Sample => (ces.iter().map(|&c| flooding_loss(c, b)).sum::<T>() / n, T::one() / n),
    };
    grads.values_mut().for_each(|g| g.scale(scale));
    Ok(PassOutput { loss, ce, grads })
}

/// Flooded loss, mean cross-entropy and parameter gradients of one clean pass over `batch`,
/// with sample `i` using dropout seed `seeds[i]`.
pub fn batch_gradient<T: Scalar>(
    config: &ModelConfig,
    params: &ParamMap<T>,
    batch: &[(&EncodedSample, u8)],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<(T, T, ParamMap<T>)> {
    if seeds.len() != batch.len() {
        invalid!("{} seeds for a batch of {}", seeds.len(), batch.len());
    }
    let out = batch_pass(config, params, batch, cfg, seeds, Head::Full)?;
    Ok((out.loss, out.ce, out.grads))
}

/// One optimizer step: clean pass, optional FGM pass on perturbed embeddings, summed
/// gradients, AdamW.
pub fn train_step<T: Scalar>(
    config: &ModelConfig,
    params: &mut ParamMap<T>,
    opt: &mut OptState<T>,
    batch: &[(&EncodedSample, u8)],
    cfg: &TrainConfig,
    step_seed: u64,
    head: Head,
) -> Result<StepStats> {
    if batch.is_empty() {
        invalid!("empty batch");
    }
    let seeds = |pass: u64| -> Vec<u64> { (0..batch.len() as u64).map(|i| mix_seed(&[step_seed, i, pass])).collect() };
    let clean = batch_pass(config, &*params, batch, cfg, &seeds(0), head)?;
    let mut grads = clean.grads;
    let mut adv_loss = None;
    if cfg.adversarial && head == Head::Full {
        let targets: ParamMap<T> = FGM_TARGETS
            .iter()
            .filter_map(|&t| grads.get(t).map(|g| (t.to_string(), g.clone())))
            .collect();
        let r = fgm_perturb(&targets, cfg.fgm_epsilon, cfg.fgm_norm)?;
        let mut shifted = ParamMap::new();
        for (name, delta) in r {
            let mut t = params[&name].clone();
            t.add_assign(&delta)?;
            shifted.insert(name, t);
        }
        let overlay = Overlay {
            base: &*params,
            overrides: &shifted,
        };
        let adv = batch_pass(config, &overlay, batch, cfg, &seeds(1), head)?;
        for (name, g) in adv.grads {
            grads.get_mut(&name).expect("same parameter set").add_assign(&g)?;
        }
        adv_loss = Some(adv.loss.as_f64());
    }
    adamw_step(params, &grads, opt, cfg.learning_rate, cfg.weight_decay)?;
    Ok(StepStats {
        loss: clean.loss.as_f64(),
        ce: clean.ce.as_f64(),
        adv_loss,
    })
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// `warmup_kmer`, `warmup_bpe` or `train`.
    pub phase: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub val: Option<MetricReport>,
}

/// Trains a tokenizer on `train` and initializes a model from `seed`.
pub fn init_model<T: Scalar>(config: &ModelConfig, train: &[DnaSample], seed: u64) -> Result<Model<T>> {
    let tokenizer = Tokenizer::train(train, config.kmer, config.bpe_vocab)?;
    Model::new(config.clone(), tokenizer, seed)
}

fn encode_all<T: Scalar>(model: &Model<T>, samples: &[DnaSample]) -> Result<Vec<(EncodedSample, u8)>> {
    samples
        .par_iter()
        .map(|s| Ok((model.encode(&s.sequence)?, s.label)))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_epochs<T: Scalar>(
    model: &mut Model<T>,
    encoded: &[(EncodedSample, u8)],
    val: Option<&[DnaSample]>,
    cfg: &TrainConfig,
    head: Head,
    phase: &str,
    epochs: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let phase_key = phase.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    let mut opt = OptState::new(&model.params);
    let mut logs = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, phase_key, epoch as u64])));
        let (mut loss, mut ce) = (0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<(&EncodedSample, u8)> = idx.iter().map(|&i| (&encoded[i].0, encoded[i].1)).collect();
            let seed = mix_seed(&[cfg.seed, phase_key, epoch as u64, b as u64]);
            let stats = train_step(&model.config, &mut model.params, &mut opt, &batch, cfg, seed, head)?;
            loss += stats.loss * idx.len() as f64;
            ce += stats.ce * idx.len() as f64;
        }
        let val = match (val, head) {
            (Some(v), Head::Full) => {
                let scores = model.predict_proba(v)?;
                let labels: Vec<u8> = v.iter().map(|s| s.label).collect();
                Some(evaluate(&scores, &labels)?)
            }
            _ => None,
        };
        let log = EpochLog {
            phase: phase.to_string(),
            epoch: epoch + 1,
            train_loss: loss / encoded.len() as f64,
            train_ce: ce / encoded.len() as f64,
            val,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Linear-probe warmup of each encoder, then joint training. Optimizer state is fresh for
/// every phase; probe parameters are dropped afterwards.
fn warmup<T: Scalar>(
    model: &mut Model<T>,
    encoded: &[(EncodedSample, u8)],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let mut logs = Vec::new();
    let views: &[&'static str] = if model.config.uses_bpe_view() { &["kmer", "bpe"] } else { &["kmer"] };
    let d = model.config.d_model;
    for &view in views {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x9706e, view.len() as u64]));
        let a = 1.0 / (d as f64).sqrt();
        let w: Vec<T> = (0..2 * d).map(|_| T::of(rand::Rng::gen_range(&mut rng, -a..a))).collect();
        let (wn, bn) = (format!("probe.{view}.w"), format!("probe.{view}.b"));
        let prefix = format!("{view}.");
        // Only the encoder and its probe take part in this phase.
        let frozen: ParamMap<T> = model
            .params
            .iter()
            .filter(|(k, _)| !k.starts_with(&prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        model.params.retain(|k, _| k.starts_with(&prefix));
        model.params.insert(wn.clone(), Tensor::new(vec![d, 2], w)?);
        model.params.insert(bn.clone(), Tensor::zeros(&[2]));
        let result = run_epochs(
            model,
            encoded,
            None,
            cfg,
            Head::Probe(view),
            &format!("warmup_{view}"),
            cfg.warmup_epochs,
            on_epoch,
        );
        model.params.remove(&wn);
        model.params.remove(&bn);
        model.params.extend(frozen);
        logs.extend(result?);
    }
    Ok(logs)
}

/// Trains `model` in place on `train`, logging validation metrics on `val` after every
/// epoch.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train: &[DnaSample],
    val: Option<&[DnaSample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::NoSamples("training split".into()));
    }
    let encoded = encode_all(model, train)?;
    let mut logs = Vec::new();
    if cfg.fine_tune_init {
        logs.extend(warmup(model, &encoded, cfg, &mut on_epoch)?);
    }
    logs.extend(run_epochs(model, &encoded, val, cfg, Head::Full, "train", cfg.epochs, &mut on_epoch)?);
    Ok(logs)
}
