//! Graph construction for the dual-view encoders, FiLM fusion, expert mixture and
//! classifier head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Fusion, ModelConfig};
use super::params::ParamSource;
use super::tokenizer::EncodedSample;
use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Dropout behaviour of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active with a mask stream seeded by `seed`.
    Train { seed: u64 },
}

/// Optional replacement nodes for the `[T + 1, d]` token-embedding outputs of each view
/// (`[CLS]` row first). Used for embedding-space perturbation and attribution.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmbeddingOverrides {
    pub kmer: Option<NodeId>,
    pub bpe: Option<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct ViewNodes {
    /// Token-embedding output `[T + 1, d]`.
    pub token_embedding: NodeId,
    /// Final hidden states `[T + 1, d]`.
    pub hidden: NodeId,
    /// Final-layer self-attention node (probabilities readable from the graph).
    pub final_attention: Option<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct FilmNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
    pub h_mod: NodeId,
}

#[derive(Debug, Clone)]
pub struct MoeNodes {
    pub gate: NodeId,
    pub experts: Vec<NodeId>,
    pub h_moe: NodeId,
}

#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub kmer: ViewNodes,
    pub bpe: Option<ViewNodes>,
    pub h_kmer: NodeId,
    pub h_bpe: Option<NodeId>,
    pub film: Option<FilmNodes>,
    pub h_mod: NodeId,
    pub moe: Option<MoeNodes>,
    pub h_moe: NodeId,
    pub logits: NodeId,
}

fn bind<'p, T: Scalar, P: ParamSource<T>>(g: &mut Graph<'p, T>, p: &'p P, name: &str) -> Result<NodeId> {
    Ok(g.param(name, p.require(name)?))
}

/// `x · W + b` with parameters `{prefix}.w` / `{prefix}.b` (or explicit names).
fn linear<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    w: &str,
    b: &str,
    x: NodeId,
) -> Result<NodeId> {
    let (w, b) = (bind(g, p, w)?, bind(g, p, b)?);
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn affine_norm<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    prefix: &str,
    x: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let axis = g.shape(x).len() - 1;
    let n = g.layer_norm(x, axis, T::of(eps))?;
    let gain = bind(g, p, &format!("{prefix}.g"))?;
    let bias = bind(g, p, &format!("{prefix}.b"))?;
    let y = g.hadamard(n, gain)?;
    g.add(y, bias)
}

/// Post-norm transformer layer: `LN(x + Attn(x))`, then `LN(· + FF_gelu(·))`.
/// Returns the output and the attention node.
pub fn transformer_layer<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    prefix: &str,
    x: NodeId,
    heads: usize,
    eps: f64,
) -> Result<(NodeId, NodeId)> {
    let q = linear(g, p, &format!("{prefix}.wq"), &format!("{prefix}.bq"), x)?;
    let k = linear(g, p, &format!("{prefix}.wk"), &format!("{prefix}.bk"), x)?;
    let v = linear(g, p, &format!("{prefix}.wv"), &format!("{prefix}.bv"), x)?;
    let attn = g.attention(q, k, v, heads)?;
    let o = linear(g, p, &format!("{prefix}.wo"), &format!("{prefix}.bo"), attn)?;
    let r = g.add(x, o)?;
    let x1 = affine_norm(g, p, &format!("{prefix}.ln1"), r, eps)?;
    let h = linear(g, p, &format!("{prefix}.ff1.w"), &format!("{prefix}.ff1.b"), x1)?;
    let h = g.gelu(h)?;
    let f = linear(g, p, &format!("{prefix}.ff2.w"), &format!("{prefix}.ff2.b"), h)?;
    let r = g.add(x1, f)?;
    Ok((affine_norm(g, p, &format!("{prefix}.ln2"), r, eps)?, attn))
}

/// Embedding + positional encoding + encoder stack for one view. `ids` includes `[CLS]`.
pub fn encoder_view<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    config: &ModelConfig,
    view: &str,
    ids: &[usize],
    embedding: Option<NodeId>,
) -> Result<ViewNodes> {
    let t = ids.len();
    if t > config.max_positions() {
        invalid!("{view} view has {t} tokens, more than {} positions", config.max_positions());
    }
    let token_embedding = match embedding {
        Some(node) => {
            if g.shape(node) != [t, config.d_model] {
                invalid!("{view} embedding override has shape {:?}, expected [{t}, {}]", g.shape(node), config.d_model);
            }
            node
        }
        None => {
            let table = bind(g, p, &format!("{view}.tok_emb"))?;
            g.embedding(table, ids)?
        }
    };
    let pos_table = bind(g, p, &format!("{view}.pos_emb"))?;
    let pos = g.slice(pos_table, 0, 0, t)?;
    let x = g.add(token_embedding, pos)?;
    let mut x = affine_norm(g, p, &format!("{view}.emb_ln"), x, config.layer_norm_eps)?;
    let mut final_attention = None;
    for l in 0..config.encoder_layers {
        let (y, attn) = transformer_layer(
            g,
            p,
            &format!("{view}.layer{l}"),
            x,
            config.encoder_heads,
            config.layer_norm_eps,
        )?;
        x = y;
        final_attention = Some(attn);
    }
    Ok(ViewNodes {
        token_embedding,
        hidden: x,
        final_attention,
    })
}

/// k-mer view: `h_kmer = tanh(W · state[CLS] + b)`.
pub fn encode_kmer_view<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    config: &ModelConfig,
    ids: &[usize],
    embedding: Option<NodeId>,
) -> Result<(ViewNodes, NodeId)> {
    let view = encoder_view(g, p, config, "kmer", ids, embedding)?;
    let cls = g.slice(view.hidden, 0, 0, 1)?;
    let pooled = linear(g, p, "kmer.pooler.w", "kmer.pooler.b", cls)?;
    Ok((view, g.tanh(pooled)?))
}

/// BPE view: `h_bpe` is the mean of the final states of all non-special tokens.
pub fn encode_bpe_view<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    config: &ModelConfig,
    ids: &[usize],
    embedding: Option<NodeId>,
) -> Result<(ViewNodes, NodeId)> {
    if ids.len() < 2 {
        invalid!("BPE view received no tokens");
    }
    let view = encoder_view(g, p, config, "bpe", ids, embedding)?;
    let tokens = g.slice(view.hidden, 0, 1, ids.len() - 1)?;
    Ok((view, g.mean_pool(tokens, 0)?))
}

/// `[γ, β] = W2 · ReLU(W1 · cond + b1) + b2`; `h_mod = γ ⊙ target + β`.
pub fn film_modulate<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    cond: NodeId,
    target: NodeId,
) -> Result<FilmNodes> {
    let d = g.value(target).len();
    let h = linear(g, p, "film.w1", "film.b1", cond)?;
    let h = g.relu(h)?;
    let gb = linear(g, p, "film.w2", "film.b2", h)?;
    let gamma = g.slice(gb, 1, 0, d)?;
    let beta = g.slice(gb, 1, d, d)?;
    let scaled = g.hadamard(gamma, target)?;
    let h_mod = g.add(scaled, beta)?;
    Ok(FilmNodes { gamma, beta, h_mod })
}

/// Softmax gate on `cond`; each expert reshapes `h_mod` into segments, runs one transformer
/// layer, flattens, adds the residual and normalizes. Output `Linear_d(Σ w_i · expert_i)`.
pub fn moe_forward<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    config: &ModelConfig,
    h_mod: NodeId,
    cond: NodeId,
) -> Result<MoeNodes> {
    let d = config.d_model;
    let (m, s) = (config.expert_segments, config.segment_width());
    if m == 0 || !d.is_multiple_of(m) {
        invalid!("d_model {d} not divisible into {m} segments");
    }
    let logits = linear(g, p, "gate.w", "gate.b", cond)?;
    let gate = g.softmax(logits, 1)?;
    let mut experts = Vec::with_capacity(config.n_experts);
    for e in 0..config.n_experts {
        let segments = g.reshape(h_mod, &[m, s])?;
        let (y, _) = transformer_layer(
            g,
            p,
            &format!("expert{e}.layer"),
            segments,
            config.expert_heads,
            config.layer_norm_eps,
        )?;
        let flat = g.flatten(y)?;
        let r = g.add(h_mod, flat)?;
        experts.push(affine_norm(g, p, &format!("expert{e}.out_ln"), r, config.layer_norm_eps)?);
    }
    let stack = g.concat(&experts, 0)?;
    let mixed = g.matmul(gate, stack)?;
    let h_moe = linear(g, p, "moe_out.w", "moe_out.b", mixed)?;
    Ok(MoeNodes { gate, experts, h_moe })
}

/// `z = W2 · ReLU(Dropout(W1 · h + b1)) + b2`.
pub fn classify<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    config: &ModelConfig,
    h_moe: NodeId,
    mode: Mode,
) -> Result<NodeId> {
    let h = linear(g, p, "cls.w1", "cls.b1", h_moe)?;
    let h = match mode {
        Mode::Eval => h,
        Mode::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            g.dropout(h, config.dropout, &mut rng)?
        }
    };
    let h = g.relu(h)?;
    linear(g, p, "cls.w2", "cls.b2", h)
}

/// Combines the pooled views according to `config.fusion`. Returns the FiLM nodes when a
/// modulation was applied, and `h_mod`.
pub fn fuse<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    config: &ModelConfig,
    h_kmer: NodeId,
    h_bpe: Option<NodeId>,
) -> Result<(Option<FilmNodes>, NodeId)> {
    Ok(match (config.fusion, h_bpe) {
        (Fusion::Film, Some(hb)) => {
            let f = film_modulate(g, p, hb, h_kmer)?;
            (Some(f), f.h_mod)
        }
        (Fusion::Reverse, Some(hb)) => {
            let f = film_modulate(g, p, h_kmer, hb)?;
            (Some(f), f.h_mod)
        }
        (Fusion::Concat, Some(hb)) => {
            let cat = g.concat(&[h_kmer, hb], 1)?;
            (None, linear(g, p, "fuse.w", "fuse.b", cat)?)
        }
        (Fusion::KmerOnly, _) => (None, h_kmer),
        (_, None) => invalid!("{:?} fusion needs the BPE view", config.fusion),
    })
}

/// Full forward pass for one encoded sample.
pub fn forward<'p, T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<'p, T>,
    p: &'p P,
    config: &ModelConfig,
    sample: &EncodedSample,
    mode: Mode,
    overrides: EmbeddingOverrides,
) -> Result<ForwardNodes> {
    let (kmer, h_kmer) = encode_kmer_view(g, p, config, &sample.kmer_ids(), overrides.kmer)?;
    let (bpe, h_bpe) = if config.uses_bpe_view() {
        let (v, h) = encode_bpe_view(g, p, config, &sample.bpe_ids(), overrides.bpe)?;
        (Some(v), Some(h))
    } else {
        (None, None)
    };
    let (film, h_mod) = fuse(g, p, config, h_kmer, h_bpe)?;
    let (moe, h_moe) = if config.use_moe {
        let cond = h_bpe.unwrap_or(h_kmer);
        let m = moe_forward(g, p, config, h_mod, cond)?;
        let h = m.h_moe;
        (Some(m), h)
    } else {
        (None, h_mod)
    };
    let logits = classify(g, p, config, h_moe, mode)?;
    Ok(ForwardNodes {
        kmer,
        bpe,
        h_kmer,
        h_bpe,
        film,
        h_mod,
        moe,
        h_moe,
        logits,
    })
}
