//! Tokenization, bidirectional cross-attention, attention pooling,
//! adaptive gating and the classification head.
//!
//! ```text
//! V  = reshape(LN(f(I)) · W_vis + b_vis)           [n, d]
//! A  = reshape(LN(f(S)) · W_imu + b_imu)           [n, d]
//! V' = MSA(Q = V, K = A, V = A)   A' = MSA(Q = A, K = V, V = V)
//! v* = Σ softmax(V' W_p)_i V'_i   a* = Σ softmax(A' W_p)_i A'_i
//! g  = σ([v*; a*] W_g + b_g)      z  = g ⊙ v* + (1 − g) ⊙ a*
//! Y  = softmax(z W + b)
//! ```
//!
//! Each MSA block is post-norm: attention, output projection, residual,
//! LayerNorm, a relu feed-forward layer, residual, LayerNorm. Both
//! directions read the pre-update token sets.

use crate::config::{FusionConfig, ModelConfig};
use crate::encoders::Modality;
use crate::error::ModelError;
use crate::params::{pool_name, Bound, IMU_QUERY, VISION_QUERY};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T> {
    /// `[n, d_latent]`
    pub tokens: Tensor<T>,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy)]
pub struct TokenizerParams {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub weight: Var,
    pub bias: Var,
}

impl TokenizerParams {
    pub fn from_bound(p: &Bound, modality: &str) -> Result<Self, ModelError> {
        Ok(Self {
            ln_gain: p.get(&format!("tok.{modality}.ln.gain"))?,
            ln_bias: p.get(&format!("tok.{modality}.ln.bias"))?,
            weight: p.get(&format!("tok.{modality}.weight"))?,
            bias: p.get(&format!("tok.{modality}.bias"))?,
        })
    }
}

/// Expands a global embedding `[D]` into `[n, d]` tokens. The projected
/// `n·d` vector is reshaped row-major: token `i` is entries `i·d..(i+1)·d`.
pub fn tokenize<T: Scalar>(
    g: &mut Graph<T>,
    embedding: Var,
    p: TokenizerParams,
    tokens: usize,
    d_latent: usize,
    eps: f64,
) -> Result<Var, ModelError> {
    let width = g.shape(p.weight)[0];
    if g.shape(embedding) != [width] {
        return Err(ModelError::Shape {
            what: "tokenizer input".into(),
            expected: vec![width],
            got: g.shape(embedding).to_vec(),
        });
    }
    let normed = g.layer_norm(embedding, p.ln_gain, p.ln_bias, T::lit(eps))?;
    let row = g.reshape(normed, &[1, width])?;
    let projected = g.linear(row, p.weight, p.bias)?;
    Ok(g.reshape(projected, &[tokens, d_latent])?)
}

/// Parameters of one cross-attention direction.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl AttentionBlock {
    pub fn from_bound(p: &Bound, prefix: &str) -> Result<Self, ModelError> {
        let get = |s: &str| p.get(&format!("{prefix}.{s}"));
        Ok(Self {
            wq: get("wq")?,
            bq: get("bq")?,
            wk: get("wk")?,
            bk: get("bk")?,
            wv: get("wv")?,
            bv: get("bv")?,
            wo: get("wo")?,
            bo: get("bo")?,
            ln1_gain: get("ln1.gain")?,
            ln1_bias: get("ln1.bias")?,
            ffn_w1: get("ffn.w1")?,
            ffn_b1: get("ffn.b1")?,
            ffn_w2: get("ffn.w2")?,
            ffn_b2: get("ffn.b2")?,
            ln2_gain: get("ln2.gain")?,
            ln2_bias: get("ln2.bias")?,
        })
    }
}

/// Multi-head attention of the concatenated heads before the output
/// projection, plus the per-head weight matrices `[n_q, n_kv]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    queries: Var,
    context: Var,
    blk: &AttentionBlock,
    heads: usize,
) -> Result<(Var, Vec<Var>), ModelError> {
    let d = g.shape(queries)[1];
    if g.shape(context).get(1) != Some(&d) {
        return Err(ModelError::Shape {
            what: "cross-attention context".into(),
            expected: vec![0, d],
            got: g.shape(context).to_vec(),
        });
    }
    if heads == 0 || d % heads != 0 {
        return Err(ModelError::Config(crate::error::ConfigError::invalid(
            "heads",
            format!("{heads} heads do not divide d_latent {d}"),
        )));
    }
    let dh = d / heads;
    let q = g.linear(queries, blk.wq, blk.bq)?;
    let k = g.linear(context, blk.wk, blk.bk)?;
    let v = g.linear(context, blk.wv, blk.bv)?;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores, 1)?;
        outs.push(g.matmul(weights, vh)?);
        maps.push(weights);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    Ok((merged, maps))
}

/// One MSA block: `LN2(h + FFN(h))` with `h = LN1(Q + proj(attn))`.
pub fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    queries: Var,
    context: Var,
    blk: &AttentionBlock,
    heads: usize,
    eps: f64,
) -> Result<(Var, Vec<Var>), ModelError> {
    let (attn, maps) = multi_head_attention(g, queries, context, blk, heads)?;
    let proj = g.linear(attn, blk.wo, blk.bo)?;
    let r1 = g.add(queries, proj)?;
    let h = g.layer_norm(r1, blk.ln1_gain, blk.ln1_bias, T::lit(eps))?;
    let f1 = g.linear(h, blk.ffn_w1, blk.ffn_b1)?;
    let f1 = g.relu(f1)?;
    let f2 = g.linear(f1, blk.ffn_w2, blk.ffn_b2)?;
    let r2 = g.add(h, f2)?;
    let out = g.layer_norm(r2, blk.ln2_gain, blk.ln2_bias, T::lit(eps))?;
    Ok((out, maps))
}

#[derive(Debug, Clone)]
pub struct CrossAttended {
    pub vision: Var,
    pub imu: Var,
    pub vision_maps: Vec<Var>,
    pub imu_maps: Vec<Var>,
}

/// Both directions from the same pre-update `v` and `a`.
pub fn cross_attend<T: Scalar>(
    g: &mut Graph<T>,
    v: Var,
    a: Var,
    vision_query: &AttentionBlock,
    imu_query: &AttentionBlock,
    cfg: &FusionConfig,
) -> Result<CrossAttended, ModelError> {
    if g.shape(v) != g.shape(a) {
        return Err(ModelError::Shape {
            what: "token sets must share n and d_latent".into(),
            expected: g.shape(v).to_vec(),
            got: g.shape(a).to_vec(),
        });
    }
    let (vision, vision_maps) =
        attention_block(g, v, a, vision_query, cfg.heads, cfg.layer_norm_eps)?;
    let (imu, imu_maps) = attention_block(g, a, v, imu_query, cfg.heads, cfg.layer_norm_eps)?;
    Ok(CrossAttended {
        vision,
        imu,
        vision_maps,
        imu_maps,
    })
}

/// Learned attention pooling: `w = softmax(tokens · W_p)`, returns
/// `(Σ w_i tokens_i, w)` shaped `[d]` and `[n]`.
pub fn attention_pool<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    w_p: Var,
) -> Result<(Var, Var), ModelError> {
    let [n, d] = <[usize; 2]>::try_from(g.shape(tokens)).map_err(|_| ModelError::Shape {
        what: "pooling input".into(),
        expected: vec![0, 0],
        got: g.shape(tokens).to_vec(),
    })?;
    if g.shape(w_p) != [d, 1] {
        return Err(ModelError::Shape {
            what: "pooling projection".into(),
            expected: vec![d, 1],
            got: g.shape(w_p).to_vec(),
        });
    }
    let scores = g.matmul(tokens, w_p)?;
    let scores = g.reshape(scores, &[n])?;
    let weights = g.softmax(scores, 0)?;
    let row = g.reshape(weights, &[1, n])?;
    let pooled = g.matmul(row, tokens)?;
    Ok((g.reshape(pooled, &[d])?, weights))
}

/// `g = σ([v*; a*] · W_g + b_g)`, `z = g ⊙ v* + (1 − g) ⊙ a*`; returns `(z, g)`.
pub fn gate_fuse<T: Scalar>(
    g: &mut Graph<T>,
    vstar: Var,
    astar: Var,
    w_g: Var,
    b_g: Var,
) -> Result<(Var, Var), ModelError> {
    let d = g.shape(vstar)[0];
    if g.shape(astar) != [d] {
        return Err(ModelError::Shape {
            what: "gate inputs".into(),
            expected: vec![d],
            got: g.shape(astar).to_vec(),
        });
    }
    let cat = g.concat(&[vstar, astar], 0)?;
    let row = g.reshape(cat, &[1, 2 * d])?;
    let pre = g.linear(row, w_g, b_g)?;
    let pre = g.reshape(pre, &[d])?;
    let gate = g.sigmoid(pre)?;
    let neg = g.scale(gate, -T::one())?;
    let complement = g.add_scalar(neg, T::one())?;
    let from_vision = g.mul(gate, vstar)?;
    let from_imu = g.mul(complement, astar)?;
    let z = g.add(from_vision, from_imu)?;
    Ok((z, gate))
}

/// Returns `(logits, probabilities)`, both `[K]`.
pub fn classify<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    w: Var,
    b: Var,
) -> Result<(Var, Var), ModelError> {
    let d = g.shape(z)[0];
    let row = g.reshape(z, &[1, d])?;
    let logits = g.linear(row, w, b)?;
    let k = g.shape(logits)[1];
    let logits = g.reshape(logits, &[k])?;
    let probs = g.softmax(logits, 0)?;
    Ok((logits, probs))
}

/// Everything after tokenization.
#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub vision_query: AttentionBlock,
    pub imu_query: AttentionBlock,
    pub pool_vision: Var,
    pub pool_imu: Var,
    pub gate_weight: Var,
    pub gate_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl FusionParams {
    pub fn from_bound(p: &Bound, cfg: &ModelConfig) -> Result<Self, ModelError> {
        Ok(Self {
            vision_query: AttentionBlock::from_bound(p, VISION_QUERY)?,
            imu_query: AttentionBlock::from_bound(p, IMU_QUERY)?,
            pool_vision: p.get(&pool_name(cfg, "vision"))?,
            pool_imu: p.get(&pool_name(cfg, "imu"))?,
            gate_weight: p.get("gate.weight")?,
            gate_bias: p.get("gate.bias")?,
            head_weight: p.get("head.weight")?,
            head_bias: p.get("head.bias")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FusionVars {
    pub logits: Var,
    pub probs: Var,
    pub z: Var,
    pub gate: Var,
    pub vstar: Var,
    pub astar: Var,
    pub pool_vision: Var,
    pub pool_imu: Var,
    pub attended: CrossAttended,
}

/// Cross-attention, pooling, gating and classification on token sets.
pub fn fuse_tokens<T: Scalar>(
    g: &mut Graph<T>,
    v: Var,
    a: Var,
    p: &FusionParams,
    cfg: &FusionConfig,
) -> Result<FusionVars, ModelError> {
    let attended = cross_attend(g, v, a, &p.vision_query, &p.imu_query, cfg)?;
    let (vstar, pool_vision) = attention_pool(g, attended.vision, p.pool_vision)?;
    let (astar, pool_imu) = attention_pool(g, attended.imu, p.pool_imu)?;
    let (z, gate) = gate_fuse(g, vstar, astar, p.gate_weight, p.gate_bias)?;
    let (logits, probs) = classify(g, z, p.head_weight, p.head_bias)?;
    Ok(FusionVars {
        logits,
        probs,
        z,
        gate,
        vstar,
        astar,
        pool_vision,
        pool_imu,
        attended,
    })
}
