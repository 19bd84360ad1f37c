//! Nested-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use roadfusion::fusion::{AttentionBlock, TokenizerParams};
use roadfusion::tensor::{Graph, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

pub fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = lcg(seed);
    (0..n).map(|_| r()).collect()
}

pub fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let v = rand_vec(rows * cols, seed);
    v.chunks(cols).map(|c| c.to_vec()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    let cols = m[0].len();
    Tensor::new(vec![m.len(), cols], m.concat()).unwrap()
}

pub fn vec_tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

// Plain nested-loop oracles.

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn ln_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + eps).sqrt() * gain[i] + bias[i])
        .collect()
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub struct BlockVals {
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub g1: Vec<f64>,
    pub c1: Vec<f64>,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub g2: Vec<f64>,
    pub c2: Vec<f64>,
}

impl BlockVals {
    pub fn random(d: usize, e: usize, seed: u64) -> Self {
        let s = |k: u64| seed * 101 + k;
        Self {
            wq: rand_mat(d, d, s(1)),
            bq: rand_vec(d, s(2)),
            wk: rand_mat(d, d, s(3)),
            bk: rand_vec(d, s(4)),
            wv: rand_mat(d, d, s(5)),
            bv: rand_vec(d, s(6)),
            wo: rand_mat(d, d, s(7)),
            bo: rand_vec(d, s(8)),
            g1: rand_vec(d, s(9)).iter().map(|v| 1.0 + 0.3 * v).collect(),
            c1: rand_vec(d, s(10)),
            w1: rand_mat(d, e, s(11)),
            b1: rand_vec(e, s(12)),
            w2: rand_mat(e, d, s(13)),
            b2: rand_vec(d, s(14)),
            g2: rand_vec(d, s(15)).iter().map(|v| 1.0 + 0.3 * v).collect(),
            c2: rand_vec(d, s(16)),
        }
    }

    pub fn record(&self, g: &mut Graph<f64>) -> AttentionBlock {
        let mut m = |x: &Mat| g.constant(to_tensor(x));
        let (wq, wk, wv, wo, w1, w2) = (m(&self.wq), m(&self.wk), m(&self.wv), m(&self.wo), m(&self.w1), m(&self.w2));
        let mut v = |x: &[f64]| g.constant(vec_tensor(x));
        AttentionBlock {
            wq,
            bq: v(&self.bq),
            wk,
            bk: v(&self.bk),
            wv,
            bv: v(&self.bv),
            wo,
            bo: v(&self.bo),
            ln1_gain: v(&self.g1),
            ln1_bias: v(&self.c1),
            ffn_w1: w1,
            ffn_b1: v(&self.b1),
            ffn_w2: w2,
            ffn_b2: v(&self.b2),
            ln2_gain: v(&self.g2),
            ln2_bias: v(&self.c2),
        }
    }

    /// Single-head block oracle; returns (output, attention weights).
    pub fn oracle(&self, q_in: &Mat, ctx: &Mat, eps: f64) -> (Mat, Mat) {
        let d = q_in[0].len() as f64;
        let q = add_bias(&mm(q_in, &self.wq), &self.bq);
        let k = add_bias(&mm(ctx, &self.wk), &self.bk);
        let v = add_bias(&mm(ctx, &self.wv), &self.bv);
        let scores = mm(&q, &transpose(&k));
        let w: Mat = scores
            .iter()
            .map(|r| softmax_row(&r.iter().map(|s| s / d.sqrt()).collect::<Vec<_>>()))
            .collect();
        let attn = mm(&w, &v);
        let proj = add_bias(&mm(&attn, &self.wo), &self.bo);
        let h: Mat = add(q_in, &proj)
            .iter()
            .map(|r| ln_row(r, &self.g1, &self.c1, eps))
            .collect();
        let f1: Mat = add_bias(&mm(&h, &self.w1), &self.b1)
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.max(0.0)).collect())
            .collect();
        let f2 = add_bias(&mm(&f1, &self.w2), &self.b2);
        let out = add(&h, &f2)
            .iter()
            .map(|r| ln_row(r, &self.g2, &self.c2, eps))
            .collect();
        (out, w)
    }
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < tol, "index {i}: {x} vs {y}");
    }
}

pub fn tok_params(g: &mut Graph<f64>, gain: &[f64], bias: &[f64], w: &Mat, b: &[f64]) -> TokenizerParams {
    TokenizerParams {
        ln_gain: g.constant(vec_tensor(gain)),
        ln_bias: g.constant(vec_tensor(bias)),
        weight: g.constant(to_tensor(w)),
        bias: g.constant(vec_tensor(b)),
    }
}
