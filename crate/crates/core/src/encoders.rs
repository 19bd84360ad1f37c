//! Modality encoders producing the global embeddings f(I) and f(S).
//!
//! The vision branch standardizes each input channel over the image, then
//! runs a compact CNN: `k` blocks of 3×3 conv, relu and
//! 2×2 average pooling, then global average pooling and a linear map to
//! `d_vis`. The inertial branch runs one strided 1-D conv with relu
//! followed by a bidirectional LSTM; the final hidden states of both
//! directions are concatenated into a `2 × hidden` embedding.

use crate::config::EncoderConfig;
use crate::error::ModelError;
use crate::params::{Bound, ModelParams};
use crate::sample::{ImageTensor, ImuWindow};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Vision,
    Inertial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub data: Tensor<T>,
    pub modality: Modality,
}

fn expect_shape(what: &str, expected: &[usize], got: &[usize]) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Shape {
            what: what.to_string(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        })
    }
}

/// Vision encoder on a recorded `[C, H, W]` image; returns `[d_vis]`.
pub fn vision_encoder<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &EncoderConfig,
    image: Var,
) -> Result<Var, ModelError> {
    expect_shape(
        "image",
        &[cfg.image_channels, cfg.image_size, cfg.image_size],
        g.shape(image),
    )?;
    let hw = cfg.image_size * cfg.image_size;
    let ones = g.constant(Tensor::full(&[hw], T::one()));
    let zeros = g.constant(Tensor::zeros(&[hw]));
    let rows = g.reshape(image, &[cfg.image_channels, hw])?;
    let rows = g.layer_norm(rows, ones, zeros, T::lit(1e-5))?;
    let mut x = g.reshape(rows, &[cfg.image_channels, cfg.image_size, cfg.image_size])?;
    for i in 0..cfg.vision_widths.len() {
        let w = p.get(&format!("vision.block{i}.weight"))?;
        let b = p.get(&format!("vision.block{i}.bias"))?;
        x = g.conv2d(x, w, Some(b), 1, 1)?;
        x = g.relu(x)?;
        x = g.avg_pool2d(x, 2)?;
    }
    let [c, h, w] = <[usize; 3]>::try_from(g.shape(x)).expect("conv output is rank 3");
    let flat = g.reshape(x, &[c, h * w])?;
    let pooled = g.mean(flat, 1)?;
    let row = g.reshape(pooled, &[1, c])?;
    let y = g.linear(row, p.get("vision.proj.weight")?, p.get("vision.proj.bias")?)?;
    Ok(g.reshape(y, &[cfg.d_vis])?)
}

/// Weights of one LSTM direction; gate blocks are ordered input, forget,
/// candidate, output along the `4 × hidden` axis.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

impl LstmParams {
    pub fn from_bound(p: &Bound, prefix: &str) -> Result<Self, ModelError> {
        Ok(Self {
            w_ih: p.get(&format!("{prefix}.w_ih"))?,
            w_hh: p.get(&format!("{prefix}.w_hh"))?,
            bias: p.get(&format!("{prefix}.bias"))?,
        })
    }
}

/// Final `(hidden, cell)` states, each `[1, hidden]`, of one LSTM pass over
/// the rows of `seq_rows: [L, C]` in `order`.
pub fn lstm_final_state<T: Scalar>(
    g: &mut Graph<T>,
    seq_rows: Var,
    params: LstmParams,
    hidden: usize,
    order: impl Iterator<Item = usize>,
) -> Result<(Var, Var), ModelError> {
    let xproj = g.linear(seq_rows, params.w_ih, params.bias)?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut c = g.constant(Tensor::zeros(&[1, hidden]));
    for t in order {
        let xt = g.narrow(xproj, 0, t, 1)?;
        let rec = g.matmul(h, params.w_hh)?;
        let gates = g.add(xt, rec)?;
        let i_pre = g.narrow(gates, 1, 0, hidden)?;
        let f_pre = g.narrow(gates, 1, hidden, hidden)?;
        let c_pre = g.narrow(gates, 1, 2 * hidden, hidden)?;
        let o_pre = g.narrow(gates, 1, 3 * hidden, hidden)?;
        let i = g.sigmoid(i_pre)?;
        let f = g.sigmoid(f_pre)?;
        let cand = g.tanh(c_pre)?;
        let o = g.sigmoid(o_pre)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let squashed = g.tanh(c)?;
        h = g.mul(o, squashed)?;
    }
    Ok((h, c))
}

/// Runs both directions over `seq: [C, L]` with independent parameters;
/// returns the final forward and backward hidden states, each `[hidden]`.
pub fn blstm_forward<T: Scalar>(
    g: &mut Graph<T>,
    seq: Var,
    fwd: LstmParams,
    bwd: LstmParams,
    hidden: usize,
) -> Result<(Var, Var), ModelError> {
    let len = *g.shape(seq).get(1).ok_or_else(|| ModelError::Shape {
        what: "blstm input".into(),
        expected: vec![0, 0],
        got: g.shape(seq).to_vec(),
    })?;
    if len == 0 {
        return Err(ModelError::Shape {
            what: "blstm input must have at least one step".into(),
            expected: vec![],
            got: g.shape(seq).to_vec(),
        });
    }
    let rows = g.transpose(seq)?;
    let (hf, _) = lstm_final_state(g, rows, fwd, hidden, 0..len)?;
    let (hb, _) = lstm_final_state(g, rows, bwd, hidden, (0..len).rev())?;
    Ok((g.reshape(hf, &[hidden])?, g.reshape(hb, &[hidden])?))
}

/// Inertial encoder on a recorded `[d_sensor, T]` window; returns `[2 × hidden]`.
pub fn imu_encoder<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &EncoderConfig,
    window: Var,
) -> Result<Var, ModelError> {
    expect_shape("imu window", &[cfg.d_sensor, cfg.imu_window], g.shape(window))?;
    let conv = g.conv1d(
        window,
        p.get("imu.conv.weight")?,
        Some(p.get("imu.conv.bias")?),
        cfg.imu_conv_stride,
        cfg.imu_conv_padding(),
    )?;
    let feats = g.relu(conv)?;
    let fwd = LstmParams::from_bound(p, "imu.lstm.fwd")?;
    let bwd = LstmParams::from_bound(p, "imu.lstm.bwd")?;
    let (hf, hb) = blstm_forward(g, feats, fwd, bwd, cfg.lstm_hidden)?;
    Ok(g.concat(&[hf, hb], 0)?)
}

/// Records an image as a graph constant in the graph's precision.
pub fn image_var<T: Scalar>(g: &mut Graph<T>, img: &ImageTensor) -> Var {
    g.constant(img.tensor().cast())
}

pub fn imu_var<T: Scalar>(g: &mut Graph<T>, win: &ImuWindow) -> Var {
    g.constant(win.tensor().cast())
}

/// f(I) for a single image.
pub fn encode_image<T: Scalar>(
    img: &ImageTensor,
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
) -> Result<Embedding<T>, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = image_var(&mut g, img);
    let e = vision_encoder(&mut g, &bound, cfg, x)?;
    Ok(Embedding {
        data: g.value(e).clone(),
        modality: Modality::Vision,
    })
}

/// f(S) for a single IMU window.
pub fn encode_imu<T: Scalar>(
    win: &ImuWindow,
    params: &ModelParams<T>,
    cfg: &EncoderConfig,
) -> Result<Embedding<T>, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = imu_var(&mut g, win);
    let e = imu_encoder(&mut g, &bound, cfg, x)?;
    Ok(Embedding {
        data: g.value(e).clone(),
        modality: Modality::Inertial,
    })
}
