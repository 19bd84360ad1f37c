//! End-to-end forward pass for both model modes.

use crate::config::{Mode, ModelConfig};
use crate::encoders::{image_var, imu_encoder, imu_var, vision_encoder};
use crate::error::ModelError;
use crate::fusion::{attention_pool, classify, fuse_tokens, tokenize, FusionParams, TokenizerParams};
use crate::params::{pool_name, Bound, ModelParams};
use crate::sample::{ImageTensor, ImuWindow};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Graph handles of one forward pass. Inertial fields are `None` in
/// vision-only mode.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    pub probs: Var,
    pub z: Var,
    pub vstar: Var,
    pub astar: Option<Var>,
    pub gate: Option<Var>,
    pub vision_tokens: Var,
    pub imu_tokens: Option<Var>,
    /// Per-head attention maps, vision-query direction then IMU-query.
    pub attention: Vec<Var>,
}

/// Records the forward pass. `imu` is never read in vision-only mode.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    image: Var,
    imu: Option<Var>,
) -> Result<ForwardVars, ModelError> {
    let fu = &cfg.fusion;
    let f_vis = vision_encoder(g, p, &cfg.encoder, image)?;
    let v = tokenize(
        g,
        f_vis,
        TokenizerParams::from_bound(p, "vision")?,
        fu.tokens,
        fu.d_latent,
        fu.layer_norm_eps,
    )?;
    match cfg.mode {
        Mode::VisionOnly => {
            let (vstar, _) = attention_pool(g, v, p.get(&pool_name(cfg, "vision"))?)?;
            let (logits, probs) = classify(g, vstar, p.get("head.weight")?, p.get("head.bias")?)?;
            Ok(ForwardVars {
                logits,
                probs,
                z: vstar,
                vstar,
                astar: None,
                gate: None,
                vision_tokens: v,
                imu_tokens: None,
                attention: Vec::new(),
            })
        }
        Mode::Fused => {
            let imu = imu.ok_or_else(|| ModelError::MissingParam("imu input".into()))?;
            let f_imu = imu_encoder(g, p, &cfg.encoder, imu)?;
            let a = tokenize(
                g,
                f_imu,
                TokenizerParams::from_bound(p, "imu")?,
                fu.tokens,
                fu.d_latent,
                fu.layer_norm_eps,
            )?;
            let fp = FusionParams::from_bound(p, cfg)?;
            let out = fuse_tokens(g, v, a, &fp, fu)?;
            let mut attention = out.attended.vision_maps.clone();
            attention.extend(out.attended.imu_maps.iter().copied());
            Ok(ForwardVars {
                logits: out.logits,
                probs: out.probs,
                z: out.z,
                vstar: out.vstar,
                astar: Some(out.astar),
                gate: Some(out.gate),
                vision_tokens: v,
                imu_tokens: Some(a),
                attention,
            })
        }
    }
}

/// Concrete values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput<T> {
    pub probs: Tensor<T>,
    pub logits: Tensor<T>,
    pub z: Tensor<T>,
    pub vstar: Tensor<T>,
    pub astar: Option<Tensor<T>>,
    pub gate: Option<Tensor<T>>,
    pub attention: Vec<Tensor<T>>,
}

impl<T: Scalar> FusionOutput<T> {
    pub fn predicted(&self) -> usize {
        argmax(self.probs.data())
    }

    /// Mean over the gate vector; `None` in vision-only mode.
    pub fn mean_gate(&self) -> Option<f64> {
        self.gate.as_ref().map(|g| {
            g.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / g.numel().max(1) as f64
        })
    }
}

pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Evaluation-time forward pass on one paired observation.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    image: &ImageTensor,
    imu: Option<&ImuWindow>,
) -> Result<FusionOutput<T>, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = image_var(&mut g, image);
    let s = match cfg.mode {
        Mode::Fused => Some(imu_var(
            &mut g,
            imu.ok_or_else(|| ModelError::MissingParam("imu input".into()))?,
        )),
        Mode::VisionOnly => None,
    };
    let fv = forward(&mut g, &bound, cfg, x, s)?;
    Ok(FusionOutput {
        probs: g.value(fv.probs).clone(),
        logits: g.value(fv.logits).clone(),
        z: g.value(fv.z).clone(),
        vstar: g.value(fv.vstar).clone(),
        astar: fv.astar.map(|v| g.value(v).clone()),
        gate: fv.gate.map(|v| g.value(v).clone()),
        attention: fv.attention.iter().map(|&v| g.value(v).clone()).collect(),
    })
}
