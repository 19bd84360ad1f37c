//! Whole-model gradient check in float64.

use rand::Rng;

use crate::config::ModelConfig;
use crate::model::forward;
use crate::params::{Bound, ModelParams};
use crate::rng::sample_rng;
use crate::tensor::{gradcheck_sampled, FaultyAdjoint, GradcheckError, GradcheckReport, Tensor};
use crate::trainer::cross_entropy;

pub const GRADCHECK_EPS: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Differentiates the cross-entropy of one random sample with respect to
/// every parameter and both inputs, through encoders and fusion.
pub fn model_gradcheck(
    cfg: &ModelConfig,
    seed: u64,
    fault: Option<FaultyAdjoint>,
    per_param: usize,
) -> Result<GradcheckReport, GradcheckError> {
    let params = ModelParams::<f64>::init(cfg, seed);
    let mut rng = sample_rng(seed, "gradcheck", 0);
    let s = cfg.encoder.image_size;
    let (c, t) = (cfg.encoder.d_sensor, cfg.encoder.imu_window);
    let image = (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
    let imu = (0..c * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let label = rng.gen_range(0..cfg.num_classes);

    let mut named: Vec<(String, Tensor<f64>)> = params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    named.push(("input.image".into(), Tensor::new(vec![3, s, s], image)?));
    named.push(("input.imu".into(), Tensor::new(vec![c, t], imu)?));
    let names: Vec<String> = named.iter().map(|(k, _)| k.clone()).collect();
    let n = names.len();

    gradcheck_sampled(
        |g, vars| {
            let mut b = Bound::default();
            for (name, v) in names[..n - 2].iter().zip(vars) {
                b.insert(name.clone(), *v);
            }
            let fv = forward(g, &b, cfg, vars[n - 2], Some(vars[n - 1])).map_err(|e| e.into_tensor())?;
            cross_entropy(g, fv.logits, label, None).map_err(|e| e.into_tensor())
        },
        &named,
        GRADCHECK_EPS,
        GRADCHECK_TOL,
        fault,
        per_param,
    )
}
