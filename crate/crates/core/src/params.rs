//! Named parameter store for the whole model.
//!
//! Weights of linear maps are stored as `[in, out]` and applied to row
//! vectors (`x · W + b`).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Mode, ModelConfig};
use crate::error::ModelError;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `(-a, a)` with `a = sqrt(1 / fan_in)`.
    Uniform { fan_in: usize },
    /// He uniform for weights feeding a relu: `a = sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: shape.to_vec(),
        init,
    }
}

fn uniform(fan_in: usize) -> Init {
    Init::Uniform { fan_in }
}

pub const VISION_QUERY: &str = "xattn.vision_query";
pub const IMU_QUERY: &str = "xattn.imu_query";

/// Pooling projection name for a modality prefix (`"vision"` / `"imu"`).
pub fn pool_name(cfg: &ModelConfig, modality: &str) -> String {
    if cfg.fusion.share_pool_projection {
        "pool.weight".to_string()
    } else {
        format!("pool.{modality}.weight")
    }
}

/// Every parameter the configured model owns, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let enc = &cfg.encoder;
    let fu = &cfg.fusion;
    let (n, d) = (fu.tokens, fu.d_latent);
    let mut out = Vec::new();

    let mut prev = enc.image_channels;
    for (i, &w) in enc.vision_widths.iter().enumerate() {
        out.push(spec(format!("vision.block{i}.weight"), &[w, prev, 3, 3], Init::HeUniform { fan_in: prev * 9 }));
        out.push(spec(format!("vision.block{i}.bias"), &[w], Init::Zeros));
        prev = w;
    }
    out.push(spec("vision.proj.weight", &[prev, enc.d_vis], uniform(prev)));
    out.push(spec("vision.proj.bias", &[enc.d_vis], uniform(prev)));

    let fused = cfg.mode == Mode::Fused;
    if fused {
        let (ch, k, h) = (enc.imu_conv_channels, enc.imu_conv_kernel, enc.lstm_hidden);
        out.push(spec("imu.conv.weight", &[ch, enc.d_sensor, k], Init::HeUniform { fan_in: enc.d_sensor * k }));
        out.push(spec("imu.conv.bias", &[ch], Init::Zeros));
        for dir in ["fwd", "bwd"] {
            out.push(spec(format!("imu.lstm.{dir}.w_ih"), &[ch, 4 * h], uniform(h)));
            out.push(spec(format!("imu.lstm.{dir}.w_hh"), &[h, 4 * h], uniform(h)));
            out.push(spec(format!("imu.lstm.{dir}.bias"), &[4 * h], uniform(h)));
        }
    }

    let mut tokenizer = |prefix: &str, width: usize| {
        out.push(spec(format!("tok.{prefix}.ln.gain"), &[width], Init::Ones));
        out.push(spec(format!("tok.{prefix}.ln.bias"), &[width], Init::Zeros));
        out.push(spec(format!("tok.{prefix}.weight"), &[width, n * d], uniform(width)));
        out.push(spec(format!("tok.{prefix}.bias"), &[n * d], uniform(width)));
    };
    tokenizer("vision", enc.d_vis);
    if fused {
        tokenizer("imu", enc.d_imu());
        let e = fu.ffn_expansion * d;
        for block in [VISION_QUERY, IMU_QUERY] {
            for p in ["wq", "wk", "wv", "wo"] {
                out.push(spec(format!("{block}.{p}"), &[d, d], uniform(d)));
            }
            for p in ["bq", "bk", "bv", "bo"] {
                out.push(spec(format!("{block}.{p}"), &[d], uniform(d)));
            }
            out.push(spec(format!("{block}.ln1.gain"), &[d], Init::Ones));
            out.push(spec(format!("{block}.ln1.bias"), &[d], Init::Zeros));
            out.push(spec(format!("{block}.ffn.w1"), &[d, e], uniform(d)));
            out.push(spec(format!("{block}.ffn.b1"), &[e], uniform(d)));
            out.push(spec(format!("{block}.ffn.w2"), &[e, d], uniform(e)));
            out.push(spec(format!("{block}.ffn.b2"), &[d], uniform(e)));
            out.push(spec(format!("{block}.ln2.gain"), &[d], Init::Ones));
            out.push(spec(format!("{block}.ln2.bias"), &[d], Init::Zeros));
        }
    }

    let mut pools = vec![pool_name(cfg, "vision")];
    if fused {
        pools.push(pool_name(cfg, "imu"));
    }
    pools.dedup();
    for p in pools {
        out.push(spec(p, &[d, 1], uniform(d)));
    }

    if fused {
        out.push(spec("gate.weight", &[2 * d, d], uniform(2 * d)));
        out.push(spec("gate.bias", &[d], uniform(2 * d)));
    }
    out.push(spec("head.weight", &[d, cfg.num_classes], uniform(d)));
    out.push(spec("head.bias", &[cfg.num_classes], uniform(d)));
    out
}

/// The complete set of named, shaped model tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization following [`param_specs`].
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|s| {
                let numel: usize = s.shape.iter().product();
                let data: Vec<T> = match s.init {
                    Init::Ones => vec![T::one(); numel],
                    Init::Zeros => vec![T::zero(); numel],
                    Init::Uniform { fan_in } => {
                        let a = (1.0 / fan_in as f64).sqrt();
                        (0..numel).map(|_| T::lit(rng.gen_range(-a..a))).collect()
                    }
                    Init::HeUniform { fan_in } => {
                        let a = (6.0 / fan_in as f64).sqrt();
                        (0..numel).map(|_| T::lit(rng.gen_range(-a..a))).collect()
                    }
                };
                let t = Tensor::new(s.shape, data).expect("spec shape matches data");
                (s.name, t)
            })
            .collect();
        Self { tensors }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = param_specs(cfg)
            .into_iter()
            .map(|s| (s.name, Tensor::zeros(&s.shape)))
            .collect();
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that names and shapes match what `cfg` expects.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let specs = param_specs(cfg);
        for s in &specs {
            let t = self.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(ModelError::Shape {
                    what: s.name.clone(),
                    expected: s.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !specs.iter().any(|s| &s.name == *k))
        {
            return Err(ModelError::Shape {
                what: format!("unexpected parameter `{extra}`"),
                expected: vec![],
                got: self.tensors[extra].shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Records every parameter on `g`, as differentiable leaves when
    /// `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter handles recorded on one graph.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::tiny();
        let a = ModelParams::<f32>::init(&cfg, 7);
        let b = ModelParams::<f32>::init(&cfg, 7);
        let c = ModelParams::<f32>::init(&cfg, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = a.get("gate.weight").unwrap();
        let bound = (1.0 / 8.0f32).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < bound));
        assert!(a.get("tok.vision.ln.gain").unwrap().data().iter().all(|&v| v == 1.0));
        a.check_against(&cfg).unwrap();
    }

    #[test]
    fn vision_only_has_no_inertial_branch() {
        let mut cfg = ModelConfig::default();
        cfg.mode = Mode::VisionOnly;
        let p = ModelParams::<f32>::zeros(&cfg);
        assert!(p.names().all(|n| !n.starts_with("imu.")
            && !n.starts_with("tok.imu")
            && !n.starts_with("xattn")
            && !n.starts_with("gate")));
        assert!(p.contains("pool.weight"));
    }

    #[test]
    fn per_modality_pooling_override() {
        let mut cfg = ModelConfig::tiny();
        cfg.fusion.share_pool_projection = false;
        let p = ModelParams::<f64>::zeros(&cfg);
        assert!(p.contains("pool.vision.weight") && p.contains("pool.imu.weight"));
        assert!(!p.contains("pool.weight"));
    }

    #[test]
    fn shape_conflict_names_the_tensor() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::<f32>::zeros(&cfg);
        let mut other = cfg.clone();
        other.fusion.d_latent = 6;
        match p.check_against(&other) {
            Err(ModelError::Shape { what, .. }) => assert!(what.contains('.')),
            r => panic!("unexpected {r:?}"),
        }
    }
}
