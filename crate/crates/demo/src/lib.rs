//! Browser bindings: synthetic sample rendering, augmentation preview and a
//! gate explorer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use roadfusion::augment::{augment_image, AugmentConfig};
use roadfusion::datagen::{gen_sample, DatagenConfig, SampleSpec};
use roadfusion::fusion::gate_fuse;
use roadfusion::sample::{Condition, ImageTensor, Sample, SurfaceClass};
use roadfusion::tensor::{Graph, Tensor};

fn class(i: u32) -> Result<SurfaceClass, JsError> {
    SurfaceClass::ALL
        .get(i as usize)
        .copied()
        .ok_or_else(|| JsError::new(&format!("class index {i} out of range")))
}

fn condition(i: u32) -> Result<Condition, JsError> {
    Condition::ALL
        .get(i as usize)
        .copied()
        .ok_or_else(|| JsError::new(&format!("condition index {i} out of range")))
}

fn sample(class_idx: u32, cond_idx: u32, speed: f32, seed: u32) -> Result<Sample, JsError> {
    let spec = SampleSpec {
        id: "demo".into(),
        label: class(class_idx)?,
        condition: condition(cond_idx)?,
        segment_id: 0,
        speed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    Ok(gen_sample(&spec, &mut rng, &DatagenConfig::default()))
}

/// RGBA bytes, row-major, for a canvas `ImageData`.
fn rgba(img: &ImageTensor) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

#[wasm_bindgen]
pub struct DemoSample {
    image: Vec<u8>,
    size: usize,
    vertical: Vec<f32>,
}

#[wasm_bindgen]
impl DemoSample {
    pub fn rgba(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Vertical acceleration channel.
    pub fn vertical(&self) -> Vec<f32> {
        self.vertical.clone()
    }
}

/// Generates one synthetic camera frame and IMU window.
#[wasm_bindgen]
pub fn render_sample(class_idx: u32, cond_idx: u32, speed: f32, seed: u32) -> Result<DemoSample, JsError> {
    let s = sample(class_idx, cond_idx, speed, seed)?;
    Ok(DemoSample {
        image: rgba(&s.image),
        size: s.image.height(),
        vertical: s.imu.channel(2).to_vec(),
    })
}

/// The same frame after one draw of the training-time image augmentation.
/// `p_env` sets the chance of each environmental effect.
#[wasm_bindgen]
pub fn augment_preview(class_idx: u32, cond_idx: u32, seed: u32, aug_seed: u32, p_env: f32) -> Result<Vec<u8>, JsError> {
    let s = sample(class_idx, cond_idx, 8.0, seed)?;
    let cfg = AugmentConfig {
        p_env: p_env.clamp(0.0, 1.0),
        ..AugmentConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(aug_seed));
    let out = augment_image(&s.image, &cfg, &mut rng).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(rgba(&out))
}

/// Gate fusion of two pooled vectors with gate weights `w` (`2d × d`,
/// row-major) and bias `b`. Returns `g` followed by `z`.
#[wasm_bindgen]
pub fn gate_mix(v: Vec<f32>, a: Vec<f32>, w: Vec<f32>, b: Vec<f32>) -> Result<Vec<f32>, JsError> {
    let d = v.len();
    let err = |e: &dyn std::fmt::Display| JsError::new(&e.to_string());
    let mut g = Graph::<f32>::new();
    let vv = g.constant(Tensor::new(vec![d], v).map_err(|e| err(&e))?);
    let av = g.constant(Tensor::new(vec![a.len()], a).map_err(|e| err(&e))?);
    let wv = g.constant(Tensor::new(vec![2 * d, d], w).map_err(|e| err(&e))?);
    let bv = g.constant(Tensor::new(vec![d], b).map_err(|e| err(&e))?);
    let (z, gate) = gate_fuse(&mut g, vv, av, wv, bv).map_err(|e| err(&e))?;
    let mut out = g.value(gate).data().to_vec();
    out.extend_from_slice(g.value(z).data());
    Ok(out)
}
