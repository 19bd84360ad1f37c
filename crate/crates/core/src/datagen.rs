//! Synthetic paired road-surface data.
//!
//! Each class has a procedural texture and a vibration recipe. Samples
//! come in contiguous segments sharing class, condition and vehicle speed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, stream_seed};
use crate::sample::{Condition, ImageTensor, ImuWindow, Sample, SurfaceClass};
use crate::tensor::Tensor;

/// Class priors of the reference recordings (Asphalt, BelgianBlocks, OffRoad).
pub const DEFAULT_PRIORS: [f64; 3] = [0.7967, 0.0855, 0.1178];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatagenError {
    #[error("priors must be {expected} finite non-negative values summing to 1, got {got:?}")]
    Priors { expected: usize, got: Vec<f64> },
    #[error("segment length must be at least 1")]
    SegmentLength,
    #[error("condition probabilities must be non-negative and sum to 1, got {0:?}")]
    Conditions(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Low-variance gray with a lane stripe.
    Asphalt,
    /// Running-bond brick grid with dark mortar lines.
    Bricks,
    /// Brown low-frequency noise with scattered stones.
    Dirt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VibrationRecipe {
    pub base_sigma: f32,
    /// Zero disables the periodic impulses.
    pub impulse_amplitude: f32,
    /// Expected random spikes per tick.
    pub spike_rate: f32,
    pub spike_amplitude: f32,
    /// Multiplier on the base noise of the gyro channels.
    pub broadband_gain: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub label: SurfaceClass,
    pub texture: Texture,
    pub vibration: VibrationRecipe,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub image_size: usize,
    pub imu_window: usize,
    pub sample_rate: f32,
    pub d_sensor: usize,
    pub asphalt_sigma: f32,
    pub blocks_sigma: f32,
    pub blocks_amplitude: f32,
    /// Distance between block joints in meters.
    pub block_length: f32,
    /// Segment speed drawn uniformly from this range (m/s).
    pub speed_range: [f32; 2],
    pub offroad_sigma: f32,
    pub offroad_spike_rate: f32,
    pub offroad_spike_amplitude: f32,
    /// Probabilities of day, night, rain, night_rain.
    pub condition_probs: [f64; 4],
    pub night_factor: f32,
    pub rain_streaks: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            imu_window: 200,
            sample_rate: 400.0,
            d_sensor: 6,
            asphalt_sigma: 0.05,
            blocks_sigma: 0.05,
            blocks_amplitude: 1.0,
            block_length: 0.2,
            speed_range: [5.0, 12.0],
            offroad_sigma: 0.4,
            offroad_spike_rate: 0.01,
            offroad_spike_amplitude: 1.5,
            condition_probs: [0.5, 0.2, 0.2, 0.1],
            night_factor: 0.25,
            rain_streaks: 40,
        }
    }
}

impl DatagenConfig {
    pub fn class_spec(&self, label: SurfaceClass, prior: f64) -> ClassSpec {
        let (texture, vibration) = match label {
            SurfaceClass::Asphalt => (
                Texture::Asphalt,
                VibrationRecipe {
                    base_sigma: self.asphalt_sigma,
                    impulse_amplitude: 0.0,
                    spike_rate: 0.0,
                    spike_amplitude: 0.0,
                    broadband_gain: 1.0,
                },
            ),
            SurfaceClass::BelgianBlocks => (
                Texture::Bricks,
                VibrationRecipe {
                    base_sigma: self.blocks_sigma,
                    impulse_amplitude: self.blocks_amplitude,
                    spike_rate: 0.0,
                    spike_amplitude: 0.0,
                    broadband_gain: 1.0,
                },
            ),
            SurfaceClass::OffRoad => (
                Texture::Dirt,
                VibrationRecipe {
                    base_sigma: self.offroad_sigma,
                    impulse_amplitude: 0.0,
                    spike_rate: self.offroad_spike_rate,
                    spike_amplitude: self.offroad_spike_amplitude,
                    broadband_gain: 0.5,
                },
            ),
        };
        ClassSpec {
            label,
            texture,
            vibration,
            prior,
        }
    }

    pub fn class_specs(&self, priors: &[f64]) -> Result<Vec<ClassSpec>, DatagenError> {
        check_priors(priors)?;
        Ok(SurfaceClass::ALL
            .iter()
            .zip(priors)
            .map(|(&c, &p)| self.class_spec(c, p))
            .collect())
    }

    /// Ticks between block impulses at `speed` m/s (at least 1).
    pub fn impulse_period(&self, speed: f32) -> usize {
        ((self.sample_rate * self.block_length / speed).round() as usize).max(1)
    }
}

fn check_priors(priors: &[f64]) -> Result<(), DatagenError> {
    let ok = priors.len() == SurfaceClass::ALL.len()
        && priors.iter().all(|p| p.is_finite() && *p >= 0.0)
        && (priors.iter().sum::<f64>() - 1.0).abs() < 1e-6;
    if ok {
        Ok(())
    } else {
        Err(DatagenError::Priors {
            expected: SurfaceClass::ALL.len(),
            got: priors.to_vec(),
        })
    }
}

/// Per-sample generation request.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub id: String,
    pub label: SurfaceClass,
    pub condition: Condition,
    pub segment_id: usize,
    pub speed: f32,
}

/// `[d_sensor, T]` window following the class vibration recipe. Channel 2
/// (vertical acceleration) carries the block impulses at full amplitude
/// and channel 3 (roll rate) at half amplitude.
pub fn gen_imu<R: Rng + ?Sized>(label: SurfaceClass, speed: f32, rng: &mut R, cfg: &DatagenConfig) -> ImuWindow {
    let recipe = cfg.class_spec(label, 0.0).vibration;
    let (c, t) = (cfg.d_sensor, cfg.imu_window);
    let mut v = vec![0.0f32; c * t];
    if recipe.base_sigma > 0.0 {
        let normal = Normal::new(0.0, recipe.base_sigma).expect("sigma is finite");
        for ch in 0..c {
            let gain = if ch % 6 >= 3 { recipe.broadband_gain } else { 1.0 };
            for x in &mut v[ch * t..(ch + 1) * t] {
                *x = gain * normal.sample(rng);
            }
        }
    }
    if recipe.impulse_amplitude != 0.0 {
        let period = cfg.impulse_period(speed);
        let phase = rng.gen_range(0..period);
        for tick in (phase..t).step_by(period) {
            for ch in (2..c).step_by(6) {
                v[ch * t + tick] += recipe.impulse_amplitude;
            }
            for ch in (3..c).step_by(6) {
                v[ch * t + tick] += 0.5 * recipe.impulse_amplitude;
            }
        }
    }
    if recipe.spike_rate > 0.0 {
        for tick in 0..t {
            if rng.gen::<f32>() < recipe.spike_rate {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let ch = rng.gen_range(0..c);
                v[ch * t + tick] += sign * recipe.spike_amplitude;
            }
        }
    }
    let data = Tensor::new(vec![c, t], v).expect("sized by construction");
    ImuWindow::new(data, cfg.sample_rate).expect("finite by construction")
}

/// Smooth value noise in roughly `[-1, 1]` on a `cells × cells` lattice.
fn value_noise<R: Rng + ?Sized>(size: usize, cells: usize, rng: &mut R) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let step = size as f32 / cells as f32;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32 / step, x as f32 / step);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            let at = |yy: usize, xx: usize| lattice[yy.min(cells) * n + xx.min(cells)];
            let top = at(y0, x0) + tx * (at(y0, x0 + 1) - at(y0, x0));
            let bot = at(y0 + 1, x0) + tx * (at(y0 + 1, x0 + 1) - at(y0 + 1, x0));
            out.push(top + ty * (bot - top));
        }
    }
    out
}

fn texture_rgb<R: Rng + ?Sized>(texture: Texture, size: usize, rng: &mut R) -> [Vec<f32>; 3] {
    let n = size * size;
    let mut rgb = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let grain = Normal::new(0.0f32, 0.03).expect("constant sigma");
    match texture {
        Texture::Asphalt => {
            let base = rng.gen_range(0.33..0.45f32);
            let stripe_x = rng.gen_range(size / 4..3 * size / 4);
            let stripe_w = (size / 20).max(2);
            let dash = rng.gen_range(0..size);
            let yellow = rng.gen::<bool>();
            for y in 0..size {
                for x in 0..size {
                    let g = base + grain.sample(rng);
                    let on_stripe =
                        x >= stripe_x && x < stripe_x + stripe_w && (y + dash) % (size / 2) < size / 3;
                    let i = y * size + x;
                    if on_stripe {
                        rgb[0][i] = 0.9;
                        rgb[1][i] = if yellow { 0.8 } else { 0.9 };
                        rgb[2][i] = if yellow { 0.2 } else { 0.9 };
                    } else {
                        rgb[0][i] = g;
                        rgb[1][i] = g;
                        rgb[2][i] = g + 0.01;
                    }
                }
            }
        }
        Texture::Bricks => {
            let bh = (size / 8).max(3);
            let bw = (size * 3 / 16).max(4);
            let (oy, ox) = (rng.gen_range(0..bh), rng.gen_range(0..bw));
            let rows = size / bh + 2;
            let cols = size / bw + 3;
            let tint: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-0.08..0.08)).collect();
            for y in 0..size {
                for x in 0..size {
                    let yy = y + oy;
                    let row = yy / bh;
                    let xx = x + ox + if row % 2 == 1 { bw / 2 } else { 0 };
                    let col = xx / bw;
                    let mortar = yy % bh == 0 || xx % bw == 0;
                    let i = y * size + x;
                    if mortar {
                        let m = 0.15 + grain.sample(rng);
                        rgb[0][i] = m;
                        rgb[1][i] = m;
                        rgb[2][i] = m;
                    } else {
                        let t = tint[(row % rows) * cols + col % cols] + grain.sample(rng);
                        rgb[0][i] = 0.58 + t;
                        rgb[1][i] = 0.58 + t;
                        rgb[2][i] = 0.62 + t;
                    }
                }
            }
        }
        Texture::Dirt => {
            let low = value_noise(size, 4, rng);
            for i in 0..n {
                let m = 0.15 * low[i] + grain.sample(rng);
                rgb[0][i] = 0.48 + m;
                rgb[1][i] = 0.34 + 0.8 * m;
                rgb[2][i] = 0.2 + 0.6 * m;
            }
            let stones = rng.gen_range(8..16);
            for _ in 0..stones {
                let cy = rng.gen_range(0..size) as f32;
                let cx = rng.gen_range(0..size) as f32;
                let r = rng.gen_range(1.0..3.0f32);
                let shade = rng.gen_range(0.6..0.8f32);
                for y in 0..size {
                    for x in 0..size {
                        if (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2) <= r * r {
                            let i = y * size + x;
                            rgb[0][i] = shade;
                            rgb[1][i] = shade;
                            rgb[2][i] = shade * 0.95;
                        }
                    }
                }
            }
        }
    }
    rgb
}

/// Class texture modified by the capture condition.
pub fn gen_image<R: Rng + ?Sized>(
    label: SurfaceClass,
    condition: Condition,
    rng: &mut R,
    cfg: &DatagenConfig,
) -> ImageTensor {
    let size = cfg.image_size;
    let texture = cfg.class_spec(label, 0.0).texture;
    let mut rgb = texture_rgb(texture, size, rng);
    if condition.is_rain() {
        let len = (size / 8).max(2);
        for _ in 0..cfg.rain_streaks {
            let x0 = rng.gen_range(0..size) as f32;
            let y0 = rng.gen_range(0..size);
            for k in 0..len {
                let (y, x) = (y0 + k, (x0 + 0.25 * k as f32) as usize);
                if y < size && x < size {
                    for ch in &mut rgb {
                        ch[y * size + x] = 0.5 * ch[y * size + x] + 0.45;
                    }
                }
            }
        }
    }
    if condition.is_night() {
        for ch in &mut rgb {
            ch.iter_mut().for_each(|v| *v *= cfg.night_factor);
        }
    }
    let data = Tensor::new(vec![3, size, size], rgb.concat()).expect("sized by construction");
    ImageTensor::new(data).expect("rank 3")
}

pub fn gen_sample<R: Rng + ?Sized>(spec: &SampleSpec, rng: &mut R, cfg: &DatagenConfig) -> Sample {
    let image = gen_image(spec.label, spec.condition, rng, cfg);
    let imu = gen_imu(spec.label, spec.speed, rng, cfg);
    Sample {
        id: spec.id.clone(),
        image,
        imu,
        label: spec.label,
        segment_id: spec.segment_id,
        condition: spec.condition,
    }
}

/// Splits `total` units by `weights` with the largest-remainder rule.
pub fn quota(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if total == 0 || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// The request list for a dataset: segment classes follow the priors by
/// quota and are then shuffled; conditions and speeds are drawn per segment.
pub fn plan_dataset(
    n: usize,
    priors: &[f64],
    seed: u64,
    segment_length: usize,
    cfg: &DatagenConfig,
) -> Result<Vec<SampleSpec>, DatagenError> {
    check_priors(priors)?;
    if segment_length == 0 {
        return Err(DatagenError::SegmentLength);
    }
    let cp = cfg.condition_probs;
    if cp.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (cp.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(DatagenError::Conditions(cp.to_vec()));
    }
    let segments = n.div_ceil(segment_length);
    let mut labels: Vec<SurfaceClass> = quota(segments, priors)
        .into_iter()
        .zip(SurfaceClass::ALL)
        .flat_map(|(k, c)| std::iter::repeat(c).take(k))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "segments"));
    labels.shuffle(&mut rng);
    let [lo, hi] = cfg.speed_range;
    let mut specs = Vec::with_capacity(n);
    for (seg, &label) in labels.iter().enumerate() {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut condition = Condition::Day;
        for (c, p) in Condition::ALL.iter().zip(cp) {
            acc += p;
            if u < acc {
                condition = *c;
                break;
            }
        }
        let speed = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let start = seg * segment_length;
        for i in start..(start + segment_length).min(n) {
            specs.push(SampleSpec {
                id: format!("s{i:05}"),
                label,
                condition,
                segment_id: seg,
                speed,
            });
        }
    }
    Ok(specs)
}

/// Generates every planned sample; each draws from its own seeded stream.
pub fn gen_dataset(
    n: usize,
    priors: &[f64],
    seed: u64,
    segment_length: usize,
    cfg: &DatagenConfig,
) -> Result<Vec<Sample>, DatagenError> {
    let base = stream_seed(seed, "samples");
    Ok(plan_dataset(n, priors, seed, segment_length, cfg)?
        .iter()
        .map(|spec| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, &spec.id, 0));
            gen_sample(spec, &mut rng, cfg)
        })
        .collect())
}
