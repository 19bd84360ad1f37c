//! Online augmentation for training images and IMU windows.
//!
//! Image pipeline: resize, center crop, rotation, motion blur, color
//! jitter, then six environmental effects each drawn independently with
//! probability `p_env`. Evaluation uses [`preprocess`] (resize and crop).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ConfigError;
use crate::sample::{ImageTensor, ImuWindow};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("image {height}x{width} is smaller than the {target}x{target} crop")]
    TooSmall {
        height: usize,
        width: usize,
        target: usize,
    },
    #[error("invalid scale range [{0}, {1}]: bounds must be positive and ordered")]
    ScaleRange(f32, f32),
    #[error("magnitude warp needs at least 2 knots, got {0}")]
    Knots(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side length after the resize step.
    pub resize_to: usize,
    /// Side length of the center crop fed to the model.
    pub crop_to: usize,
    /// Rotation drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f32,
    /// Longest motion-blur kernel; 1 disables the blur.
    pub motion_blur_max: usize,
    /// Multipliers drawn from `1 ± range`.
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub p_env: f32,
    /// Additive brightness shift drawn from `±env_brightness`.
    pub env_brightness: f32,
    pub shadow_darkness: f32,
    pub rain_streaks: usize,
    pub fog_max: f32,
    pub flare_intensity: f32,
    pub speed_blur_max: usize,
    pub imu_jitter_sigma: f32,
    pub imu_scale: [f32; 2],
    pub warp_knots: usize,
    pub warp_sigma: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            resize_to: 72,
            crop_to: 64,
            rotation_deg: 10.0,
            motion_blur_max: 5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            p_env: 0.7,
            env_brightness: 0.15,
            shadow_darkness: 0.5,
            rain_streaks: 30,
            fog_max: 0.4,
            flare_intensity: 0.5,
            speed_blur_max: 7,
            imu_jitter_sigma: 0.02,
            imu_scale: [0.9, 1.1],
            warp_knots: 4,
            warp_sigma: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No randomness at all: resize and crop only.
    pub fn degenerate(resize_to: usize, crop_to: usize) -> Self {
        Self {
            resize_to,
            crop_to,
            rotation_deg: 0.0,
            motion_blur_max: 1,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            p_env: 0.0,
            imu_jitter_sigma: 0.0,
            imu_scale: [1.0, 1.0],
            warp_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.crop_to == 0 || self.resize_to < self.crop_to {
            return Err(ConfigError::invalid(
                "augment.resize_to",
                "must be at least crop_to, which must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.p_env) {
            return Err(ConfigError::invalid("augment.p_env", "must lie in [0, 1]"));
        }
        let non_negative = [
            ("augment.rotation_deg", self.rotation_deg),
            ("augment.brightness", self.brightness),
            ("augment.contrast", self.contrast),
            ("augment.saturation", self.saturation),
            ("augment.env_brightness", self.env_brightness),
            ("augment.fog_max", self.fog_max),
            ("augment.flare_intensity", self.flare_intensity),
            ("augment.imu_jitter_sigma", self.imu_jitter_sigma),
            ("augment.warp_sigma", self.warp_sigma),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::invalid(key, "must be finite and non-negative"));
            }
        }
        for (key, v) in [
            ("augment.brightness", self.brightness),
            ("augment.contrast", self.contrast),
            ("augment.saturation", self.saturation),
        ] {
            if v >= 1.0 {
                return Err(ConfigError::invalid(key, "multiplier range must stay below 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.shadow_darkness) {
            return Err(ConfigError::invalid("augment.shadow_darkness", "must lie in [0, 1]"));
        }
        if self.motion_blur_max == 0 || self.speed_blur_max == 0 {
            return Err(ConfigError::invalid("augment.motion_blur_max", "kernel lengths must be ≥ 1"));
        }
        let [lo, hi] = self.imu_scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(ConfigError::invalid("augment.imu_scale", "bounds must be positive and ordered"));
        }
        if self.warp_knots < 2 {
            return Err(ConfigError::invalid("augment.warp_knots", "must be at least 2"));
        }
        Ok(())
    }
}

/// Mutable `[C, H, W]` working buffer.
#[derive(Debug, Clone)]
struct Canvas {
    c: usize,
    h: usize,
    w: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn of(img: &ImageTensor) -> Self {
        Self {
            c: img.channels(),
            h: img.height(),
            w: img.width(),
            px: img.pixels().to_vec(),
        }
    }

    fn blank(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            px: vec![0.0; c * h * w],
        }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.px[(c * self.h + y) * self.w + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.px[(c * self.h + y) * self.w + x] = v;
    }

    /// Bilinear sample with edge clamping.
    fn sample(&self, c: usize, y: f32, x: f32) -> f32 {
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let top = self.at(c, y0, x0) + fx * (self.at(c, y0, x1) - self.at(c, y0, x0));
        let bot = self.at(c, y1, x0) + fx * (self.at(c, y1, x1) - self.at(c, y1, x0));
        top + fy * (bot - top)
    }

    fn finish(self) -> ImageTensor {
        let t = Tensor::new(vec![self.c, self.h, self.w], self.px).expect("canvas is sized");
        ImageTensor::new(t).expect("canvas is rank 3")
    }
}

/// Bilinear resize to `size × size` (pixel-center aligned).
pub fn resize(img: &ImageTensor, size: usize) -> ImageTensor {
    if img.height() == size && img.width() == size {
        return img.clone();
    }
    let src = Canvas::of(img);
    let mut out = Canvas::blank(src.c, size, size);
    let sy = src.h as f32 / size as f32;
    let sx = src.w as f32 / size as f32;
    for c in 0..src.c {
        for y in 0..size {
            for x in 0..size {
                let v = src.sample(c, (y as f32 + 0.5) * sy - 0.5, (x as f32 + 0.5) * sx - 0.5);
                out.set(c, y, x, v);
            }
        }
    }
    out.finish()
}

pub fn center_crop(img: &ImageTensor, size: usize) -> Result<ImageTensor, AugmentError> {
    let (h, w) = (img.height(), img.width());
    if h < size || w < size {
        return Err(AugmentError::TooSmall {
            height: h,
            width: w,
            target: size,
        });
    }
    if h == size && w == size {
        return Ok(img.clone());
    }
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    Ok(ImageTensor::from_fn(img.channels(), size, size, |c, y, x| {
        img.get(c, y + oy, x + ox)
    }))
}

/// Resize then center crop; the evaluation-time transform.
pub fn preprocess(img: &ImageTensor, cfg: &AugmentConfig) -> Result<ImageTensor, AugmentError> {
    center_crop(&resize(img, cfg.resize_to), cfg.crop_to)
}

/// Rotation about the image center with bilinear sampling and edge clamp.
pub fn rotate(img: &ImageTensor, degrees: f32) -> ImageTensor {
    if degrees == 0.0 {
        return img.clone();
    }
    let src = Canvas::of(img);
    let (s, co) = degrees.to_radians().sin_cos();
    let cy = (src.h as f32 - 1.0) / 2.0;
    let cx = (src.w as f32 - 1.0) / 2.0;
    let mut out = Canvas::blank(src.c, src.h, src.w);
    for y in 0..src.h {
        for x in 0..src.w {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            let ys = cy + co * dy - s * dx;
            let xs = cx + s * dy + co * dx;
            for c in 0..src.c {
                out.set(c, y, x, src.sample(c, ys, xs));
            }
        }
    }
    out.finish()
}

/// Averages `length` samples along a line through each pixel at `angle_deg`.
pub fn motion_blur(img: &ImageTensor, length: usize, angle_deg: f32) -> ImageTensor {
    if length <= 1 {
        return img.clone();
    }
    let src = Canvas::of(img);
    let (s, co) = angle_deg.to_radians().sin_cos();
    let half = (length as f32 - 1.0) / 2.0;
    let mut out = Canvas::blank(src.c, src.h, src.w);
    for c in 0..src.c {
        for y in 0..src.h {
            for x in 0..src.w {
                let mut acc = 0.0;
                for k in 0..length {
                    let t = k as f32 - half;
                    acc += src.sample(c, y as f32 + t * s, x as f32 + t * co);
                }
                out.set(c, y, x, acc / length as f32);
            }
        }
    }
    out.finish()
}

/// Brightness multiplier, contrast about the image mean, and saturation
/// about per-pixel luma. A factor of exactly 1 skips its step.
pub fn color_jitter(img: &ImageTensor, brightness: f32, contrast: f32, saturation: f32) -> ImageTensor {
    let mut cv = Canvas::of(img);
    if brightness != 1.0 {
        cv.px.iter_mut().for_each(|v| *v *= brightness);
    }
    if contrast != 1.0 {
        let mean = cv.px.iter().sum::<f32>() / cv.px.len().max(1) as f32;
        cv.px.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean);
    }
    if saturation != 1.0 && cv.c == 3 {
        for y in 0..cv.h {
            for x in 0..cv.w {
                let luma = 0.299 * cv.at(0, y, x) + 0.587 * cv.at(1, y, x) + 0.114 * cv.at(2, y, x);
                for c in 0..3 {
                    let v = cv.at(c, y, x);
                    cv.set(c, y, x, (v - luma) * saturation + luma);
                }
            }
        }
    }
    cv.finish()
}

/// Adds `delta` to every pixel before clamping.
pub fn brightness_shift(img: &ImageTensor, delta: f32) -> ImageTensor {
    let mut cv = Canvas::of(img);
    cv.px.iter_mut().for_each(|v| *v += delta);
    cv.finish()
}

fn inside(poly: &[(f32, f32)], x: f32, y: f32) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// Darkens pixels inside the polygon (pixel coordinates `(x, y)`).
pub fn shadow(img: &ImageTensor, polygon: &[(f32, f32)], darkness: f32) -> ImageTensor {
    let mut cv = Canvas::of(img);
    if polygon.len() < 3 {
        return img.clone();
    }
    for y in 0..cv.h {
        for x in 0..cv.w {
            if inside(polygon, x as f32 + 0.5, y as f32 + 0.5) {
                for c in 0..cv.c {
                    let v = cv.at(c, y, x);
                    cv.set(c, y, x, v * (1.0 - darkness));
                }
            }
        }
    }
    cv.finish()
}

/// Light streaks of `length` pixels starting at each `(x, y)`, slanted by
/// `slant` pixels of x per pixel of y.
pub fn rain(img: &ImageTensor, starts: &[(f32, f32)], length: usize, slant: f32) -> ImageTensor {
    let mut cv = Canvas::of(img);
    for &(x0, y0) in starts {
        for k in 0..length {
            let y = y0 + k as f32;
            let x = x0 + slant * k as f32;
            if y < 0.0 || x < 0.0 {
                continue;
            }
            let (yi, xi) = (y as usize, x as usize);
            if yi >= cv.h || xi >= cv.w {
                continue;
            }
            for c in 0..cv.c {
                let v = cv.at(c, yi, xi);
                cv.set(c, yi, xi, 0.5 * v + 0.5 * 0.85);
            }
        }
    }
    cv.finish()
}

/// Alpha blend toward a light gray.
pub fn fog(img: &ImageTensor, alpha: f32) -> ImageTensor {
    let mut cv = Canvas::of(img);
    cv.px.iter_mut().for_each(|v| *v = (1.0 - alpha) * *v + alpha * 0.8);
    cv.finish()
}

/// Additive Gaussian glow centered at `(x, y)`.
pub fn flare(img: &ImageTensor, center: (f32, f32), radius: f32, intensity: f32) -> ImageTensor {
    let mut cv = Canvas::of(img);
    let r2 = 2.0 * radius * radius;
    for y in 0..cv.h {
        for x in 0..cv.w {
            let d2 = (x as f32 - center.0).powi(2) + (y as f32 - center.1).powi(2);
            let add = intensity * (-d2 / r2).exp();
            for c in 0..cv.c {
                let v = cv.at(c, y, x);
                cv.set(c, y, x, v + add);
            }
        }
    }
    cv.finish()
}

/// Horizontal blur standing in for forward-motion smear.
pub fn speed_blur(img: &ImageTensor, length: usize) -> ImageTensor {
    motion_blur(img, length, 0.0)
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, range: f32) -> f32 {
    if range > 0.0 {
        rng.gen_range(-range..=range)
    } else {
        0.0
    }
}

/// Full training-time image augmentation.
pub fn augment_image<R: Rng + ?Sized>(
    img: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<ImageTensor, AugmentError> {
    let mut out = preprocess(img, cfg)?;
    out = rotate(&out, symmetric(rng, cfg.rotation_deg));
    if cfg.motion_blur_max > 1 {
        let len = rng.gen_range(1..=cfg.motion_blur_max);
        let angle = rng.gen_range(0.0..180.0f32);
        out = motion_blur(&out, len, angle);
    }
    let b = 1.0 + symmetric(rng, cfg.brightness);
    let c = 1.0 + symmetric(rng, cfg.contrast);
    let s = 1.0 + symmetric(rng, cfg.saturation);
    out = color_jitter(&out, b, c, s);

    let size = out.width() as f32;
    let fire = |rng: &mut R| cfg.p_env > 0.0 && rng.gen::<f32>() < cfg.p_env;
    if fire(rng) {
        out = brightness_shift(&out, symmetric(rng, cfg.env_brightness));
    }
    if fire(rng) {
        let corners = rng.gen_range(3..=5);
        let poly: Vec<(f32, f32)> = (0..corners)
            .map(|_| (rng.gen_range(0.0..size), rng.gen_range(0.0..size)))
            .collect();
        out = shadow(&out, &poly, cfg.shadow_darkness * rng.gen_range(0.5..=1.0));
    }
    if fire(rng) && cfg.rain_streaks > 0 {
        let slant = rng.gen_range(-0.3..0.3);
        let starts: Vec<(f32, f32)> = (0..cfg.rain_streaks)
            .map(|_| (rng.gen_range(0.0..size), rng.gen_range(-4.0..size)))
            .collect();
        let len = (size / 8.0).max(2.0) as usize;
        out = rain(&out, &starts, len, slant);
    }
    if fire(rng) && cfg.fog_max > 0.0 {
        out = fog(&out, rng.gen_range(0.0..=cfg.fog_max));
    }
    if fire(rng) && cfg.flare_intensity > 0.0 {
        let center = (rng.gen_range(0.0..size), rng.gen_range(0.0..size / 2.0));
        out = flare(&out, center, size / 6.0, rng.gen_range(0.0..=cfg.flare_intensity));
    }
    if fire(rng) && cfg.speed_blur_max > 1 {
        out = speed_blur(&out, rng.gen_range(1..=cfg.speed_blur_max));
    }
    Ok(out)
}

fn rebuild(win: &ImuWindow, values: Vec<f32>) -> ImuWindow {
    let t = Tensor::new(win.tensor().shape().to_vec(), values).expect("same shape");
    ImuWindow::new(t, win.sample_rate()).expect("finite by construction")
}

/// Adds i.i.d. `N(0, σ²)` noise to every element.
pub fn jitter<R: Rng + ?Sized>(win: &ImuWindow, sigma: f32, rng: &mut R) -> ImuWindow {
    if sigma == 0.0 {
        return win.clone();
    }
    let normal = Normal::new(0.0f32, sigma).expect("sigma is finite and non-negative");
    let v = win.values().iter().map(|&x| x + normal.sample(rng)).collect();
    rebuild(win, v)
}

/// One uniform factor per channel from `[lo, hi]`.
pub fn scale<R: Rng + ?Sized>(win: &ImuWindow, range: [f32; 2], rng: &mut R) -> Result<ImuWindow, AugmentError> {
    let [lo, hi] = range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(AugmentError::ScaleRange(lo, hi));
    }
    let t = win.len();
    let mut v = win.values().to_vec();
    for ch in v.chunks_mut(t) {
        let f = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        ch.iter_mut().for_each(|x| *x *= f);
    }
    Ok(rebuild(win, v))
}

/// Piecewise-linear envelope of length `len` through evenly spaced knots.
pub fn warp_envelope(len: usize, knots: &[f32]) -> Vec<f32> {
    let k = knots.len();
    if len == 1 || k == 1 {
        return vec![knots[0]; len];
    }
    let span = (len - 1) as f32 / (k - 1) as f32;
    (0..len)
        .map(|t| {
            let pos = t as f32 / span;
            let i = (pos.floor() as usize).min(k - 2);
            let f = pos - i as f32;
            knots[i] + f * (knots[i + 1] - knots[i])
        })
        .collect()
}

/// Multiplies every channel by a smooth random envelope with knots drawn
/// from `N(1, σ²)`; returns the warped window and the envelope.
pub fn magnitude_warp<R: Rng + ?Sized>(
    win: &ImuWindow,
    knots: usize,
    sigma: f32,
    rng: &mut R,
) -> Result<(ImuWindow, Vec<f32>), AugmentError> {
    if knots < 2 {
        return Err(AugmentError::Knots(knots));
    }
    let values: Vec<f32> = if sigma == 0.0 {
        vec![1.0; knots]
    } else {
        let normal = Normal::new(1.0f32, sigma).expect("sigma is finite and non-negative");
        (0..knots).map(|_| normal.sample(rng)).collect()
    };
    let env = warp_envelope(win.len(), &values);
    let t = win.len();
    let mut v = win.values().to_vec();
    for ch in v.chunks_mut(t) {
        ch.iter_mut().zip(&env).for_each(|(x, e)| *x *= e);
    }
    Ok((rebuild(win, v), env))
}

/// Jitter, per-channel scaling, then magnitude warping.
pub fn augment_imu<R: Rng + ?Sized>(
    win: &ImuWindow,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<ImuWindow, AugmentError> {
    let out = jitter(win, cfg.imu_jitter_sigma, rng);
    let out = scale(&out, cfg.imu_scale, rng)?;
    Ok(magnitude_warp(&out, cfg.warp_knots, cfg.warp_sigma, rng)?.0)
}
