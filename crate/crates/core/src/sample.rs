//! Paired observations: an RGB frame, an IMU window, and their labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::tensor::Tensor;

/// Road surface classes, in label-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurfaceClass {
    Asphalt,
    BelgianBlocks,
    OffRoad,
}

impl SurfaceClass {
    pub const ALL: [SurfaceClass; 3] = [
        SurfaceClass::Asphalt,
        SurfaceClass::BelgianBlocks,
        SurfaceClass::OffRoad,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SurfaceClass::Asphalt => "Asphalt",
            SurfaceClass::BelgianBlocks => "BelgianBlocks",
            SurfaceClass::OffRoad => "OffRoad",
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

impl fmt::Display for SurfaceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SurfaceClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown class {s:?}"))
    }
}

/// Capture condition of a recording segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Day,
    Night,
    Rain,
    NightRain,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Day,
        Condition::Night,
        Condition::Rain,
        Condition::NightRain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Day => "day",
            Condition::Night => "night",
            Condition::Rain => "rain",
            Condition::NightRain => "night_rain",
        }
    }

    pub fn is_night(self) -> bool {
        matches!(self, Condition::Night | Condition::NightRain)
    }

    pub fn is_rain(self) -> bool {
        matches!(self, Condition::Rain | Condition::NightRain)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown condition {s:?}"))
    }
}

/// `[C, H, W]` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
}

impl ImageTensor {
    /// Wraps a `[C, H, W]` tensor, clamping values into `[0, 1]`.
    pub fn new(data: Tensor<f32>) -> Result<Self, ModelError> {
        if data.rank() != 3 {
            return Err(ModelError::Shape {
                what: "image".into(),
                expected: vec![3, 0, 0],
                got: data.shape().to_vec(),
            });
        }
        let data = data.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Ok(Self { data })
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut v = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    v.push(f(ch, y, x));
                }
            }
        }
        Self::new(Tensor::new(vec![c, h, w], v).expect("sized by construction"))
            .expect("rank 3 by construction")
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn pixels(&self) -> &[f32] {
        self.data.data()
    }

    pub fn mean(&self) -> f32 {
        let d = self.data.data();
        (d.iter().map(|&v| f64::from(v)).sum::<f64>() / d.len().max(1) as f64) as f32
    }
}

/// `[d_sensor, T]` inertial window.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuWindow {
    data: Tensor<f32>,
    sample_rate: f32,
}

impl ImuWindow {
    pub fn new(data: Tensor<f32>, sample_rate: f32) -> Result<Self, ModelError> {
        match data.shape() {
            [d, t] if *d > 0 && *t > 0 => {}
            other => {
                return Err(ModelError::Shape {
                    what: "imu window".into(),
                    expected: vec![6, 0],
                    got: other.to_vec(),
                })
            }
        }
        if !data.is_finite() {
            return Err(ModelError::Tensor(crate::tensor::TensorError::NonFinite {
                op: "imu window",
            }));
        }
        Ok(Self { data, sample_rate })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> f32 {
        self.sample_rate
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let t = self.len();
        &self.data.data()[c * t..(c + 1) * t]
    }

    pub fn values(&self) -> &[f32] {
        self.data.data()
    }
}

/// One paired observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor,
    pub imu: ImuWindow,
    pub label: SurfaceClass,
    pub segment_id: usize,
    pub condition: Condition,
}
