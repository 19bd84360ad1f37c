//! Model configuration. Every struct rejects unknown keys when
//! deserialized so that typos in run configurations fail loudly.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Square model input size (after resize and center crop).
    pub image_size: usize,
    pub image_channels: usize,
    /// Output widths of the 3×3 conv / relu / 2×2 average-pool blocks.
    pub vision_widths: Vec<usize>,
    pub d_vis: usize,
    /// Sensor channels per tick: 6 per IMU (accel xyz, gyro xyz).
    pub d_sensor: usize,
    /// Window length in ticks.
    pub imu_window: usize,
    pub imu_conv_channels: usize,
    pub imu_conv_kernel: usize,
    pub imu_conv_stride: usize,
    pub lstm_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_channels: 3,
            vision_widths: vec![8, 16, 32, 64],
            d_vis: 128,
            d_sensor: 6,
            imu_window: 200,
            imu_conv_channels: 16,
            imu_conv_kernel: 7,
            imu_conv_stride: 2,
            lstm_hidden: 32,
        }
    }
}

impl EncoderConfig {
    /// Inertial embedding width: both BLSTM directions concatenated.
    pub fn d_imu(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn imu_conv_padding(&self) -> usize {
        self.imu_conv_kernel / 2
    }

    /// Sequence length seen by the BLSTM.
    pub fn imu_steps(&self) -> usize {
        let padded = self.imu_window + 2 * self.imu_conv_padding();
        (padded - self.imu_conv_kernel) / self.imu_conv_stride + 1
    }

    /// Spatial extent after every pooling block.
    pub fn vision_feature_size(&self) -> usize {
        self.vision_widths
            .iter()
            .fold(self.image_size, |s, _| s / 2)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("image_size", self.image_size),
            ("image_channels", self.image_channels),
            ("d_vis", self.d_vis),
            ("d_sensor", self.d_sensor),
            ("imu_window", self.imu_window),
            ("imu_conv_channels", self.imu_conv_channels),
            ("imu_conv_kernel", self.imu_conv_kernel),
            ("imu_conv_stride", self.imu_conv_stride),
            ("lstm_hidden", self.lstm_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::invalid(name, "must be at least 1"));
            }
        }
        if self.vision_widths.is_empty() || self.vision_widths.contains(&0) {
            return Err(ConfigError::invalid(
                "vision_widths",
                "needs at least one block and positive widths",
            ));
        }
        if self.vision_feature_size() == 0 {
            return Err(ConfigError::invalid(
                "vision_widths",
                format!(
                    "{} pooling blocks do not fit a {}px image",
                    self.vision_widths.len(),
                    self.image_size
                ),
            ));
        }
        if self.imu_conv_kernel > self.imu_window + 2 * self.imu_conv_padding() {
            return Err(ConfigError::invalid(
                "imu_conv_kernel",
                "longer than the padded window",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Tokens per modality.
    pub tokens: usize,
    pub d_latent: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `d_latent`.
    pub ffn_expansion: usize,
    /// One pooling projection for both modalities.
    pub share_pool_projection: bool,
    pub layer_norm_eps: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tokens: 6,
            d_latent: 64,
            heads: 4,
            ffn_expansion: 2,
            share_pool_projection: true,
            layer_norm_eps: 1e-5,
        }
    }
}

impl FusionConfig {
    pub fn head_dim(&self) -> usize {
        self.d_latent / self.heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("tokens", self.tokens),
            ("d_latent", self.d_latent),
            ("heads", self.heads),
            ("ffn_expansion", self.ffn_expansion),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(name, "must be at least 1"));
            }
        }
        if self.d_latent % self.heads != 0 {
            return Err(ConfigError::invalid(
                "heads",
                format!("{} heads do not divide d_latent {}", self.heads, self.d_latent),
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(ConfigError::invalid("layer_norm_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Fused,
    VisionOnly,
}

impl std::str::FromStr for Mode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fused" => Ok(Mode::Fused),
            "vision-only" | "vision_only" => Ok(Mode::VisionOnly),
            other => Err(ConfigError::invalid(
                "mode",
                format!("unknown mode {other:?} (expected fused or vision-only)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub num_classes: usize,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            num_classes: 3,
            mode: Mode::Fused,
        }
    }
}

impl ModelConfig {
    /// The small shapes used for gradient checking.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                image_size: 8,
                image_channels: 3,
                vision_widths: vec![3, 4],
                d_vis: 8,
                d_sensor: 6,
                imu_window: 20,
                imu_conv_channels: 4,
                imu_conv_kernel: 3,
                imu_conv_stride: 2,
                lstm_hidden: 3,
            },
            fusion: FusionConfig {
                tokens: 2,
                d_latent: 4,
                heads: 2,
                ..FusionConfig::default()
            },
            num_classes: 3,
            mode: Mode::Fused,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        if self.num_classes < 2 {
            return Err(ConfigError::invalid("num_classes", "must be at least 2"));
        }
        Ok(())
    }
}
