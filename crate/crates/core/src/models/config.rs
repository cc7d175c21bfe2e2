use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block widths of the segmentor encoder at full scale.
pub const ENCODER_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
/// Block widths of the segmentor decoder at full scale (before the 1x1 head).
pub const DECODER_WIDTHS: [usize; 4] = [512, 256, 128, 64];
/// Block widths of the discriminator at full scale.
pub const DISCRIMINATOR_WIDTHS: [usize; 6] = [64, 128, 256, 512, 512, 1024];

/// Architecture hyperparameters shared by segmentor and discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side of the square input; must be divisible by 16. Full scale is 416.
    pub image_size: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    /// Multiplier on the full-scale widths (1.0 = 64...1024).
    pub width_scale: f64,
    pub leaky_slope: f64,
    pub seed: u64,
    /// Number of stride-2 discriminator blocks; resolved by the builder when
    /// absent so the pre-pooling map stays at least 2x2.
    pub disc_depth: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            in_channels: 3,
            n_classes: 4,
            width_scale: 0.125,
            leaky_slope: 0.2,
            seed: 0,
            disc_depth: None,
        }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            image_size: 416,
            width_scale: 1.0,
            ..Default::default()
        }
    }

    pub fn scaled(&self, base: usize) -> usize {
        (self.width_scale * base as f64).round() as usize
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        ENCODER_WIDTHS.iter().map(|&w| self.scaled(w)).collect()
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        DECODER_WIDTHS.iter().map(|&w| self.scaled(w)).collect()
    }

    /// Largest depth (up to 6) whose last stride-2 output is still >= 2x2.
    pub fn auto_disc_depth(&self) -> usize {
        let mut size = self.image_size;
        let mut depth = 0;
        while depth < DISCRIMINATOR_WIDTHS.len() {
            let next = size.div_ceil(2);
            if next < 2 {
                break;
            }
            size = next;
            depth += 1;
        }
        depth
    }

    pub fn resolved_disc_depth(&self) -> usize {
        self.disc_depth.unwrap_or_else(|| self.auto_disc_depth())
    }

    pub fn discriminator_widths(&self) -> Vec<usize> {
        DISCRIMINATOR_WIDTHS[..self.resolved_disc_depth()]
            .iter()
            .map(|&w| self.scaled(w))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "model.image_size {} must be a positive multiple of 16",
                self.image_size
            )));
        }
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) || self.scaled(64) < 4 {
            return Err(Error::Config(format!(
                "model.width_scale {} gives a first-block width below 4",
                self.width_scale
            )));
        }
        if self.in_channels == 0 || self.n_classes < 2 {
            return Err(Error::Config(
                "model.in_channels must be >= 1 and model.n_classes >= 2".into(),
            ));
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return Err(Error::Config(format!(
                "model.leaky_slope {} outside [0, 1)",
                self.leaky_slope
            )));
        }
        if let Some(d) = self.disc_depth {
            if d == 0 || d > self.auto_disc_depth() {
                return Err(Error::Config(format!(
                    "model.disc_depth {d} must be in 1..={}",
                    self.auto_disc_depth()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_widths() {
        let cfg = ModelConfig::full_scale();
        assert_eq!(cfg.encoder_widths(), vec![64, 128, 256, 512, 1024]);
        assert_eq!(cfg.decoder_widths(), vec![512, 256, 128, 64]);
        assert_eq!(cfg.discriminator_widths(), vec![64, 128, 256, 512, 512, 1024]);
    }

    #[test]
    fn desk_widths() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.encoder_widths(), vec![8, 16, 32, 64, 128]);
        // 64 -> 32 -> 16 -> 8 -> 4 -> 2; a sixth block would give 1x1.
        assert_eq!(cfg.auto_disc_depth(), 5);
        let tiny = ModelConfig {
            image_size: 16,
            width_scale: 1.0 / 16.0,
            ..Default::default()
        };
        assert_eq!(tiny.encoder_widths(), vec![4, 8, 16, 32, 64]);
        assert_eq!(tiny.auto_disc_depth(), 3);
    }

    #[test]
    fn invalid_configs() {
        let bad_size = ModelConfig {
            image_size: 40,
            ..Default::default()
        };
        assert!(bad_size.validate().is_err());
        let too_thin = ModelConfig {
            width_scale: 1.0 / 32.0,
            ..Default::default()
        };
        assert!(too_thin.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::full_scale().validate().is_ok());
    }
}
