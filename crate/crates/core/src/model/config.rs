use serde::{Deserialize, Serialize};

use crate::nn::recurrent::CellKind;

use super::ModelError;

/// Number of conv + pool stages in the image encoder (and transposed-conv
/// stages in the decoder). Each halves (doubles) the spatial size.
pub const CONV_STAGES: usize = 3;

/// Architecture and optimization settings of the convolutional-recurrent VAE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `(height, width)` of input frames.
    pub image_hw: (usize, usize),
    pub channels: usize,
    pub conv_kernel: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub bidirectional: bool,
    pub embed_dim: usize,
    pub mid_dim: usize,
    pub latent_dim: usize,
    pub lambda_text: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Recurrent cell used by both text encoder and decoder.
    pub cell: CellKind,
    pub teacher_forcing: bool,
    /// Weight of an optional KL term. Zero reproduces the plain
    /// reconstruction objective; anything else is an extension.
    pub kl_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_hw: (120, 200),
            channels: 32,
            conv_kernel: 3,
            lstm_hidden: 512,
            lstm_layers: 2,
            bidirectional: true,
            embed_dim: 300,
            mid_dim: 4000,
            latent_dim: 1000,
            lambda_text: 3.0,
            lr: 1e-4,
            grad_clip: 0.01,
            weight_decay: 0.01,
            epochs: 500,
            batch_size: 16,
            seed: 0,
            cell: CellKind::Lstm,
            teacher_forcing: true,
            kl_weight: 0.0,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests: 3×8×8 images, 4 channels, hidden 8,
    /// embedding 5.
    pub fn tiny() -> Self {
        Self {
            image_hw: (8, 8),
            channels: 4,
            lstm_hidden: 8,
            embed_dim: 5,
            mid_dim: 12,
            latent_dim: 6,
            batch_size: 4,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Spatial size after the last pooling stage.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let f = 1 << CONV_STAGES;
        (self.image_hw.0 / f, self.image_hw.1 / f)
    }

    pub fn image_feature_dim(&self) -> usize {
        let (h, w) = self.bottleneck_hw();
        self.channels * h * w
    }

    pub fn text_feature_dim(&self) -> usize {
        self.lstm_layers * self.directions() * self.lstm_hidden
    }

    /// Width of the concatenated image + text feature vector.
    pub fn fused_dim(&self) -> usize {
        self.image_feature_dim() + self.text_feature_dim()
    }

    /// Width of the layer that holds mean and log standard deviation.
    pub fn latent_layer_dim(&self) -> usize {
        2 * self.latent_dim
    }

    pub fn image_len(&self) -> usize {
        3 * self.image_hw.0 * self.image_hw.1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let f = 1 << CONV_STAGES;
        let (h, w) = self.image_hw;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return bad(format!("image_hw {h}×{w} must be positive multiples of {f}"));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("embed_dim", self.embed_dim),
            ("mid_dim", self.mid_dim),
            ("latent_dim", self.latent_dim),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return bad("lr and grad_clip must be positive, weight_decay non-negative".into());
        }
        if !(self.lambda_text >= 0.0) || !(self.kl_weight >= 0.0) {
            return bad("lambda_text and kl_weight must be non-negative".into());
        }
        Ok(())
    }

    /// Parameter count implied by the configuration, computed without
    /// allocating the model.
    pub fn param_count(&self) -> usize {
        let k2 = self.conv_kernel * self.conv_kernel;
        let c = self.channels;
        let dense = |i: usize, o: usize| i * o + o;
        let gates = match self.cell {
            CellKind::Lstm => 4,
            CellKind::Rnn => 1,
        };
        let rnn = |i: usize, h: usize| gates * h * (i + h) + gates * h;
        let hd = self.lstm_hidden;

        let mut n = 0;
        // image encoder
        n += 3 * c * k2 + c + (CONV_STAGES - 1) * (c * c * k2 + c);
        // text encoder
        for l in 0..self.lstm_layers {
            let input = if l == 0 { self.embed_dim } else { self.directions() * hd };
            n += self.directions() * rnn(input, hd);
        }
        n += 2 * self.image_feature_dim() + 2 * self.text_feature_dim();
        n += dense(self.fused_dim(), self.mid_dim) + dense(self.mid_dim, self.latent_layer_dim());
        // decoder
        n += dense(self.latent_dim, self.mid_dim) + dense(self.mid_dim, self.fused_dim());
        n += CONV_STAGES * ((c * c * 9 + c) + (c * c * k2 + c)) + (c * 3 * k2 + 3);
        let init_states = if self.cell == CellKind::Lstm { 2 } else { 1 };
        n += init_states * dense(self.text_feature_dim(), self.lstm_layers * hd);
        for l in 0..self.lstm_layers {
            let input = if l == 0 { self.embed_dim } else { hd };
            n += rnn(input, hd);
        }
        n += dense(hd, self.embed_dim);
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dimensions() {
        let c = ModelConfig::default();
        assert_eq!(c.bottleneck_hw(), (15, 25));
        assert_eq!(c.image_feature_dim(), 12_000);
        assert_eq!(c.text_feature_dim(), 2_048);
        assert_eq!(c.fused_dim(), 14_048);
        assert_eq!(c.latent_layer_dim(), 2_000);
        c.validate().unwrap();
    }

    #[test]
    fn tiny_fused_dim() {
        // 4·1·1 + 2·2·8
        assert_eq!(ModelConfig::tiny().fused_dim(), 36);
    }

    #[test]
    fn rejects_non_divisible_images() {
        let c = ModelConfig { image_hw: (12, 8), ..ModelConfig::tiny() };
        assert!(c.validate().is_err());
    }
}
