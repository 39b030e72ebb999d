use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::CrossShapeMode;

/// Default Gaussian widths, in units of the normalized shape radius.
pub const SIGMA_LADDER: [f64; 4] = [0.05, 0.1, 0.5, 1.0];

/// Kind of one attention head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HeadKind {
    /// Learned query/key dot-product attention with rotary keys.
    DotProduct,
    /// Fixed Gaussian attention using the width at this index of `sigmas`.
    Gaussian(usize),
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::DotProduct => write!(f, "dot"),
            HeadKind::Gaussian(i) => write!(f, "gauss:{i}"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dot" => Ok(HeadKind::DotProduct),
            _ => s
                .strip_prefix("gauss:")
                .and_then(|i| i.parse().ok())
                .map(HeadKind::Gaussian)
                .ok_or_else(|| format!("unknown head kind {s:?} (expected \"dot\" or \"gauss:<index>\")")),
        }
    }
}

impl TryFrom<String> for HeadKind {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<HeadKind> for String {
    fn from(h: HeadKind) -> Self {
        h.to_string()
    }
}

/// How each head's attention is carried into the same head of the next layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Add the previous layer's post-softmax weights to the current logits.
    #[default]
    PostSoftmax,
    /// Add the previous layer's pre-softmax scores (score accumulation).
    PreSoftmax,
    /// No residual attention.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_hidden: usize,
    /// `layers × heads` head kinds.
    pub head_layout: Vec<Vec<HeadKind>>,
    pub sigmas: Vec<f64>,
    pub sigma_learnable: bool,
    pub rope: bool,
    pub rope_base: f64,
    pub residual: ResidualMode,
    pub cross_shape: CrossShapeMode,
    /// Input vector of the separator token.
    pub sep: [f64; 3],
}

impl Default for ModelConfig {
    /// Six layers of eight dot-product heads at `d = 512`.
    fn default() -> Self {
        Self::with_gaussian_heads(512, 8, 6, 0, &SIGMA_LADDER)
    }
}

impl ModelConfig {
    /// `gaussian` of the `heads` heads in every layer are Gaussian, placed last
    /// and indexed into `sigmas` in order.
    pub fn with_gaussian_heads(
        d: usize,
        heads: usize,
        layers: usize,
        gaussian: usize,
        sigmas: &[f64],
    ) -> Self {
        let row = gaussian_row(heads, gaussian);
        Self {
            d,
            heads,
            layers,
            ff_hidden: 4 * d,
            head_layout: vec![row; layers],
            sigmas: if gaussian > 0 { sigmas.to_vec() } else { Vec::new() },
            sigma_learnable: false,
            rope: true,
            rope_base: 10000.0,
            residual: ResidualMode::PostSoftmax,
            cross_shape: CrossShapeMode::Masked,
            sep: [0.0; 3],
        }
    }

    /// Gaussian heads only in `layer`; every other layer is all dot-product.
    pub fn with_gaussian_layer(
        d: usize,
        heads: usize,
        layers: usize,
        layer: usize,
        gaussian: usize,
        sigmas: &[f64],
    ) -> Self {
        let mut cfg = Self::with_gaussian_heads(d, heads, layers, 0, sigmas);
        cfg.sigmas = sigmas.to_vec();
        cfg.head_layout[layer] = gaussian_row(heads, gaussian);
        cfg
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn gaussian_head_count(&self) -> usize {
        self.head_layout
            .iter()
            .flatten()
            .filter(|h| matches!(h, HeadKind::Gaussian(_)))
            .count()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.heads == 0 || self.layers == 0 || self.ff_hidden == 0 {
            return Err("d, heads, layers and ff_hidden must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.d < 2 {
            return Err("d must be at least 2 for layer normalization".into());
        }
        if self.rope && !self.head_dim().is_multiple_of(2) {
            return Err(format!(
                "rotary encoding needs an even head dimension, got {}",
                self.head_dim()
            ));
        }
        if self.head_layout.len() != self.layers {
            return Err(format!(
                "head_layout has {} layers, expected {}",
                self.head_layout.len(),
                self.layers
            ));
        }
        for (l, row) in self.head_layout.iter().enumerate() {
            if row.len() != self.heads {
                return Err(format!("layer {l} lists {} heads, expected {}", row.len(), self.heads));
            }
            for h in row {
                if let HeadKind::Gaussian(i) = h {
                    if *i >= self.sigmas.len() {
                        return Err(format!(
                            "layer {l} references sigma index {i} but only {} sigmas are set",
                            self.sigmas.len()
                        ));
                    }
                }
            }
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(format!("sigma values must be positive, got {s}"));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if self.sep.iter().any(|v| !v.is_finite()) {
            return Err("sep vector must be finite".into());
        }
        Ok(())
    }

    /// Exact number of trainable scalars for this configuration.
    pub fn parameter_count(&self) -> usize {
        let (d, dh, ff) = (self.d, self.head_dim(), self.ff_hidden);
        let projection = d * dh + dh;
        let mut total = (3 * d + d) + (d * 3 + 3);
        for row in &self.head_layout {
            for h in row {
                total += match h {
                    HeadKind::DotProduct => 3 * projection,
                    HeadKind::Gaussian(_) => projection,
                };
            }
            total += d * d + d; // output projection of the concatenated heads
            total += d * ff + ff + ff * d + d; // feed-forward
            total += 4 * d; // two layer norms
        }
        if self.sigma_learnable {
            total += self.sigmas.len();
        }
        total
    }
}

fn gaussian_row(heads: usize, gaussian: usize) -> Vec<HeadKind> {
    let gaussian = gaussian.min(heads);
    (0..heads)
        .map(|i| {
            if i >= heads - gaussian {
                HeadKind::Gaussian(i - (heads - gaussian))
            } else {
                HeadKind::DotProduct
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_kind_text_form() {
        assert_eq!("dot".parse::<HeadKind>().unwrap(), HeadKind::DotProduct);
        assert_eq!("gauss:3".parse::<HeadKind>().unwrap(), HeadKind::Gaussian(3));
        assert!("gauss:x".parse::<HeadKind>().is_err());
        assert_eq!(HeadKind::Gaussian(2).to_string(), "gauss:2");
    }

    #[test]
    fn gaussian_heads_are_placed_last() {
        let cfg = ModelConfig::with_gaussian_heads(512, 8, 6, 4, &SIGMA_LADDER);
        assert_eq!(
            cfg.head_layout[0],
            vec![
                HeadKind::DotProduct,
                HeadKind::DotProduct,
                HeadKind::DotProduct,
                HeadKind::DotProduct,
                HeadKind::Gaussian(0),
                HeadKind::Gaussian(1),
                HeadKind::Gaussian(2),
                HeadKind::Gaussian(3)
            ]
        );
        assert_eq!(cfg.gaussian_head_count(), 24);
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_failures() {
        let mut cfg = ModelConfig::with_gaussian_heads(30, 4, 1, 0, &[]);
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::with_gaussian_heads(12, 2, 1, 1, &[0.1]);
        cfg.head_layout[0][1] = HeadKind::Gaussian(5);
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::with_gaussian_heads(12, 2, 1, 1, &[-0.1]);
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::with_gaussian_heads(6, 2, 1, 0, &[]);
        assert!(cfg.validate().is_err(), "odd head dim with rope");
        cfg.rope = false;
        cfg.validate().unwrap();
    }

    #[test]
    fn hand_counted_toy_model() {
        // d=8, h=2, one layer, all dot-product, ff = 32
        // input 3*8+8 = 32; output 8*3+3 = 27
        // heads: 2 * 3 * (8*4 + 4) = 216
        // out proj 64 + 8 = 72; ff 8*32+32 + 32*8+8 = 552; norms 32
        let cfg = ModelConfig::with_gaussian_heads(8, 2, 1, 0, &[]);
        assert_eq!(cfg.parameter_count(), 32 + 27 + 216 + 72 + 552 + 32);
    }

    #[test]
    fn gaussian_heads_shrink_the_model() {
        let base = ModelConfig::with_gaussian_heads(512, 8, 6, 0, &SIGMA_LADDER);
        let g4 = ModelConfig::with_gaussian_heads(512, 8, 6, 4, &SIGMA_LADDER);
        let diff = base.parameter_count() - g4.parameter_count();
        // per layer: 4 heads lose their Q and K weights (512×64) and biases (64)
        assert_eq!(diff, 6 * 4 * 2 * (512 * 64 + 64));
        assert_eq!(6 * 4 * 2 * 512 * 64, 1_572_864);
    }
}
