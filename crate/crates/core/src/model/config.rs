use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool_after: bool,
}

impl BlockConfig {
    pub fn new(out_channels: usize, kernel: usize, pool_after: bool) -> Self {
        Self {
            out_channels,
            kernel,
            pool_after,
        }
    }
}

/// Where batch normalization sits inside a style head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPosition {
    /// `dense(flatten(gram(bn(features))))`
    BeforeGram,
    /// `dense(flatten(bn(gram(features))))`
    AfterGram,
    /// No normalization at all. Style outputs are then unbounded; kept for
    /// ablations.
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub blocks: Vec<BlockConfig>,
    /// Blocks whose activations feed a style head.
    pub tap_indices: Vec<usize>,
    pub embedding_dim: usize,
    pub style_out_dim: usize,
    /// `(channels, height, width)`
    pub input_shape: [usize; 3],
    pub bn_position: BnPosition,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            blocks: vec![
                BlockConfig::new(16, 3, true),
                BlockConfig::new(32, 3, true),
                BlockConfig::new(64, 3, true),
                BlockConfig::new(64, 3, true),
            ],
            tap_indices: vec![0, 1, 2, 3],
            embedding_dim: 128,
            style_out_dim: 128,
            input_shape: [3, 64, 64],
            bn_position: BnPosition::BeforeGram,
        }
    }
}

/// Activation geometry at one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub in_channels: usize,
    pub channels: usize,
    /// Spatial size of the block's convolution output (before pooling).
    pub height: usize,
    pub width: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("model.{key}: {msg}")));
        if self.blocks.is_empty() {
            return bad("blocks", "at least one block is required".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return bad("blocks", format!("block {i} out_channels must be positive"));
            }
            if b.kernel == 0 || b.kernel % 2 == 0 {
                return bad("blocks", format!("block {i} kernel must be a positive odd integer, got {}", b.kernel));
            }
        }
        if self.tap_indices.is_empty() {
            return bad("tap_indices", "must be non-empty".into());
        }
        if self.tap_indices.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tap_indices", format!("must be strictly increasing, got {:?}", self.tap_indices));
        }
        if let Some(&t) = self.tap_indices.iter().find(|&&t| t >= self.blocks.len()) {
            return bad(
                "tap_indices",
                format!("tap index {t} must be below the block count {}", self.blocks.len()),
            );
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim", "must be positive".into());
        }
        if self.style_out_dim == 0 {
            return bad("style_out_dim", "must be positive".into());
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return bad("input_shape", format!("all dimensions must be positive, got {:?}", self.input_shape));
        }
        let (mut h, mut w) = (h, w);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.pool_after {
                if h % 2 != 0 || w % 2 != 0 {
                    return bad(
                        "blocks",
                        format!("block {i} pools a {h}x{w} map; pooling needs even sizes"),
                    );
                }
                h /= 2;
                w /= 2;
            }
        }
        if h == 0 || w == 0 {
            return bad("blocks", "spatial size after pooling must be at least 1".into());
        }
        Ok(())
    }

    pub fn block_shapes(&self) -> Vec<BlockShape> {
        let [mut c, mut h, mut w] = self.input_shape;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            out.push(BlockShape {
                in_channels: c,
                channels: b.out_channels,
                height: h,
                width: w,
            });
            c = b.out_channels;
            if b.pool_after {
                h /= 2;
                w /= 2;
            }
        }
        out
    }

    /// Width of the flattened final block output feeding the embedding head.
    pub fn flat_dim(&self) -> usize {
        let last = self.blocks.last().expect("validated config has blocks");
        let shape = *self.block_shapes().last().expect("non-empty");
        let div = if last.pool_after { 4 } else { 1 };
        shape.channels * shape.height * shape.width / div
    }

    /// Canonical JSON: keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().flat_dim(), 64 * 4 * 4);
    }

    #[test]
    fn tap_beyond_blocks_is_rejected() {
        let cfg = ModelConfig {
            tap_indices: vec![0, 4],
            ..ModelConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("tap_indices"), "{err}");
    }

    #[test]
    fn unsorted_or_empty_taps_are_rejected() {
        for taps in [vec![], vec![1, 0], vec![1, 1]] {
            let cfg = ModelConfig {
                tap_indices: taps,
                ..ModelConfig::default()
            };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn even_kernels_and_odd_pools_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.blocks[1].kernel = 4;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            input_shape: [3, 6, 6],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let s = ModelConfig::default().canonical_json();
        let bn = s.find("\"bn_position\"").unwrap();
        let blocks = s.find("\"blocks\"").unwrap();
        let taps = s.find("\"tap_indices\"").unwrap();
        assert!(blocks < bn && bn < taps);
        assert!(s.contains("\"before_gram\""));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: Result<ModelConfig, _> = serde_json::from_str(r#"{"embeding_dim": 3}"#);
        assert!(r.unwrap_err().to_string().contains("embeding_dim"));
    }
}
