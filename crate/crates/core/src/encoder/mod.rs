//! Toy transformer image/text encoder pair with learnable prompts.
//!
//! The backbone is frozen at construction (seeded random init); only the
//! visual prompt tokens injected at key layers and the union/specific text
//! prompt rows ever train.

mod backbone;
mod checkpoint;
mod forward;
mod prompts;
mod tokenizer;

pub use backbone::{BackboneVars, FrozenBackbone};
pub use checkpoint::Checkpoint;
pub use forward::{
    build_text_prompts, encode_image, encode_image_graph, encode_naive_prompt, encode_text,
    encode_text_graph, patchify, text_encoding, text_encoding_graph, text_prompt_sequence_graph,
    ImageEncoding, ImageEncodingVars, TextEncoding,
};
pub use prompts::{PromptBanks, TextPromptBank, VisualPromptBank};
pub use tokenizer::{tokenize, BOS_ID, EOS_ID, OOV_ID};

use crate::error::{Error, Result};

/// Layer-norm epsilon shared by both encoders.
pub const LN_EPS: f64 = 1e-5;

/// Architecture of the encoder pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dim: usize,
    /// 1-based indices of the layers whose patch grids are exported.
    pub key_layers: Vec<usize>,
    pub prompt_tokens_per_key_layer: usize,
    pub text_vocab: usize,
    pub text_len: usize,
}

impl EncoderConfig {
    /// Desk-scale default: 64-px renders, 8 layers, 64-dim embeddings.
    pub fn desk_default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 16,
            n_layers: 8,
            n_heads: 4,
            dim: 64,
            key_layers: vec![2, 4, 6, 8],
            prompt_tokens_per_key_layer: 1,
            text_vocab: 64,
            text_len: 16,
        }
    }

    /// Full-scale layout (224-px input, 24 layers, key layers 6/12/18/24).
    /// Provided for configuration completeness; nothing here loads
    /// pretrained weights.
    pub fn full_scale() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 14,
            n_layers: 24,
            n_heads: 12,
            dim: 768,
            key_layers: vec![6, 12, 18, 24],
            prompt_tokens_per_key_layer: 1,
            text_vocab: 64,
            text_len: 77,
        }
    }

    /// Minimal configuration used by gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            image_size: 4,
            patch_size: 2,
            n_layers: 2,
            n_heads: 2,
            dim: 8,
            key_layers: vec![1, 2],
            prompt_tokens_per_key_layer: 1,
            text_vocab: 32,
            text_len: 8,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Number of key layers, `m`.
    pub fn n_key_layers(&self) -> usize {
        self.key_layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::Encoder("image and patch size must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Encoder(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Encoder("encoder needs at least one layer".into()));
        }
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::Encoder(format!(
                "dim {} must be a positive multiple of n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.key_layers.is_empty() {
            return Err(Error::Encoder("at least one key layer required".into()));
        }
        for pair in self.key_layers.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Encoder("key layers must be strictly increasing".into()));
            }
        }
        if *self.key_layers.first().unwrap() < 1
            || *self.key_layers.last().unwrap() > self.n_layers
        {
            return Err(Error::Encoder(format!(
                "key layers must lie in [1, {}]",
                self.n_layers
            )));
        }
        if self.text_vocab < tokenizer::RESERVED_TOKENS {
            return Err(Error::Encoder(format!(
                "text vocab must hold at least {} reserved tokens",
                tokenizer::RESERVED_TOKENS
            )));
        }
        if self.text_len < 3 {
            return Err(Error::Encoder("text_len too small for BOS/EOS framing".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_validate() {
        EncoderConfig::desk_default().validate().unwrap();
        EncoderConfig::full_scale().validate().unwrap();
        EncoderConfig::tiny().validate().unwrap();
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = EncoderConfig::desk_default();
        c.patch_size = 10;
        assert!(c.validate().is_err());

        let mut c = EncoderConfig::desk_default();
        c.key_layers = vec![2, 2];
        assert!(c.validate().is_err());

        let mut c = EncoderConfig::desk_default();
        c.key_layers = vec![9];
        assert!(c.validate().is_err());

        let mut c = EncoderConfig::desk_default();
        c.key_layers = vec![];
        assert!(c.validate().is_err());

        let mut c = EncoderConfig::desk_default();
        c.dim = 63;
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_arithmetic() {
        let c = EncoderConfig::desk_default();
        assert_eq!(c.grid(), 4);
        assert_eq!(c.n_patches(), 16);
    }
}
