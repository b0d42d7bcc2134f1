//! The trainable state: visual prompt tokens and text prompt rows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backbone::FrozenBackbone;
use super::EncoderConfig;
use crate::tensor::Tensor;

// Large enough that layer normalization of a fresh prompt row is
// well-conditioned (rows with tiny variance make the loss surface stiff).
const PROMPT_INIT_STD: f64 = 0.2;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn init_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| gauss(rng) * PROMPT_INIT_STD).collect(),
    )
}

/// Learnable token matrices injected at the key layers, aligned with
/// `config.key_layers`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPromptBank {
    pub tokens: Vec<Tensor>,
}

impl VisualPromptBank {
    pub fn init(config: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5652_4f4d_5054_0001);
        VisualPromptBank {
            tokens: config
                .key_layers
                .iter()
                .map(|_| init_tensor(&mut rng, config.prompt_tokens_per_key_layer, config.dim))
                .collect(),
        }
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        VisualPromptBank {
            tokens: config
                .key_layers
                .iter()
                .map(|_| Tensor::zeros(config.prompt_tokens_per_key_layer, config.dim))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tokens.iter().all(Tensor::all_finite)
    }
}

/// Learnable text prompt rows: a union part shared by the normal and
/// abnormal prompts and a specific part per state, followed by fixed
/// state/class words.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPromptBank {
    pub union: Tensor,
    pub specific_normal: Tensor,
    pub specific_abnormal: Tensor,
    pub state_words: (String, String),
    pub class_name: String,
}

impl TextPromptBank {
    pub fn init(config: &EncoderConfig, n_union: usize, n_specific: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5445_5854_5054_0002);
        TextPromptBank {
            union: init_tensor(&mut rng, n_union, config.dim),
            specific_normal: init_tensor(&mut rng, n_specific, config.dim),
            specific_abnormal: init_tensor(&mut rng, n_specific, config.dim),
            state_words: ("perfect".to_string(), "damaged".to_string()),
            class_name: "object".to_string(),
        }
    }

    pub fn n_union(&self) -> usize {
        self.union.rows()
    }

    pub fn n_specific(&self) -> usize {
        self.specific_normal.rows()
    }

    pub fn with_class(&self, class_name: &str) -> Self {
        let mut bank = self.clone();
        bank.class_name = class_name.to_string();
        bank
    }
}

/// Everything the optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBanks {
    pub visual: VisualPromptBank,
    pub text: TextPromptBank,
}

impl PromptBanks {
    pub fn init(
        config: &EncoderConfig,
        n_union: usize,
        n_specific: usize,
        seed: u64,
    ) -> Self {
        PromptBanks {
            visual: VisualPromptBank::init(config, seed),
            text: TextPromptBank::init(config, n_union, n_specific, seed),
        }
    }

    /// Flat view over every trainable tensor, in the fixed optimizer order:
    /// visual prompts by key layer, then union, specific-normal,
    /// specific-abnormal.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.visual.tokens.iter().collect();
        out.push(&self.text.union);
        out.push(&self.text.specific_normal);
        out.push(&self.text.specific_abnormal);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.visual.tokens.iter_mut().collect();
        out.push(&mut self.text.union);
        out.push(&mut self.text.specific_normal);
        out.push(&mut self.text.specific_abnormal);
        out
    }

    /// Total trainable parameter count.
    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn _assert_compatible(&self, backbone: &FrozenBackbone) {
        debug_assert_eq!(self.visual.tokens.len(), backbone.config.n_key_layers());
    }
}
