//! Frozen seeded-random transformer weights shared by every forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct LayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Immutable encoder weights, reproducible from `(config, seed)`.
///
/// Weight matrices use an orthogonalized Gaussian init with residual
/// out-projections damped by `1/sqrt(2·n_layers)`; embeddings are
/// `N(0, 0.02²)`. Layer normalization carries no affine parameters.
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    pub(crate) config: EncoderConfig,
    pub(crate) seed: u64,
    pub(crate) patch_embed: Tensor,
    pub(crate) pos_embed: Tensor,
    pub(crate) cls_embed: Tensor,
    pub(crate) image_layers: Vec<LayerWeights>,
    pub(crate) image_proj: Tensor,
    pub(crate) token_embed: Tensor,
    pub(crate) text_pos_embed: Tensor,
    pub(crate) text_layers: Vec<LayerWeights>,
    pub(crate) text_proj: Tensor,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two open-interval uniforms.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| gauss(rng) * std).collect())
}

/// Gaussian matrix with the shorter side orthonormalized (modified
/// Gram-Schmidt), scaled by `gain`.
fn orthogonal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Tensor {
    let transpose = rows < cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    // r >= c: orthonormalize the c columns.
    let mut m = gaussian_tensor(rng, r, c, 1.0);
    for j in 0..c {
        for k in 0..j {
            let dot: f64 = (0..r).map(|i| m.get(i, j) * m.get(i, k)).sum();
            for i in 0..r {
                let v = m.get(i, j) - dot * m.get(i, k);
                m.set(i, j, v);
            }
        }
        let norm: f64 = (0..r).map(|i| m.get(i, j) * m.get(i, j)).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        for i in 0..r {
            let v = m.get(i, j) * inv;
            m.set(i, j, v);
        }
    }
    let m = if transpose { m.transpose() } else { m };
    m.scale(gain)
}

fn init_layers(rng: &mut ChaCha8Rng, n_layers: usize, dim: usize) -> Vec<LayerWeights> {
    let hidden = dim * 4;
    let residual_gain = 1.0 / (2.0 * n_layers as f64).sqrt();
    (0..n_layers)
        .map(|_| LayerWeights {
            wq: orthogonal_tensor(rng, dim, dim, 1.0),
            wk: orthogonal_tensor(rng, dim, dim, 1.0),
            wv: orthogonal_tensor(rng, dim, dim, 1.0),
            wo: orthogonal_tensor(rng, dim, dim, residual_gain),
            w1: orthogonal_tensor(rng, dim, hidden, 1.0),
            w2: orthogonal_tensor(rng, hidden, dim, residual_gain),
        })
        .collect()
}

impl FrozenBackbone {
    pub fn new(config: &EncoderConfig, seed: u64) -> crate::error::Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = config.dim;
        let n_patches = config.n_patches();
        // Field order below fixes the RNG consumption order; changing it
        // changes every backbone.
        let patch_embed = orthogonal_tensor(
            &mut rng,
            config.patch_size * config.patch_size,
            dim,
            1.0,
        );
        // Position must be legible next to layer-normalized content, so
        // tokens can be told apart by location as well as appearance.
        let pos_embed = gaussian_tensor(&mut rng, 1 + n_patches, dim, 1.0);
        let cls_embed = gaussian_tensor(&mut rng, 1, dim, 1.0);
        let image_layers = init_layers(&mut rng, config.n_layers, dim);
        let image_proj = orthogonal_tensor(&mut rng, dim, dim, 1.0);
        let token_embed = gaussian_tensor(&mut rng, config.text_vocab, dim, 0.02);
        let text_pos_embed = gaussian_tensor(&mut rng, config.text_len, dim, 0.02);
        let text_layers = init_layers(&mut rng, config.n_layers, dim);
        let text_proj = orthogonal_tensor(&mut rng, dim, dim, 1.0);
        Ok(FrozenBackbone {
            config: config.clone(),
            seed,
            patch_embed,
            pos_embed,
            cls_embed,
            image_layers,
            image_proj,
            token_embed,
            text_pos_embed,
            text_layers,
            text_proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// FNV-1a over every weight byte in init order; constant across a run
    /// exactly when the frozen weights are untouched.
    pub fn weight_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |t: &Tensor| {
            for v in t.iter() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        };
        eat(&self.patch_embed);
        eat(&self.pos_embed);
        eat(&self.cls_embed);
        for l in &self.image_layers {
            for t in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                eat(t);
            }
        }
        eat(&self.image_proj);
        eat(&self.token_embed);
        eat(&self.text_pos_embed);
        for l in &self.text_layers {
            for t in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                eat(t);
            }
        }
        eat(&self.text_proj);
        h
    }

    /// Embedding rows for a token id sequence.
    pub(crate) fn embed_tokens(&self, ids: &[usize]) -> Tensor {
        let dim = self.config.dim;
        let mut out = Tensor::zeros(ids.len(), dim);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.token_embed.row(id));
        }
        out
    }

    /// Insert every weight as a constant leaf of `g`, reused by all
    /// encodings recorded on that graph.
    pub fn to_vars(&self, g: &mut Graph) -> BackboneVars {
        let layer_vars = |g: &mut Graph, layers: &[LayerWeights]| {
            layers
                .iter()
                .map(|l| LayerVars {
                    wq: g.constant(l.wq.clone()),
                    wk: g.constant(l.wk.clone()),
                    wv: g.constant(l.wv.clone()),
                    wo: g.constant(l.wo.clone()),
                    w1: g.constant(l.w1.clone()),
                    w2: g.constant(l.w2.clone()),
                })
                .collect()
        };
        BackboneVars {
            patch_embed: g.constant(self.patch_embed.clone()),
            pos_embed: g.constant(self.pos_embed.clone()),
            cls_embed: g.constant(self.cls_embed.clone()),
            image_layers: layer_vars(g, &self.image_layers),
            image_proj: g.constant(self.image_proj.clone()),
            text_pos_embed: g.constant(self.text_pos_embed.clone()),
            text_layers: layer_vars(g, &self.text_layers),
            text_proj: g.constant(self.text_proj.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub w2: Var,
}

/// Backbone weights registered as constants on one [`Graph`].
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub(crate) patch_embed: Var,
    pub(crate) pos_embed: Var,
    pub(crate) cls_embed: Var,
    pub(crate) image_layers: Vec<LayerVars>,
    pub(crate) image_proj: Var,
    pub(crate) text_pos_embed: Var,
    pub(crate) text_layers: Vec<LayerVars>,
    pub(crate) text_proj: Var,
}
