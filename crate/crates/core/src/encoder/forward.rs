//! Image and text forward passes, expressed on the autodiff graph.
//!
//! The plain `encode_*` entry points wrap the graph builders with
//! constant-leaf prompts, so the trained and untrained paths share one
//! numeric code path.

use super::backbone::{BackboneVars, FrozenBackbone, LayerVars};
use super::prompts::{TextPromptBank, VisualPromptBank};
use super::tokenizer::{tokenize, BOS_ID, EOS_ID};
use super::{EncoderConfig, LN_EPS};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rendering::Image;
use crate::tensor::Tensor;

/// Per-view encoder output: the projected class token and the raw patch
/// grid after each key layer (`grid²×dim` rows, row-major over the grid).
#[derive(Clone, Debug)]
pub struct ImageEncoding {
    pub class_token: Tensor,
    pub key_layer_maps: Vec<Tensor>,
    pub grid: usize,
}

/// Graph handles mirroring [`ImageEncoding`].
#[derive(Clone, Debug)]
pub struct ImageEncodingVars {
    pub class_token: Var,
    pub key_layer_maps: Vec<Var>,
    pub grid: usize,
}

/// Normal/abnormal text features, one unit row each.
#[derive(Clone, Debug)]
pub struct TextEncoding {
    /// `2×dim`; row 0 normal, row 1 abnormal.
    pub features: Tensor,
}

fn multi_head_attention(g: &mut Graph, x: Var, w: &LayerVars, n_heads: usize, dim: usize) -> Var {
    let head_dim = dim / n_heads;
    let q = g.matmul(x, w.wq);
    let k = g.matmul(x, w.wk);
    let v = g.matmul(x, w.wv);
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh));
    }
    let merged = g.concat_cols(&heads);
    g.matmul(merged, w.wo)
}

/// One pre-LN transformer block.
fn transformer_layer(g: &mut Graph, x: Var, w: &LayerVars, n_heads: usize, dim: usize) -> Var {
    let normed = g.layer_norm(x, LN_EPS);
    let attn = multi_head_attention(g, normed, w, n_heads, dim);
    let x = g.add(x, attn);
    let normed = g.layer_norm(x, LN_EPS);
    let h = g.matmul(normed, w.w1);
    let h = g.gelu(h);
    let mlp = g.matmul(h, w.w2);
    g.add(x, mlp)
}

/// Flatten an image into `n_patches × patch²` rows, patches row-major.
pub fn patchify(image: &Image, config: &EncoderConfig) -> Tensor {
    let ps = config.patch_size;
    let grid = config.grid();
    let mut out = Tensor::zeros(grid * grid, ps * ps);
    for pr in 0..grid {
        for pc in 0..grid {
            let row = out.row_mut(pr * grid + pc);
            for dr in 0..ps {
                for dc in 0..ps {
                    row[dr * ps + dc] = image.at(pr * ps + dr, pc * ps + dc);
                }
            }
        }
    }
    out
}

/// Run the image encoder on the graph. `visual_prompts` must hold one Var
/// per key layer (shape `prompt_tokens × dim`); the prompt tokens join the
/// sequence for that layer only and are stripped afterwards.
pub fn encode_image_graph(
    g: &mut Graph,
    image: &Image,
    vars: &BackboneVars,
    visual_prompts: &[Var],
    config: &EncoderConfig,
) -> Result<ImageEncodingVars> {
    if image.width != config.image_size || image.height != config.image_size {
        return Err(Error::Encoder(format!(
            "image {}x{} does not match configured size {}",
            image.width, image.height, config.image_size
        )));
    }
    if visual_prompts.len() != config.n_key_layers() {
        return Err(Error::Encoder(format!(
            "expected {} visual prompt banks, got {}",
            config.n_key_layers(),
            visual_prompts.len()
        )));
    }
    let n_tokens = 1 + config.n_patches();
    let patches = g.constant(patchify(image, config));
    let embedded = g.matmul(patches, vars.patch_embed);
    let seq = g.concat_rows(&[vars.cls_embed, embedded]);
    let mut x = g.add(seq, vars.pos_embed);

    let mut key_layer_maps = Vec::with_capacity(config.n_key_layers());
    for (layer_idx, w) in vars.image_layers.iter().enumerate() {
        let layer_no = layer_idx + 1;
        if let Some(slot) = config.key_layers.iter().position(|&k| k == layer_no) {
            let with_prompts = g.concat_rows(&[x, visual_prompts[slot]]);
            let out = transformer_layer(g, with_prompts, w, config.n_heads, config.dim);
            x = g.slice_rows(out, 0, n_tokens);
            key_layer_maps.push(g.slice_rows(x, 1, config.n_patches()));
        } else {
            x = transformer_layer(g, x, w, config.n_heads, config.dim);
        }
    }

    let cls = g.slice_rows(x, 0, 1);
    let cls = g.layer_norm(cls, LN_EPS);
    let cls = g.matmul(cls, vars.image_proj);
    let class_token = g.l2_normalize_rows(cls, 1e-12);
    Ok(ImageEncodingVars {
        class_token,
        key_layer_maps,
        grid: config.grid(),
    })
}

/// Embedded prompt sequence `[BOS] ⧺ U ⧺ S ⧺ state ⧺ class ⧺ [EOS]` on the
/// graph. `union`/`specific` may have zero rows.
pub fn text_prompt_sequence_graph(
    g: &mut Graph,
    union: Var,
    specific: Var,
    state_word: &str,
    class_name: &str,
    backbone: &FrozenBackbone,
    config: &EncoderConfig,
) -> Result<Var> {
    let state_ids = tokenize(state_word, config.text_vocab);
    let class_ids = tokenize(class_name, config.text_vocab);
    if state_ids.is_empty() || class_ids.is_empty() {
        return Err(Error::Encoder("state and class words must be non-empty".into()));
    }
    let n_union = g.value(union).rows();
    let n_specific = g.value(specific).rows();
    let len = 2 + n_union + n_specific + state_ids.len() + class_ids.len();
    if len > config.text_len {
        return Err(Error::Encoder(format!(
            "prompt sequence length {len} exceeds text_len {}",
            config.text_len
        )));
    }
    let bos = g.constant(backbone.embed_tokens(&[BOS_ID]));
    let state = g.constant(backbone.embed_tokens(&state_ids));
    let class = g.constant(backbone.embed_tokens(&class_ids));
    let eos = g.constant(backbone.embed_tokens(&[EOS_ID]));
    let mut parts = vec![bos];
    if n_union > 0 {
        parts.push(union);
    }
    if n_specific > 0 {
        parts.push(specific);
    }
    parts.extend([state, class, eos]);
    Ok(g.concat_rows(&parts))
}

/// Text transformer over an embedded sequence; returns the projected,
/// unit-norm EOS-position feature (`1×dim`).
pub fn encode_text_graph(
    g: &mut Graph,
    seq: Var,
    vars: &BackboneVars,
    config: &EncoderConfig,
) -> Result<Var> {
    let len = g.value(seq).rows();
    if len > config.text_len {
        return Err(Error::Encoder(format!(
            "sequence length {len} exceeds text_len {}",
            config.text_len
        )));
    }
    let pos = g.slice_rows(vars.text_pos_embed, 0, len);
    let mut x = g.add(seq, pos);
    for w in &vars.text_layers {
        x = transformer_layer(g, x, w, config.n_heads, config.dim);
    }
    let eos = g.slice_rows(x, len - 1, 1);
    let eos = g.layer_norm(eos, LN_EPS);
    let projected = g.matmul(eos, vars.text_proj);
    Ok(g.l2_normalize_rows(projected, 1e-12))
}

/// Both text features on the graph: row 0 normal, row 1 abnormal.
pub fn text_encoding_graph(
    g: &mut Graph,
    union: Var,
    specific_normal: Var,
    specific_abnormal: Var,
    bank: &TextPromptBank,
    backbone: &FrozenBackbone,
    vars: &BackboneVars,
    config: &EncoderConfig,
) -> Result<Var> {
    let seq_n = text_prompt_sequence_graph(
        g,
        union,
        specific_normal,
        &bank.state_words.0,
        &bank.class_name,
        backbone,
        config,
    )?;
    let seq_a = text_prompt_sequence_graph(
        g,
        union,
        specific_abnormal,
        &bank.state_words.1,
        &bank.class_name,
        backbone,
        config,
    )?;
    let g_n = encode_text_graph(g, seq_n, vars, config)?;
    let g_a = encode_text_graph(g, seq_a, vars, config)?;
    Ok(g.concat_rows(&[g_n, g_a]))
}

/// Plain forward pass of the image encoder.
pub fn encode_image(
    image: &Image,
    backbone: &FrozenBackbone,
    prompts: &VisualPromptBank,
    config: &EncoderConfig,
) -> Result<ImageEncoding> {
    let mut g = Graph::new();
    let vars = backbone.to_vars(&mut g);
    let prompt_vars: Vec<Var> = prompts.tokens.iter().map(|t| g.constant(t.clone())).collect();
    let enc = encode_image_graph(&mut g, image, &vars, &prompt_vars, config)?;
    Ok(ImageEncoding {
        class_token: g.value(enc.class_token).clone(),
        key_layer_maps: enc
            .key_layer_maps
            .iter()
            .map(|&v| g.value(v).clone())
            .collect(),
        grid: enc.grid,
    })
}

/// Embedded normal/abnormal prompt sequences (token content only; position
/// embeddings are added inside the text encoder).
pub fn build_text_prompts(
    bank: &TextPromptBank,
    backbone: &FrozenBackbone,
    config: &EncoderConfig,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let union = g.constant(bank.union.clone());
    let s_n = g.constant(bank.specific_normal.clone());
    let s_a = g.constant(bank.specific_abnormal.clone());
    let seq_n = text_prompt_sequence_graph(
        &mut g,
        union,
        s_n,
        &bank.state_words.0,
        &bank.class_name,
        backbone,
        config,
    )?;
    let seq_a = text_prompt_sequence_graph(
        &mut g,
        union,
        s_a,
        &bank.state_words.1,
        &bank.class_name,
        backbone,
        config,
    )?;
    Ok((g.value(seq_n).clone(), g.value(seq_a).clone()))
}

/// Plain text encoder over a pre-embedded sequence.
pub fn encode_text(
    seq: &Tensor,
    backbone: &FrozenBackbone,
    config: &EncoderConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = backbone.to_vars(&mut g);
    let seq = g.constant(seq.clone());
    let out = encode_text_graph(&mut g, seq, &vars, config)?;
    Ok(g.value(out).clone())
}

/// Both text features for a prompt bank.
pub fn text_encoding(
    bank: &TextPromptBank,
    backbone: &FrozenBackbone,
    config: &EncoderConfig,
) -> Result<TextEncoding> {
    let (seq_n, seq_a) = build_text_prompts(bank, backbone, config)?;
    let g_n = encode_text(&seq_n, backbone, config)?;
    let g_a = encode_text(&seq_a, backbone, config)?;
    let mut features = Tensor::zeros(2, backbone.config().dim);
    features.row_mut(0).copy_from_slice(g_n.row(0));
    features.row_mut(1).copy_from_slice(g_a.row(0));
    Ok(TextEncoding { features })
}

/// The hand-crafted prompt pathway: `"{state} {class}"` with no learned
/// rows. The adaptive pathway must coincide with this bit-exactly when
/// both prompt counts are zero.
pub fn encode_naive_prompt(
    state_word: &str,
    class_name: &str,
    backbone: &FrozenBackbone,
    config: &EncoderConfig,
) -> Result<Tensor> {
    let state_ids = tokenize(state_word, config.text_vocab);
    let class_ids = tokenize(class_name, config.text_vocab);
    if state_ids.is_empty() || class_ids.is_empty() {
        return Err(Error::Encoder("state and class words must be non-empty".into()));
    }
    let mut ids = vec![BOS_ID];
    ids.extend(&state_ids);
    ids.extend(&class_ids);
    ids.push(EOS_ID);
    if ids.len() > config.text_len {
        return Err(Error::Encoder(format!(
            "prompt sequence length {} exceeds text_len {}",
            ids.len(),
            config.text_len
        )));
    }
    encode_text(&backbone.embed_tokens(&ids), backbone, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PromptBanks;

    fn ramp_image(size: usize) -> Image {
        Image {
            width: size,
            height: size,
            data: (0..size * size).map(|i| (i % 7) as f64 / 7.0).collect(),
        }
    }

    fn setup(cfg: &EncoderConfig) -> (FrozenBackbone, PromptBanks) {
        let backbone = FrozenBackbone::new(cfg, 11).unwrap();
        let banks = PromptBanks::init(cfg, 2, 1, 5);
        (backbone, banks)
    }

    #[test]
    fn image_encoding_shapes_and_determinism() {
        let cfg = EncoderConfig::desk_default();
        let (backbone, banks) = setup(&cfg);
        let img = ramp_image(64);
        let a = encode_image(&img, &backbone, &banks.visual, &cfg).unwrap();
        let b = encode_image(&img, &backbone, &banks.visual, &cfg).unwrap();
        assert_eq!(a.key_layer_maps.len(), 4);
        assert_eq!(a.grid, 4);
        for m in &a.key_layer_maps {
            assert_eq!(m.shape(), (16, 64));
            assert!(m.all_finite());
        }
        assert_eq!(a.class_token, b.class_token);
        for (ma, mb) in a.key_layer_maps.iter().zip(&b.key_layer_maps) {
            assert_eq!(ma, mb);
        }
        let norm: f64 = a.class_token.norm();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_prompt_run_is_deterministic_and_finite() {
        let cfg = EncoderConfig::tiny();
        let (backbone, _) = setup(&cfg);
        let zero = VisualPromptBank::zeros(&cfg);
        let img = ramp_image(4);
        let a = encode_image(&img, &backbone, &zero, &cfg).unwrap();
        let b = encode_image(&img, &backbone, &zero, &cfg).unwrap();
        assert!(a.class_token.all_finite());
        assert!(a.key_layer_maps.iter().all(Tensor::all_finite));
        assert_eq!(a.class_token, b.class_token);
    }

    #[test]
    fn image_size_mismatch_errors() {
        let cfg = EncoderConfig::desk_default();
        let (backbone, banks) = setup(&cfg);
        let img = ramp_image(32);
        assert!(encode_image(&img, &backbone, &banks.visual, &cfg).is_err());
    }

    #[test]
    fn prompt_locality_only_touches_later_maps() {
        let cfg = EncoderConfig::desk_default();
        let (backbone, banks) = setup(&cfg);
        let img = ramp_image(64);
        let base = encode_image(&img, &backbone, &banks.visual, &cfg).unwrap();

        // Perturb the prompt of the third key layer (layer 6).
        let mut perturbed = banks.visual.clone();
        perturbed.tokens[2].data_mut()[0] += 0.5;
        let changed = encode_image(&img, &backbone, &perturbed, &cfg).unwrap();

        assert_eq!(base.key_layer_maps[0], changed.key_layer_maps[0]);
        assert_eq!(base.key_layer_maps[1], changed.key_layer_maps[1]);
        assert_ne!(base.key_layer_maps[2], changed.key_layer_maps[2]);
        assert_ne!(base.key_layer_maps[3], changed.key_layer_maps[3]);
        assert_ne!(base.class_token, changed.class_token);
    }

    #[test]
    fn prompt_sequence_layout() {
        let cfg = EncoderConfig::desk_default();
        let backbone = FrozenBackbone::new(&cfg, 1).unwrap();
        let bank = TextPromptBank {
            union: Tensor::from_vec(8, 64, vec![0.1; 8 * 64]),
            specific_normal: Tensor::from_vec(4, 64, vec![0.2; 4 * 64]),
            specific_abnormal: Tensor::from_vec(4, 64, vec![0.3; 4 * 64]),
            state_words: ("perfect".into(), "damaged".into()),
            class_name: "bagel".into(),
        };
        let (seq_n, seq_a) = build_text_prompts(&bank, &backbone, &cfg).unwrap();
        // 1 BOS + 8 union + 4 specific + 1 state + 1 class + 1 EOS.
        assert_eq!(seq_n.rows(), 16);
        assert_eq!(seq_a.rows(), 16);
        // BOS plus union block identical across the two prompts.
        for r in 0..9 {
            assert_eq!(seq_n.row(r), seq_a.row(r));
        }
        assert_ne!(seq_n.row(9), seq_a.row(9));
    }

    #[test]
    fn prompt_sequence_overflow_errors() {
        let cfg = EncoderConfig::tiny(); // text_len = 8
        let backbone = FrozenBackbone::new(&cfg, 1).unwrap();
        let bank = TextPromptBank {
            union: Tensor::zeros(6, 8),
            specific_normal: Tensor::zeros(2, 8),
            specific_abnormal: Tensor::zeros(2, 8),
            state_words: ("perfect".into(), "damaged".into()),
            class_name: "sphere".into(),
        };
        assert!(build_text_prompts(&bank, &backbone, &cfg).is_err());
    }

    #[test]
    fn text_encoding_unit_norm_and_swap_symmetry() {
        let cfg = EncoderConfig::desk_default();
        let backbone = FrozenBackbone::new(&cfg, 3).unwrap();
        let banks = PromptBanks::init(&cfg, 4, 2, 9);
        let bank = banks.text.with_class("sphere");
        let enc = text_encoding(&bank, &backbone, &cfg).unwrap();
        for r in 0..2 {
            let n: f64 = enc.features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }

        let mut swapped = bank.clone();
        std::mem::swap(&mut swapped.specific_normal, &mut swapped.specific_abnormal);
        swapped.state_words = (bank.state_words.1.clone(), bank.state_words.0.clone());
        let enc_swapped = text_encoding(&swapped, &backbone, &cfg).unwrap();
        assert_eq!(enc.features.row(0), enc_swapped.features.row(1));
        assert_eq!(enc.features.row(1), enc_swapped.features.row(0));
    }

    #[test]
    fn atp_with_zero_prompts_equals_naive_pathway() {
        let cfg = EncoderConfig::desk_default();
        let backbone = FrozenBackbone::new(&cfg, 17).unwrap();
        let bank = TextPromptBank {
            union: Tensor::zeros(0, 64),
            specific_normal: Tensor::zeros(0, 64),
            specific_abnormal: Tensor::zeros(0, 64),
            state_words: ("perfect".into(), "damaged".into()),
            class_name: "sphere".into(),
        };
        let enc = text_encoding(&bank, &backbone, &cfg).unwrap();
        let naive_n = encode_naive_prompt("perfect", "sphere", &backbone, &cfg).unwrap();
        let naive_a = encode_naive_prompt("damaged", "sphere", &backbone, &cfg).unwrap();
        assert_eq!(enc.features.row(0), naive_n.row(0));
        assert_eq!(enc.features.row(1), naive_a.row(0));
    }

    #[test]
    fn encode_text_is_pure() {
        let cfg = EncoderConfig::tiny();
        let backbone = FrozenBackbone::new(&cfg, 5).unwrap();
        let seq = backbone.embed_tokens(&[BOS_ID, 3, EOS_ID]);
        let a = encode_text(&seq, &backbone, &cfg).unwrap();
        let b = encode_text(&seq, &backbone, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
