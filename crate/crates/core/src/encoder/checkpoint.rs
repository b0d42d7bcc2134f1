//! Flat binary checkpoint: config, backbone seed and prompt banks.
//!
//! Layout (little-endian): an 8-byte magic, a u32 version, the integer
//! config fields, the backbone seed, the three prompt-bank strings, then
//! each prompt tensor as `rows: u32, cols: u32, data: f64 × rows·cols`.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use super::prompts::{PromptBanks, TextPromptBank, VisualPromptBank};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MVADCKPT";
const VERSION: u32 = 1;

/// A trained (or freshly initialized) model state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub backbone_seed: u64,
    pub banks: PromptBanks,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        write_u32(&mut out, VERSION);
        let c = &self.config;
        for v in [
            c.image_size,
            c.patch_size,
            c.n_layers,
            c.n_heads,
            c.dim,
            c.key_layers.len(),
        ] {
            write_u32(&mut out, v as u32);
        }
        for &k in &c.key_layers {
            write_u32(&mut out, k as u32);
        }
        for v in [c.prompt_tokens_per_key_layer, c.text_vocab, c.text_len] {
            write_u32(&mut out, v as u32);
        }
        out.extend_from_slice(&self.backbone_seed.to_le_bytes());
        let t = &self.banks.text;
        write_string(&mut out, &t.state_words.0);
        write_string(&mut out, &t.state_words.1);
        write_string(&mut out, &t.class_name);
        write_tensor(&mut out, &t.union);
        write_tensor(&mut out, &t.specific_normal);
        write_tensor(&mut out, &t.specific_abnormal);
        for b in &self.banks.visual.tokens {
            write_tensor(&mut out, b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| Error::Encoder("checkpoint truncated before magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Encoder("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(Error::Encoder(format!("unsupported checkpoint version {version}")));
        }
        let image_size = read_u32(&mut cur)? as usize;
        let patch_size = read_u32(&mut cur)? as usize;
        let n_layers = read_u32(&mut cur)? as usize;
        let n_heads = read_u32(&mut cur)? as usize;
        let dim = read_u32(&mut cur)? as usize;
        let m = read_u32(&mut cur)? as usize;
        let mut key_layers = Vec::with_capacity(m);
        for _ in 0..m {
            key_layers.push(read_u32(&mut cur)? as usize);
        }
        let prompt_tokens_per_key_layer = read_u32(&mut cur)? as usize;
        let text_vocab = read_u32(&mut cur)? as usize;
        let text_len = read_u32(&mut cur)? as usize;
        let config = EncoderConfig {
            image_size,
            patch_size,
            n_layers,
            n_heads,
            dim,
            key_layers,
            prompt_tokens_per_key_layer,
            text_vocab,
            text_len,
        };
        config.validate()?;
        let mut seed_bytes = [0u8; 8];
        cur.read_exact(&mut seed_bytes)
            .map_err(|_| Error::Encoder("checkpoint truncated at seed".into()))?;
        let backbone_seed = u64::from_le_bytes(seed_bytes);
        let state_normal = read_string(&mut cur)?;
        let state_abnormal = read_string(&mut cur)?;
        let class_name = read_string(&mut cur)?;
        let union = read_tensor(&mut cur)?;
        let specific_normal = read_tensor(&mut cur)?;
        let specific_abnormal = read_tensor(&mut cur)?;
        let mut tokens = Vec::with_capacity(config.key_layers.len());
        for _ in 0..config.key_layers.len() {
            tokens.push(read_tensor(&mut cur)?);
        }
        Ok(Checkpoint {
            config,
            backbone_seed,
            banks: PromptBanks {
                visual: VisualPromptBank { tokens },
                text: TextPromptBank {
                    union,
                    specific_normal,
                    specific_abnormal,
                    state_words: (state_normal, state_abnormal),
                    class_name,
                },
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Atomic write: temp file in the same directory, then rename.
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt")
        ));
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)
        .map_err(|_| Error::Encoder("checkpoint truncated".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    write_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn read_string(cur: &mut Cursor<&[u8]>) -> Result<String> {
    let len = read_u32(cur)? as usize;
    if len > 1 << 20 {
        return Err(Error::Encoder("unreasonable string length in checkpoint".into()));
    }
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf)
        .map_err(|_| Error::Encoder("checkpoint truncated in string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Encoder("invalid UTF-8 in checkpoint".into()))
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    write_u32(out, t.rows() as u32);
    write_u32(out, t.cols() as u32);
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(cur: &mut Cursor<&[u8]>) -> Result<Tensor> {
    let rows = read_u32(cur)? as usize;
    let cols = read_u32(cur)? as usize;
    if rows.saturating_mul(cols) > 1 << 28 {
        return Err(Error::Encoder("unreasonable tensor size in checkpoint".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let mut b = [0u8; 8];
        cur.read_exact(&mut b)
            .map_err(|_| Error::Encoder("checkpoint truncated in tensor".into()))?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Tensor::from_vec(rows, cols, data))
}
