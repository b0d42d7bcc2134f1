//! Run configuration: `key = value` files with `#` comments, command-line
//! overrides and a reproducibility stamp.

use std::fs;
use std::path::Path;

use crate::data::{AnomalyType, SyntheticSpec};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::pipeline::{ModelState, PipelineSettings};
use crate::training::TrainConfig;

/// Every tunable of the pipeline. Unknown keys are rejected on parse.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub settings: PipelineSettings,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub n_union: usize,
    pub n_specific: usize,
    pub state_normal: String,
    pub state_abnormal: String,
    pub backbone_seed: u64,
    /// Master seed: prompt init, dataset generation and training order.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::desk_default(),
            settings: PipelineSettings::default(),
            train: TrainConfig::default(),
            synth: SyntheticSpec::default(),
            n_union: 8,
            n_specific: 4,
            state_normal: "perfect".to_string(),
            state_abnormal: "damaged".to_string(),
            backbone_seed: 0,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num::<T>(key, s))
        .collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "views" => self.settings.n_views = parse_num(key, value)?,
            "rig_radius" => self.settings.rig_radius = parse_num(key, value)?,
            "splat_radius" => self.settings.splat_radius = parse_num(key, value)?,
            "tau" => self.settings.tau = parse_num(key, value)?,
            "image_size" => self.encoder.image_size = parse_num(key, value)?,
            "patch_size" => self.encoder.patch_size = parse_num(key, value)?,
            "n_layers" => self.encoder.n_layers = parse_num(key, value)?,
            "n_heads" => self.encoder.n_heads = parse_num(key, value)?,
            "dim" => self.encoder.dim = parse_num(key, value)?,
            "key_layers" => self.encoder.key_layers = parse_list(key, value)?,
            "prompt_tokens" => self.encoder.prompt_tokens_per_key_layer = parse_num(key, value)?,
            "text_vocab" => self.encoder.text_vocab = parse_num(key, value)?,
            "text_len" => self.encoder.text_len = parse_num(key, value)?,
            "n_union" => self.n_union = parse_num(key, value)?,
            "n_specific" => self.n_specific = parse_num(key, value)?,
            "state_normal" => self.state_normal = value.to_string(),
            "state_abnormal" => self.state_abnormal = value.to_string(),
            "lr" => self.train.learning_rate = parse_num(key, value)?,
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "batch" => self.train.batch = parse_num(key, value)?,
            "focal_gamma" => self.train.focal_gamma = parse_num(key, value)?,
            "focal_alpha" => self.train.focal_alpha = parse_num(key, value)?,
            "adam_beta1" => self.train.adam_beta1 = parse_num(key, value)?,
            "adam_beta2" => self.train.adam_beta2 = parse_num(key, value)?,
            "adam_eps" => self.train.adam_eps = parse_num(key, value)?,
            "categories" => {
                self.synth.categories = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            "points_per_cloud" => self.synth.points_per_cloud = parse_num(key, value)?,
            "clouds_per_category" => self.synth.clouds_per_category = parse_num(key, value)?,
            "anomaly_types" => {
                self.synth.anomaly_types = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(AnomalyType::parse)
                    .collect::<Result<_>>()?;
            }
            "anomaly_fraction" => self.synth.anomaly_fraction = parse_num(key, value)?,
            "anomaly_area" => self.synth.anomaly_area = parse_num(key, value)?,
            "train_categories" => self.synth.train_categories = parse_num(key, value)?,
            "backbone_seed" => self.backbone_seed = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a config file: `key = value` lines, `#` comments.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected `key = value`, found `{line}`"),
                });
            };
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key=value` overrides on top of the current values.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config(format!("override `{item}` is not key=value")));
            };
            self.set(key.trim(), value)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.seeded_synth().validate()?;
        if self.settings.n_views == 0 {
            return Err(Error::Config("views must be positive".into()));
        }
        if self.settings.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.settings.rig_radius <= 1.0 {
            return Err(Error::Config(
                "rig_radius must exceed the unit cloud radius".into(),
            ));
        }
        Ok(())
    }

    /// The synthetic spec with the master seed folded in.
    pub fn seeded_synth(&self) -> SyntheticSpec {
        let mut s = self.synth.clone();
        s.seed = self.seed;
        s
    }

    /// The train config with the master seed folded in.
    pub fn seeded_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t
    }

    /// Fresh model state (backbone + untrained prompts) for this config.
    pub fn init_model(&self) -> Result<ModelState> {
        let mut state = ModelState::init(
            &self.encoder,
            self.backbone_seed,
            self.n_union,
            self.n_specific,
            self.seed,
        )?;
        state.banks.text.state_words = (self.state_normal.clone(), self.state_abnormal.clone());
        Ok(state)
    }

    /// Canonical dump of every key; input to the config hash.
    pub fn to_canonical_string(&self) -> String {
        let e = &self.encoder;
        let s = &self.settings;
        let t = &self.train;
        let y = &self.synth;
        let key_layers: Vec<String> = e.key_layers.iter().map(|k| k.to_string()).collect();
        let categories = y.categories.join(",");
        let anomaly_types: Vec<&str> = y.anomaly_types.iter().map(|a| a.name()).collect();
        format!(
            "views = {}\nrig_radius = {}\nsplat_radius = {}\ntau = {}\n\
             image_size = {}\npatch_size = {}\nn_layers = {}\nn_heads = {}\ndim = {}\n\
             key_layers = {}\nprompt_tokens = {}\ntext_vocab = {}\ntext_len = {}\n\
             n_union = {}\nn_specific = {}\nstate_normal = {}\nstate_abnormal = {}\n\
             lr = {}\nepochs = {}\nbatch = {}\nfocal_gamma = {}\nfocal_alpha = {}\n\
             adam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\n\
             categories = {}\npoints_per_cloud = {}\nclouds_per_category = {}\n\
             anomaly_types = {}\nanomaly_fraction = {}\nanomaly_area = {}\n\
             train_categories = {}\nbackbone_seed = {}\nseed = {}\n",
            s.n_views,
            s.rig_radius,
            s.splat_radius,
            s.tau,
            e.image_size,
            e.patch_size,
            e.n_layers,
            e.n_heads,
            e.dim,
            key_layers.join(","),
            e.prompt_tokens_per_key_layer,
            e.text_vocab,
            e.text_len,
            self.n_union,
            self.n_specific,
            self.state_normal,
            self.state_abnormal,
            t.learning_rate,
            t.epochs,
            t.batch,
            t.focal_gamma,
            t.focal_alpha,
            t.adam_beta1,
            t.adam_beta2,
            t.adam_eps,
            categories,
            y.points_per_cloud,
            y.clouds_per_category,
            anomaly_types.join(","),
            y.anomaly_fraction,
            y.anomaly_area,
            y.train_categories,
            self.backbone_seed,
            self.seed,
        )
    }

    pub fn hash(&self) -> u64 {
        fnv1a_hash(self.to_canonical_string().as_bytes())
    }

    /// Write the reproducibility stamp (`config hash + seed`) into `dir`.
    pub fn write_stamp(&self, dir: &Path) -> Result<()> {
        let path = dir.join("stamp.txt");
        let body = format!("config_hash = {:016x}\nseed = {}\n", self.hash(), self.seed);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }
}

pub fn fnv1a_hash(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
