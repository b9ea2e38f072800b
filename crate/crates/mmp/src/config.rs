//! Flat key=value run configuration with dotted namespaces.
//!
//! Every field has a default; unknown keys are rejected. The resolved
//! rendering is canonical (fixed key order) and re-running from it reproduces
//! the run bitwise.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{AblationTag, TrainConfig};
use crate::model::ModelConfig;
use crate::projection::ModalitySpec;
use crate::synthdata::SynthConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // data.*
    pub data_feature_lens: Vec<usize>,
    pub data_latent_width: usize,
    pub data_classes: usize,
    pub data_samples: usize,
    pub data_noise: f64,
    pub data_map_gain: f64,
    pub data_seed: u64,
    // model.*
    pub model_tokens: Vec<usize>,
    pub model_native_widths: Vec<usize>,
    pub model_common_width: usize,
    pub model_aggregated_tokens: usize,
    pub model_heads: usize,
    pub model_mlp_hidden: usize,
    pub model_encoder_hidden: usize,
    // train.*
    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub train_learning_rate: f64,
    pub train_weight_decay: f64,
    pub train_epsilon: f64,
    pub train_p_none: f64,
    pub train_seed: u64,
    pub train_tag: AblationTag,
    pub train_mask_training: bool,
    pub train_warmup_dropout_epochs: usize,
    // eval.*
    pub eval_seeds: Vec<u64>,
    // out.*
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_feature_lens: vec![64, 64, 64],
            data_latent_width: 16,
            data_classes: 8,
            data_samples: 3000,
            data_noise: 0.1,
            data_map_gain: crate::synthdata::DEFAULT_MAP_GAIN,
            data_seed: 42,
            model_tokens: vec![8, 8, 8],
            model_native_widths: vec![8, 8, 8],
            model_common_width: 16,
            model_aggregated_tokens: 8,
            model_heads: 4,
            model_mlp_hidden: 32,
            model_encoder_hidden: 32,
            train_epochs: 30,
            train_batch_size: 32,
            train_learning_rate: 1e-3,
            train_weight_decay: 0.01,
            train_epsilon: 1e-8,
            train_p_none: 0.2,
            train_seed: 7,
            train_tag: AblationTag::CaAlign,
            train_mask_training: true,
            train_warmup_dropout_epochs: 0,
            eval_seeds: vec![1, 2, 3, 4, 5],
            out_dir: String::new(),
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {p:?} for key {key:?}")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key:?}")))
}

impl RunConfig {
    /// Parse a config document: one `key = value` per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.feature_lens" => self.data_feature_lens = parse_list(key, value)?,
            "data.latent_width" => self.data_latent_width = parse_one(key, value)?,
            "data.classes" => self.data_classes = parse_one(key, value)?,
            "data.samples" => self.data_samples = parse_one(key, value)?,
            "data.noise" => self.data_noise = parse_one(key, value)?,
            "data.map_gain" => self.data_map_gain = parse_one(key, value)?,
            "data.seed" => self.data_seed = parse_one(key, value)?,
            "model.tokens" => self.model_tokens = parse_list(key, value)?,
            "model.native_widths" => self.model_native_widths = parse_list(key, value)?,
            "model.common_width" => self.model_common_width = parse_one(key, value)?,
            "model.aggregated_tokens" => self.model_aggregated_tokens = parse_one(key, value)?,
            "model.heads" => self.model_heads = parse_one(key, value)?,
            "model.mlp_hidden" => self.model_mlp_hidden = parse_one(key, value)?,
            "model.encoder_hidden" => self.model_encoder_hidden = parse_one(key, value)?,
            "train.epochs" => self.train_epochs = parse_one(key, value)?,
            "train.batch_size" => self.train_batch_size = parse_one(key, value)?,
            "train.learning_rate" => self.train_learning_rate = parse_one(key, value)?,
            "train.weight_decay" => self.train_weight_decay = parse_one(key, value)?,
            "train.epsilon" => self.train_epsilon = parse_one(key, value)?,
            "train.p_none" => self.train_p_none = parse_one(key, value)?,
            "train.seed" => self.train_seed = parse_one(key, value)?,
            "train.tag" => self.train_tag = value.parse()?,
            "train.mask_training" => self.train_mask_training = parse_one(key, value)?,
            "train.warmup_dropout_epochs" => {
                self.train_warmup_dropout_epochs = parse_one(key, value)?
            }
            "eval.seeds" => self.eval_seeds = parse_list(key, value)?,
            "out.dir" => self.out_dir = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.data_feature_lens.len();
        if m == 0 {
            return Err(Error::Config("need at least one modality".into()));
        }
        if self.model_tokens.len() != m || self.model_native_widths.len() != m {
            return Err(Error::Config(format!(
                "model.tokens and model.native_widths must list {m} entries to match data.feature_lens"
            )));
        }
        if self.model_common_width == 0 || self.model_common_width % self.model_heads != 0 {
            return Err(Error::Config(format!(
                "model.common_width {} must be a positive multiple of model.heads {}",
                self.model_common_width, self.model_heads
            )));
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("eval.seeds must be nonempty".into()));
        }
        self.synth_config().validate()?;
        self.train_config().validate()
    }

    /// Canonical rendering: every key, fixed order.
    pub fn resolved(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let seeds = self
            .eval_seeds
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "data.feature_lens = {}\n\
             data.latent_width = {}\n\
             data.classes = {}\n\
             data.samples = {}\n\
             data.noise = {}\n\
             data.map_gain = {}\n\
             data.seed = {}\n\
             model.tokens = {}\n\
             model.native_widths = {}\n\
             model.common_width = {}\n\
             model.aggregated_tokens = {}\n\
             model.heads = {}\n\
             model.mlp_hidden = {}\n\
             model.encoder_hidden = {}\n\
             train.epochs = {}\n\
             train.batch_size = {}\n\
             train.learning_rate = {}\n\
             train.weight_decay = {}\n\
             train.epsilon = {}\n\
             train.p_none = {}\n\
             train.seed = {}\n\
             train.tag = {}\n\
             train.mask_training = {}\n\
             train.warmup_dropout_epochs = {}\n\
             eval.seeds = {}\n\
             out.dir = {}\n",
            list(&self.data_feature_lens),
            self.data_latent_width,
            self.data_classes,
            self.data_samples,
            self.data_noise,
            self.data_map_gain,
            self.data_seed,
            list(&self.model_tokens),
            list(&self.model_native_widths),
            self.model_common_width,
            self.model_aggregated_tokens,
            self.model_heads,
            self.model_mlp_hidden,
            self.model_encoder_hidden,
            self.train_epochs,
            self.train_batch_size,
            self.train_learning_rate,
            self.train_weight_decay,
            self.train_epsilon,
            self.train_p_none,
            self.train_seed,
            self.train_tag.as_str(),
            self.train_mask_training,
            self.train_warmup_dropout_epochs,
            seeds,
            self.out_dir,
        )
    }

    /// Short content hash of the resolved config, used to name run
    /// directories.
    pub fn run_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.resolved().as_bytes());
        let digest = h.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            feature_lens: self.data_feature_lens.clone(),
            latent_width: self.data_latent_width,
            classes: self.data_classes,
            samples: self.data_samples,
            noise: self.data_noise,
            map_gain: self.data_map_gain,
            seed: self.data_seed,
        }
    }

    pub fn modality_specs(&self) -> Vec<ModalitySpec> {
        (0..self.data_feature_lens.len())
            .map(|i| ModalitySpec {
                name: format!("m{i}"),
                native_width: self.model_native_widths[i],
                token_count: self.model_tokens[i],
                feature_len: self.data_feature_lens[i],
            })
            .collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            common_width: self.model_common_width,
            aggregated_tokens: self.model_aggregated_tokens,
            heads: self.model_heads,
            mlp_hidden: self.model_mlp_hidden,
            encoder_hidden: self.model_encoder_hidden,
            classes: self.data_classes,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.train_batch_size,
            learning_rate: self.train_learning_rate,
            weight_decay: self.train_weight_decay,
            epsilon: self.train_epsilon,
            p_none: self.train_p_none,
            seed: self.train_seed,
            tag: self.train_tag,
            mask_training: self.train_mask_training,
            warmup_dropout_epochs: self.train_warmup_dropout_epochs,
            freeze_lp_zero: false,
        }
    }
}
