//! Run configuration: `key = value` lines, `#` starts a comment. Model keys
//! follow the hyperparameter table names of the toy architecture. Every key
//! must be known.

use std::path::{Path, PathBuf};

use stfm_core::dataflow::SplitSpec;
use stfm_core::forecaster::ModelConfig;
use stfm_core::training::TrainConfig;
use stfm_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Forecaster,
    LinearAr,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Forecaster => "forecaster",
            ModelKind::LinearAr => "linear-ar",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub model_kind: ModelKind,
    pub context_len: usize,
    pub target_len: usize,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out_dir: PathBuf::from("run"),
            model_kind: ModelKind::Forecaster,
            context_len: 128,
            target_len: 32,
            split: SplitSpec::default(),
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for key `{key}` (expected true or false)"))),
    }
}

/// Wraps an enum parser so the error names the key.
fn parse_named<T: std::str::FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| Error::Config(format!("key `{key}`: {e}")))
}

/// `none` or a number.
fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "model" => {
                self.model_kind = match value {
                    "forecaster" => ModelKind::Forecaster,
                    "linear-ar" => ModelKind::LinearAr,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value `{value}` for key `model` (expected forecaster or linear-ar)"
                        )))
                    }
                }
            }
            "context_len" => self.context_len = parse(key, value)?,
            "target_len" => self.target_len = parse(key, value)?,
            "split_train" => self.split.train = parse(key, value)?,
            "split_val" => self.split.val = parse(key, value)?,
            "split_test" => self.split.test = parse(key, value)?,

            "mode" => m.mode = parse_named(key, value)?,
            "model_dim" => m.d_model = parse(key, value)?,
            "ff_dim" => m.ff_dim = parse(key, value)?,
            "attn_heads" => m.heads = parse(key, value)?,
            "enc_layers" => m.enc_layers = parse(key, value)?,
            "dec_layers" => m.dec_layers = parse(key, value)?,
            "initial_convs" => m.initial_convs = parse(key, value)?,
            "inter_convs" => m.intermediate_convs = parse(key, value)?,
            "attn_type" => m.attention = parse_named(key, value)?,
            "performer_features" => m.performer.features = parse(key, value)?,
            "performer_kernel" => m.performer.kernel = parse_named(key, value)?,
            "redraw_interval" => m.performer.redraw_interval = parse(key, value)?,
            "normalization" => m.norm = parse_named(key, value)?,
            "start_token_len" => m.start_token_len = parse(key, value)?,
            "time_emb_dim" => m.time_emb_dim = parse(key, value)?,
            "dropout_ff" => m.dropout.ff = parse(key, value)?,
            "dropout_qkv" => m.dropout.qkv = parse(key, value)?,
            "dropout_token" => m.dropout.attn_out = parse(key, value)?,
            "dropout_emb" => m.dropout.emb = parse(key, value)?,
            "no_local" => m.ablation.no_local = parse_bool(key, value)?,
            "no_global" => m.ablation.no_global = parse_bool(key, value)?,
            "no_var_emb" => m.ablation.no_var_emb = parse_bool(key, value)?,
            "no_time_emb" => m.ablation.no_time_emb = parse_bool(key, value)?,
            "no_value_emb" => m.ablation.no_value_emb = parse_bool(key, value)?,

            "l2_weight" => t.l2 = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "learning_rate" => t.lr = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "max_steps" => t.max_steps = parse_optional(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "plateau_factor" => t.plateau_factor = parse(key, value)?,
            "plateau_patience" => t.plateau_patience = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "loss" => t.loss = parse_named(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse_optional(key, value)?,
            "probe" => t.probe = parse_bool(key, value)?,
            "probe_lr" => t.probe_lr = parse(key, value)?,
            "train_stride" => t.train_stride = parse(key, value)?,
            "eval_stride" => t.eval_stride = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}
