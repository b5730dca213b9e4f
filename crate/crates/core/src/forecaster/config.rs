use serde::{Deserialize, Serialize};

use crate::attention::PerformerConfig;
use crate::embedding::EmbeddingAblation;
use crate::error::{Error, Result};
use crate::nn::NormKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Full,
    Performer,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "performer" => Ok(Self::Performer),
            other => Err(Error::config(format!("unknown attention `{other}` (expected full or performer)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One token per (timestep, variable).
    Spatiotemporal,
    /// One token per timestep holding all variables.
    Temporal,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Spatiotemporal => "spatiotemporal",
            Mode::Temporal => "temporal",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatiotemporal" => Ok(Self::Spatiotemporal),
            "temporal" => Ok(Self::Temporal),
            other => Err(Error::config(format!("unknown mode `{other}` (expected spatiotemporal or temporal)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub emb: f64,
    pub qkv: f64,
    pub ff: f64,
    pub attn_out: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_local: bool,
    pub no_global: bool,
    pub no_var_emb: bool,
    pub no_time_emb: bool,
    pub no_value_emb: bool,
}

impl Ablation {
    pub fn embedding(&self) -> EmbeddingAblation {
        EmbeddingAblation {
            no_var_emb: self.no_var_emb,
            no_time_emb: self.no_time_emb,
            no_value_emb: self.no_value_emb,
        }
    }
}

/// Longest global key sequence exact attention is allowed on.
pub const FULL_ATTENTION_MAX_LEN: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub start_token_len: usize,
    pub time_emb_dim: usize,
    pub attention: AttentionKind,
    pub performer: PerformerConfig,
    pub norm: NormKind,
    pub initial_convs: usize,
    pub intermediate_convs: usize,
    pub dropout: Dropout,
    pub mode: Mode,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// The toy-dataset architecture: d 100, ff 400, 4 heads, 4+4 layers,
    /// performer attention, batch norm, start token 4, time embedding 12,
    /// feed-forward dropout 0.3.
    pub fn toy() -> Self {
        Self {
            d_model: 100,
            ff_dim: 400,
            heads: 4,
            enc_layers: 4,
            dec_layers: 4,
            start_token_len: 4,
            time_emb_dim: 12,
            attention: AttentionKind::Performer,
            performer: PerformerConfig::default(),
            norm: NormKind::Batch,
            initial_convs: 0,
            intermediate_convs: 0,
            dropout: Dropout {
                emb: 0.0,
                qkv: 0.0,
                ff: 0.3,
                attn_out: 0.0,
            },
            mode: Mode::Spatiotemporal,
            ablation: Ablation::default(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn local_enabled(&self) -> bool {
        !self.ablation.no_local
    }

    pub fn global_enabled(&self) -> bool {
        !self.ablation.no_global
    }

    /// Checks invariants and applies the temporal-mode implications
    /// (no local attention, no variable embedding).
    pub fn validated(mut self) -> Result<Self> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.ff_dim == 0 || self.time_emb_dim == 0 {
            return Err(Error::config("ff_dim and time_emb_dim must be positive"));
        }
        if self.intermediate_convs > self.enc_layers.saturating_sub(1) {
            return Err(Error::config(format!(
                "{} intermediate convs need at least {} encoder layers",
                self.intermediate_convs,
                self.intermediate_convs + 1
            )));
        }
        if self.performer.features == 0 {
            return Err(Error::config("performer feature count must be at least 1"));
        }
        let d = self.dropout;
        if [d.emb, d.qkv, d.ff, d.attn_out].iter().any(|p| !(0.0..1.0).contains(p)) {
            return Err(Error::config("dropout rates must lie in [0, 1)"));
        }
        if self.mode == Mode::Temporal {
            self.ablation.no_local = true;
            self.ablation.no_var_emb = true;
        }
        Ok(self)
    }

    /// Per-variable encoder length after all halving convolutions.
    pub fn memory_steps(&self, context_len: usize) -> Result<usize> {
        let mut len = context_len;
        for _ in 0..self.initial_convs + self.intermediate_convs {
            if len % 2 != 0 {
                return Err(Error::config(format!(
                    "a halving convolution needs an even length, got {len} (context {context_len})"
                )));
            }
            len /= 2;
        }
        Ok(len)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}
