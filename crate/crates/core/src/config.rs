//! Run configuration: model, optimizer and data settings, serialised as JSON
//! with unknown keys rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Scmhsa,
    MhsaBaseline,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Scmhsa => "scmhsa",
            Variant::MhsaBaseline => "mhsa_baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u32> for Precision {
    type Error = String;
    fn try_from(v: u32) -> std::result::Result<Self, String> {
        match v {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Input window length M.
    pub seq_len: usize,
    pub heads: usize,
    /// Per-head projection width; `d / heads` when unset.
    pub d_head: Option<usize>,
    pub blocks: usize,
    /// Feed-forward hidden width; `4d` when unset.
    pub ffn_width: Option<usize>,
    /// Prediction MLP hidden width; `d` when unset.
    pub head_hidden: Option<usize>,
    pub variant: Variant,
    /// Weight of the semantic-similarity term.
    pub lambda: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration used for synthetic-data training.
    pub fn desk() -> Self {
        Self {
            d: 32,
            seq_len: 5,
            heads: 4,
            d_head: None,
            blocks: 2,
            ffn_width: None,
            head_hidden: None,
            variant: Variant::Scmhsa,
            lambda: 0.1,
            precision: Precision::F64,
        }
    }

    /// Full-size configuration: 6 blocks of 6 heads at width 768.
    pub fn full_scale() -> Self {
        Self {
            d: 768,
            heads: 6,
            blocks: 6,
            ..Self::desk()
        }
    }

    /// Configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            seq_len: 3,
            heads: 2,
            blocks: 1,
            lambda: 0.5,
            ..Self::desk()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_head.unwrap_or(self.d / self.heads.max(1))
    }

    /// Head width actually used by attention: `d/N` for the baseline.
    pub fn attention_head_width(&self) -> usize {
        match self.variant {
            Variant::Scmhsa => self.head_dim(),
            Variant::MhsaBaseline => self.d / self.heads,
        }
    }

    pub fn ffn(&self) -> usize {
        self.ffn_width.unwrap_or(4 * self.d)
    }

    pub fn hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("d", self.d),
            ("seq_len", self.seq_len),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("d_head", self.head_dim()),
            ("ffn_width", self.ffn()),
            ("head_hidden", self.hidden()),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d % 2 != 0 {
            return Err(Error::Config(format!("d must be even for positional encoding, got {}", self.d)));
        }
        if self.variant == Variant::MhsaBaseline && self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "mhsa_baseline needs heads ({}) to divide d ({})",
                self.heads, self.d
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when unset.
    pub grad_clip: Option<f64>,
    /// Autoregressive steps scored by evaluation.
    pub rollout_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch: 32,
            epochs: 25,
            seed: 2023,
            grad_clip: None,
            rollout_steps: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub stride: usize,
    pub ratios: [f64; 3],
    pub split_seed: u64,
    /// Split whole sequences instead of windows.
    pub split_by_sequence: bool,
    /// Only emit windows whose frame spans do not overlap.
    pub disjoint_windows: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            stride: 5,
            ratios: [0.7, 0.15, 0.15],
            split_seed: 2023,
            split_by_sequence: false,
            disjoint_windows: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
}

impl RunSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: RunSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical JSON: fixed field order, no whitespace.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}
