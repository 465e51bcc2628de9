//! Model hyperparameters, their validation rules, and the analytic
//! properties that follow from them (receptive field, parameter count,
//! cache memory).

use std::fmt;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Keys of the configuration document, in canonical order.
pub const CONFIG_KEYS: [&str; 9] = [
    "dim",
    "n_layers",
    "head_dim",
    "hidden_dim",
    "n_heads",
    "n_kv_heads",
    "window_size",
    "context_len",
    "vocab_size",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    /// Sliding window width W: the number of keys a query sees, itself included.
    pub window_size: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

/// A broken configuration rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NonPositive(&'static str),
    DimMismatch,
    HeadsNotDivisible,
    WindowOutOfRange,
}

impl Violation {
    pub fn rule(&self) -> String {
        match self {
            Violation::NonPositive(field) => format!("{field} > 0"),
            Violation::DimMismatch => "dim == n_heads*head_dim".to_string(),
            Violation::HeadsNotDivisible => "n_heads % n_kv_heads == 0".to_string(),
            Violation::WindowOutOfRange => "1 <= window_size <= context_len".to_string(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rule())
    }
}

impl ModelConfig {
    /// 4096-dim, 32-layer configuration with about 7.24B parameters.
    pub const fn seven_b() -> Self {
        Self {
            dim: 4096,
            n_layers: 32,
            head_dim: 128,
            hidden_dim: 14336,
            n_heads: 32,
            n_kv_heads: 8,
            window_size: 4096,
            context_len: 8192,
            vocab_size: 32000,
        }
    }

    /// Desk-scale configuration used by the equivalence checks.
    pub const fn toy() -> Self {
        Self {
            dim: 64,
            n_layers: 4,
            head_dim: 16,
            hidden_dim: 128,
            n_heads: 4,
            n_kv_heads: 2,
            window_size: 8,
            context_len: 128,
            vocab_size: 256,
        }
    }

    fn fields(&self) -> [(&'static str, usize); 9] {
        [
            ("dim", self.dim),
            ("n_layers", self.n_layers),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("window_size", self.window_size),
            ("context_len", self.context_len),
            ("vocab_size", self.vocab_size),
        ]
    }

    /// Checks every invariant. The error side is never empty.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut violations: Vec<Violation> = self
            .fields()
            .iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| Violation::NonPositive(k))
            .collect();

        if self.n_heads.checked_mul(self.head_dim) != Some(self.dim) {
            violations.push(Violation::DimMismatch);
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            violations.push(Violation::HeadsNotDivisible);
        }
        if self.window_size == 0 || self.window_size > self.context_len {
            violations.push(Violation::WindowOutOfRange);
        }

        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    /// `validate` as a `Result` carrying the crate error type.
    pub fn validated(self) -> Result<Self> {
        self.validate().map_err(Error::InvalidConfig)?;
        Ok(self)
    }

    /// Parses the JSON configuration document: an object holding exactly
    /// the nine [`CONFIG_KEYS`] with positive integer values.
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::MalformedConfig(e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(Error::MalformedConfig("expected an object".into()));
        };
        if let Some(unknown) = obj.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::UnknownKey(unknown.clone()));
        }

        let get = |key: &str| -> Result<usize> { read_key(&obj, key) };
        Self {
            dim: get("dim")?,
            n_layers: get("n_layers")?,
            head_dim: get("head_dim")?,
            hidden_dim: get("hidden_dim")?,
            n_heads: get("n_heads")?,
            n_kv_heads: get("n_kv_heads")?,
            window_size: get("window_size")?,
            context_len: get("context_len")?,
            vocab_size: get("vocab_size")?,
        }
        .validated()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// `n_layers * W`: how far information can travel through the stack,
    /// counting W positions per layer.
    pub fn theoretical_span(&self) -> usize {
        self.n_layers * self.window_size
    }

    /// Number of input positions visible to one output position when the
    /// window holds W keys including the query itself: each layer reaches
    /// back `W - 1` positions.
    pub fn exact_reach(&self) -> usize {
        self.n_layers * (self.window_size - 1) + 1
    }

    /// Scalar count of all weights, with untied input embedding and output
    /// projection.
    pub fn parameter_count(&self) -> u64 {
        let dim = self.dim as u64;
        let q_width = (self.n_heads * self.head_dim) as u64;
        let kv_width = (self.n_kv_heads * self.head_dim) as u64;
        let hidden = self.hidden_dim as u64;
        let vocab = self.vocab_size as u64;

        let per_layer = 2 * dim
            + dim * q_width
            + 2 * dim * kv_width
            + q_width * dim
            + 2 * dim * hidden
            + hidden * dim;

        vocab * dim + self.n_layers as u64 * per_layer + dim + dim * vocab
    }

    /// Unbounded cache entries over rolling cache entries after `seq_len` tokens.
    pub fn cache_memory_ratio(&self, seq_len: usize) -> f64 {
        assert!(seq_len >= 1, "seq_len must be positive");
        seq_len as f64 / seq_len.min(self.window_size) as f64
    }

    /// Floats held by one layer's rolling cache (keys and values).
    pub fn cache_floats_per_layer(&self) -> usize {
        2 * self.n_kv_heads * self.window_size * self.head_dim
    }
}

fn read_key(obj: &Map<String, Value>, key: &str) -> Result<usize> {
    let value = obj.get(key).ok_or_else(|| Error::MissingKey(key.to_string()))?;
    value
        .as_u64()
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| Error::NonInteger {
            key: key.to_string(),
            value: value.to_string(),
        })
}
