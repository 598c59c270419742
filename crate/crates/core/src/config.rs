//! Structural hyperparameters of a SEA attention layer.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SeaError};
use crate::mask::TopKMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeaConfig {
    /// Sequence length T.
    pub seq_len: usize,
    /// Width K of the compressed attention matrix.
    pub compressed_len: usize,
    /// Keys kept per query row in the full mask.
    pub top_k: usize,
    pub head_dim: usize,
    pub heads: usize,
    /// Width of the estimator's shared hidden state.
    pub hidden: usize,
    /// Decoder width reduction factor.
    pub width_reduction: usize,
    /// Decoder channel expansion factor.
    pub channel_expansion: usize,
    /// Random feature count of the kernel estimator.
    pub features: usize,
    pub mode: TopKMode,
    pub causal: bool,
    /// Encode all heads jointly instead of one head at a time.
    pub concat_heads: bool,
    pub orthogonal_features: bool,
}

impl Default for SeaConfig {
    fn default() -> Self {
        SeaConfig {
            seq_len: 64,
            compressed_len: 16,
            top_k: 8,
            head_dim: 8,
            heads: 2,
            hidden: 64,
            width_reduction: 2,
            channel_expansion: 4,
            features: 64,
            mode: TopKMode::PerQuery,
            causal: false,
            concat_heads: false,
            orthogonal_features: false,
        }
    }
}

impl SeaConfig {
    /// Default causal configuration, grouped per time step.
    pub fn causal() -> Self {
        SeaConfig {
            causal: true,
            mode: TopKMode::CausalPerBatch,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SeaError::Config(m));
        for (name, v) in [
            ("seq_len", self.seq_len),
            ("compressed_len", self.compressed_len),
            ("top_k", self.top_k),
            ("head_dim", self.head_dim),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("width_reduction", self.width_reduction),
            ("channel_expansion", self.channel_expansion),
            ("features", self.features),
        ] {
            if v == 0 {
                return err(format!("{name} must be at least 1"));
            }
        }
        if self.compressed_len % self.width_reduction != 0 {
            return err(format!(
                "compressed_len {} is not divisible by width_reduction {}",
                self.compressed_len, self.width_reduction
            ));
        }
        if self.compressed_len > self.seq_len {
            return err(format!(
                "compressed_len {} exceeds seq_len {}",
                self.compressed_len, self.seq_len
            ));
        }
        if self.top_k > self.seq_len {
            return err(format!("top_k {} exceeds seq_len {}", self.top_k, self.seq_len));
        }
        if self.causal && !matches!(self.mode, TopKMode::PerQuery | TopKMode::CausalPerBatch) {
            return err(format!("{} selection mixes time steps and cannot be causal", self.mode));
        }
        Ok(())
    }

    /// Same structure with a different `top_k`, validated.
    pub fn with_top_k(&self, k: usize) -> Result<Self> {
        let c = SeaConfig { top_k: k, ..self.clone() };
        c.validate()?;
        Ok(c)
    }

    /// Flat `key = value` view, the inverse of [`SeaConfig::apply`].
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seq_len", self.seq_len.to_string());
        put("compressed_len", self.compressed_len.to_string());
        put("top_k", self.top_k.to_string());
        put("head_dim", self.head_dim.to_string());
        put("heads", self.heads.to_string());
        put("hidden", self.hidden.to_string());
        put("width_reduction", self.width_reduction.to_string());
        put("channel_expansion", self.channel_expansion.to_string());
        put("features", self.features.to_string());
        put("mode", self.mode.to_string());
        put("causal", self.causal.to_string());
        put("concat_heads", self.concat_heads.to_string());
        put("orthogonal_features", self.orthogonal_features.to_string());
        m
    }

    /// Sets one field from its textual form. Unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| SeaError::Config(format!("cannot parse `{value}` for `{key}`")))
        }
        match key {
            "seq_len" => self.seq_len = parse(key, value)?,
            "compressed_len" => self.compressed_len = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "head_dim" => self.head_dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "width_reduction" => self.width_reduction = parse(key, value)?,
            "channel_expansion" => self.channel_expansion = parse(key, value)?,
            "features" => self.features = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "causal" => self.causal = parse(key, value)?,
            "concat_heads" => self.concat_heads = parse(key, value)?,
            "orthogonal_features" => self.orthogonal_features = parse(key, value)?,
            _ => return Err(SeaError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = SeaConfig::default();
        for (k, v) in pairs {
            c.apply(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}
