use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, LshConfig};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Architecture hyperparameters of an encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    /// Width of the bottleneck around each transformer unit; 0 disables it.
    pub bottleneck_dim: usize,
    pub share_layers: bool,
    pub reversible: bool,
    pub lsh: Option<LshConfig>,
    pub num_segments: usize,
}

impl ModelConfig {
    /// Plain BERT-style encoder with the usual `4H` feed-forward width.
    pub fn base(vocab_size: usize, hidden_dim: usize, num_layers: usize, num_heads: usize, max_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: hidden_dim,
            hidden_dim,
            ff_dim: 4 * hidden_dim,
            num_layers,
            num_heads,
            max_len,
            bottleneck_dim: 0,
            share_layers: false,
            reversible: false,
            lsh: None,
            num_segments: 2,
        }
    }

    pub fn factored(&self) -> bool {
        self.embed_dim != self.hidden_dim
    }

    /// Queries and keys share a projection whenever LSH attention is on.
    pub fn shared_qk(&self) -> bool {
        self.lsh.is_some()
    }

    /// Width at which attention and feed-forward sublayers operate.
    pub fn unit_width(&self) -> usize {
        if self.reversible {
            self.hidden_dim / 2
        } else if self.bottleneck_dim > 0 {
            self.bottleneck_dim
        } else {
            self.hidden_dim
        }
    }

    /// Number of distinct layer weight sets held in memory.
    pub fn stored_layers(&self) -> usize {
        if self.share_layers {
            self.num_layers.min(1)
        } else {
            self.num_layers
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { num_heads: self.num_heads, max_len: self.max_len }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("ff_dim", self.ff_dim),
            ("num_heads", self.num_heads),
            ("max_len", self.max_len),
            ("num_segments", self.num_segments),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Input(format!("{name} must be positive")));
        }
        if self.bottleneck_dim > 0 && self.bottleneck_dim >= self.hidden_dim {
            return Err(Error::Input(format!(
                "bottleneck_dim {} must be smaller than hidden_dim {}",
                self.bottleneck_dim, self.hidden_dim
            )));
        }
        if self.reversible && !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::Input("reversible layers need an even hidden_dim".into()));
        }
        if self.reversible && self.bottleneck_dim > 0 {
            return Err(Error::Input("reversible layers cannot be combined with a bottleneck".into()));
        }
        if let Some(lsh) = &self.lsh {
            lsh.validate()?;
        }
        self.attention().head_dim(self.unit_width())?;
        Ok(())
    }
}
