use serde::{Deserialize, Serialize};

use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    Sinusoidal,
    /// Sorted random subset of sinusoidal rows, resampled every forward pass.
    #[default]
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Rows in the sinusoidal table; label positions are drawn from `[0, max_positions)`.
    pub max_positions: usize,
    pub pe_mode: PeMode,
    /// Maximum number of generated tokens, EOS excluded.
    pub max_decode_len: usize,
    pub dropout: f64,
    /// Multiply token embeddings by `sqrt(d_model)` before adding positions.
    pub scale_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            vocab_size: Vocab::SIZE,
            max_positions: 150,
            pe_mode: PeMode::Label,
            max_decode_len: 16,
            dropout: 0.0,
            scale_embeddings: true,
        }
    }
}

impl ModelConfig {
    /// Selected configuration for long runs: 8 heads, 1024-wide state and feed-forward.
    pub fn large() -> Self {
        Self { d_model: 1024, n_heads: 8, d_ff: 1024, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Decoder input length for a full generation: SOS plus `max_decode_len` tokens.
    pub fn decoder_span(&self) -> usize {
        self.max_decode_len + 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err("d_model, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model % 2 != 0 {
            return Err("d_model must be even for sinusoidal encodings".into());
        }
        if self.vocab_size != Vocab::SIZE {
            return Err(format!("vocab_size must be {}", Vocab::SIZE));
        }
        if self.decoder_span() > self.max_positions {
            return Err("max_decode_len + 1 must not exceed max_positions".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}
