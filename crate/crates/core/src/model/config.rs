use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ROPE_BASE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Mha,
    Mla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Per-head width of MHA queries/keys/values, and of MLA values.
    pub d_head: usize,
    pub attention_kind: AttentionKind,
    pub d_cq: usize,
    pub d_ckv: usize,
    pub d_head_c: usize,
    pub d_head_r: usize,
    /// Overrides the MLA logit divisor `√(d_head_c + d_head_r)` when set.
    pub mla_scale_dim: Option<usize>,
    pub d_ff: usize,
    pub seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_head: 16,
            attention_kind: AttentionKind::Mha,
            d_cq: 32,
            d_ckv: 32,
            d_head_c: 12,
            d_head_r: 4,
            mla_scale_dim: None,
            d_ff: 256,
            seq_len: 64,
            rope_base: ROPE_BASE,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn mla() -> Self {
        Self {
            attention_kind: AttentionKind::Mla,
            ..Self::default()
        }
    }

    /// Width of one head's query/key vector, i.e. the `d` in `1/√d`.
    pub fn logit_dim(&self) -> usize {
        match self.attention_kind {
            AttentionKind::Mha => self.d_head,
            AttentionKind::Mla => self
                .mla_scale_dim
                .unwrap_or(self.d_head_c + self.d_head_r),
        }
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return bad("rope_base and norm_eps must be positive".into());
        }
        match self.attention_kind {
            AttentionKind::Mha => {
                if self.d_head % 2 != 0 {
                    return bad(format!("d_head must be even for RoPE, got {}", self.d_head));
                }
            }
            AttentionKind::Mla => {
                if self.d_head_r == 0 || self.d_head_r % 2 != 0 {
                    return bad(format!("d_head_r must be even and positive, got {}", self.d_head_r));
                }
                if self.d_cq == 0 || self.d_ckv == 0 || self.d_head_c == 0 {
                    return bad("MLA dims must be positive".into());
                }
                if self.mla_scale_dim == Some(0) {
                    return bad("mla_scale_dim must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitMode {
    /// Truncated normal with std 0.02, output projections zero.
    Standard,
    /// Standard, then the query/key-side projections are multiplied by `scale`,
    /// which inflates every attention logit by `scale²`.
    Hot { scale: f64 },
}

impl Default for InitMode {
    fn default() -> Self {
        InitMode::Standard
    }
}

impl InitMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            InitMode::Hot { scale } if !(*scale > 0.0 && scale.is_finite()) => Err(Error::Config(
                format!("hot init scale must be positive, got {scale}"),
            )),
            _ => Ok(()),
        }
    }
}
