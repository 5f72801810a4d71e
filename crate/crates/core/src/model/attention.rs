//! Causal attention layers that report each head's max logit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;

/// Index of a parameter inside [`crate::model::Model::params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Largest scaled pre-softmax logit of one head over one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxLogitRecord {
    pub layer: usize,
    pub head: usize,
    pub s_max: f64,
}

/// Standard multi-head attention. `wq`, `wk`, `wv` are `d_model × (H·d_head)`
/// with head `h` owning columns `h·d_head..(h+1)·d_head`; `wo` is `(H·d_head) × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
    pub d_head: usize,
    pub rope_base: f64,
}

/// Simplified multi-head latent attention.
///
/// Queries: `c_q = X W_dq`, content `c_q W_qc`, rotary `rope(c_q W_qr)`, both per head.
/// Keys: `c_kv = X W_dkv`, content `c_kv W_kc` per head, rotary `rope(X W_kr)` shared
/// by every head. Values `c_kv W_v` per head.
#[derive(Clone, Debug, PartialEq)]
pub struct MlaLayer {
    pub wdq: ParamId,
    pub wqc: ParamId,
    pub wqr: ParamId,
    pub wdkv: ParamId,
    pub wkc: ParamId,
    pub wkr: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
    pub d_head_c: usize,
    pub d_head_r: usize,
    pub d_head_v: usize,
    pub scale_dim: usize,
    pub rope_base: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionLayer {
    Mha(MhaLayer),
    Mla(MlaLayer),
}

/// Tape nodes of the current forward pass, one per model parameter.
pub struct ParamNodes<'a>(pub &'a [NodeId]);

impl ParamNodes<'_> {
    pub fn get(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }
}

/// Output of one attention layer on the tape.
pub struct AttentionOutput {
    pub out: NodeId,
    /// Scaled logits `[B·H × T × T]`, kept for inspection.
    pub scores: NodeId,
    /// Per-head max over the batch of causally valid (`i ≥ j`) scaled logits.
    pub s_max: Vec<f64>,
}

impl AttentionLayer {
    pub fn n_heads(&self) -> usize {
        match self {
            AttentionLayer::Mha(l) => l.n_heads,
            AttentionLayer::Mla(l) => l.n_heads,
        }
    }

    /// Runs the layer on `x: [B·T × d_model]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamNodes,
        x: NodeId,
        batch: usize,
        seq: usize,
    ) -> Result<AttentionOutput> {
        match self {
            AttentionLayer::Mha(l) => mha_forward(tape, l, params, x, batch, seq),
            AttentionLayer::Mla(l) => mla_forward(tape, l, params, x, batch, seq),
        }
    }
}

pub fn mha_forward(
    tape: &mut Tape,
    layer: &MhaLayer,
    params: &ParamNodes,
    x: NodeId,
    batch: usize,
    seq: usize,
) -> Result<AttentionOutput> {
    let q = tape.matmul(x, params.get(layer.wq))?;
    let k = tape.matmul(x, params.get(layer.wk))?;
    let v = tape.matmul(x, params.get(layer.wv))?;
    let q = tape.rope(q, layer.d_head, seq, layer.rope_base)?;
    let k = tape.rope(k, layer.d_head, seq, layer.rope_base)?;
    attend(tape, q, k, v, params.get(layer.wo), batch, seq, layer.n_heads, layer.d_head)
}

pub fn mla_forward(
    tape: &mut Tape,
    layer: &MlaLayer,
    params: &ParamNodes,
    x: NodeId,
    batch: usize,
    seq: usize,
) -> Result<AttentionOutput> {
    let h = layer.n_heads;
    let c_q = tape.matmul(x, params.get(layer.wdq))?;
    let q_c = tape.matmul(c_q, params.get(layer.wqc))?;
    let q_r = tape.matmul(c_q, params.get(layer.wqr))?;
    let q_r = tape.rope(q_r, layer.d_head_r, seq, layer.rope_base)?;
    let c_kv = tape.matmul(x, params.get(layer.wdkv))?;
    let k_c = tape.matmul(c_kv, params.get(layer.wkc))?;
    let k_r = tape.matmul(x, params.get(layer.wkr))?;
    let k_r = tape.rope(k_r, layer.d_head_r, seq, layer.rope_base)?;
    let v = tape.matmul(c_kv, params.get(layer.wv))?;
    let q = tape.head_concat(q_c, q_r, h, false)?;
    let k = tape.head_concat(k_c, k_r, h, true)?;
    attend(tape, q, k, v, params.get(layer.wo), batch, seq, h, layer.scale_dim)
}

#[allow(clippy::too_many_arguments)]
fn attend(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    wo: NodeId,
    batch: usize,
    seq: usize,
    heads: usize,
    scale_dim: usize,
) -> Result<AttentionOutput> {
    let qs = tape.split_heads(q, batch, seq, heads)?;
    let ks = tape.split_heads(k, batch, seq, heads)?;
    let vs = tape.split_heads(v, batch, seq, heads)?;
    let raw = tape.batch_matmul(qs, ks, true)?;
    let scores = tape.scale(raw, 1.0 / (scale_dim as f64).sqrt());
    let s_max = causal_max(tape.value(scores).data(), batch, heads, seq);
    let probs = tape.softmax(scores, true)?;
    let ctx = tape.batch_matmul(probs, vs, false)?;
    let merged = tape.merge_heads(ctx, batch, seq, heads)?;
    let out = tape.matmul(merged, wo)?;
    Ok(AttentionOutput { out, scores, s_max })
}

/// Per-head maximum of `scores[(b·H + h), i, j]` over `b` and `j ≤ i`.
pub fn causal_max(scores: &[f64], batch: usize, heads: usize, seq: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; heads];
    for b in 0..batch {
        for (h, best) in out.iter_mut().enumerate() {
            let block = &scores[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            for i in 0..seq {
                for &s in &block[i * seq..i * seq + i + 1] {
                    if s > *best {
                        *best = s;
                    }
                }
            }
        }
    }
    out
}
