//! Toy decoder-only transformer: token embedding, pre-norm blocks of
//! (attention, SiLU MLP), final RMS norm and an untied LM head.

pub mod attention;
mod config;

pub use attention::{AttentionLayer, MaxLogitRecord, MhaLayer, MlaLayer, ParamId, ParamNodes};
pub use config::{AttentionKind, InitMode, ModelConfig};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::param::{AttnRole, HeadSlice, ParamTensor};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// A batch of token sequences for next-token prediction.
///
/// Each of the `batch` sequences holds `seq + 1` tokens; positions `0..seq` are
/// inputs and positions `1..=seq` are targets. `loss_mask[b·seq + t]` says whether
/// the target at position `t + 1` contributes to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, tokens: Vec<usize>, loss_mask: Vec<bool>) -> Result<Self> {
        if tokens.len() != batch * (seq + 1) || loss_mask.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(Error::Dimension(format!(
                "token batch {batch}×{seq} needs {} tokens and {} mask entries, got {} and {}",
                batch * (seq + 1),
                batch * seq,
                tokens.len(),
                loss_mask.len()
            )));
        }
        Ok(Self {
            batch,
            seq,
            tokens,
            loss_mask,
        })
    }

    /// Every target scored.
    pub fn unmasked(batch: usize, seq: usize, tokens: Vec<usize>) -> Result<Self> {
        Self::new(batch, seq, tokens, vec![true; batch * seq])
    }

    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.tokens[b * (self.seq + 1)..(b + 1) * (self.seq + 1)]
    }

    pub fn inputs(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| self.sequence(b)[..self.seq].to_vec())
            .collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| self.sequence(b)[1..].to_vec())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    attn_norm: ParamId,
    attn: AttentionLayer,
    mlp_norm: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<ParamTensor>,
    embed: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
    lm_head: ParamId,
}

/// Everything recorded by one forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub loss: NodeId,
    pub param_nodes: Vec<NodeId>,
    pub records: Vec<MaxLogitRecord>,
    /// Normalized input of each attention layer, `[B·T × d_model]`.
    pub attn_inputs: Vec<NodeId>,
}

struct Builder<'a> {
    params: Vec<ParamTensor>,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn add(&mut self, p: ParamTensor) -> ParamId {
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamTensor {
        let value = if std == 0.0 {
            Tensor::zeros(&[rows, cols])
        } else {
            self.rng.trunc_normal_tensor(&[rows, cols], std)
        };
        ParamTensor::matrix(name, value)
    }

    fn attn(
        &mut self,
        layer: usize,
        name: &str,
        shape: (usize, usize),
        std: f64,
        role: AttnRole,
        heads: usize,
        head_width: usize,
    ) -> ParamId {
        let p = self
            .matrix(format!("layers.{layer}.attn.{name}"), shape.0, shape.1, std)
            .with_head_slice(HeadSlice {
                layer,
                role,
                heads,
                head_width,
            });
        self.add(p)
    }

    fn gain(&mut self, name: String, d: usize) -> ParamId {
        self.add(ParamTensor::new(name, Tensor::full(&[d], 1.0)))
    }
}

impl Model {
    pub fn new(config: ModelConfig, init: InitMode, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        init.validate()?;
        let c = &config;
        let hot = match init {
            InitMode::Standard => 1.0,
            InitMode::Hot { scale } => scale,
        };
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        let embed_value = b.rng.trunc_normal_tensor(&[c.vocab_size, c.d_model], INIT_STD);
        let embed = b.add(ParamTensor::new("embed", embed_value));
        let (h, d) = (c.n_heads, c.d_model);
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let attn_norm = b.gain(format!("layers.{l}.attn_norm"), d);
            let qk_std = INIT_STD * hot;
            let attn = match c.attention_kind {
                AttentionKind::Mha => {
                    let w = h * c.d_head;
                    AttentionLayer::Mha(MhaLayer {
                        wq: b.attn(l, "wq", (d, w), qk_std, AttnRole::Query, h, c.d_head),
                        wk: b.attn(l, "wk", (d, w), qk_std, AttnRole::Key, h, c.d_head),
                        wv: b.attn(l, "wv", (d, w), INIT_STD, AttnRole::Value, h, c.d_head),
                        wo: b.attn(l, "wo", (w, d), 0.0, AttnRole::Output, 1, d),
                        n_heads: h,
                        d_head: c.d_head,
                        rope_base: c.rope_base,
                    })
                }
                AttentionKind::Mla => {
                    let (dc, dr, dv) = (c.d_head_c, c.d_head_r, c.d_head);
                    AttentionLayer::Mla(MlaLayer {
                        wdq: b.attn(l, "wdq", (d, c.d_cq), INIT_STD, AttnRole::QueryDown, 1, c.d_cq),
                        wqc: b.attn(l, "wqc", (c.d_cq, h * dc), qk_std, AttnRole::Query, h, dc),
                        wqr: b.attn(l, "wqr", (c.d_cq, h * dr), qk_std, AttnRole::QueryRotary, h, dr),
                        wdkv: b.attn(l, "wdkv", (d, c.d_ckv), INIT_STD, AttnRole::KvDown, 1, c.d_ckv),
                        wkc: b.attn(l, "wkc", (c.d_ckv, h * dc), qk_std, AttnRole::Key, h, dc),
                        wkr: b.attn(l, "wkr", (d, dr), qk_std, AttnRole::SharedKeyRotary, 1, dr),
                        wv: b.attn(l, "wv", (c.d_ckv, h * dv), INIT_STD, AttnRole::Value, h, dv),
                        wo: b.attn(l, "wo", (h * dv, d), 0.0, AttnRole::Output, 1, d),
                        n_heads: h,
                        d_head_c: dc,
                        d_head_r: dr,
                        d_head_v: dv,
                        scale_dim: c.logit_dim(),
                        rope_base: c.rope_base,
                    })
                }
            };
            let mlp_norm = b.gain(format!("layers.{l}.mlp_norm"), d);
            let up = b.matrix(format!("layers.{l}.mlp.w_up"), d, c.d_ff, INIT_STD);
            let w_up = b.add(up);
            let down = b.matrix(format!("layers.{l}.mlp.w_down"), c.d_ff, d, 0.0);
            let w_down = b.add(down);
            blocks.push(Block {
                attn_norm,
                attn,
                mlp_norm,
                w_up,
                w_down,
            });
        }
        let final_norm = b.gain("final_norm".into(), d);
        let head_value = b.rng.trunc_normal_tensor(&[d, c.vocab_size], INIT_STD);
        let lm_head = b.add(ParamTensor::new("lm_head", head_value));
        Ok(Self {
            params: b.params,
            config,
            embed,
            blocks,
            final_norm,
            lm_head,
        })
    }

    pub fn param(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn attention(&self, layer: usize) -> &AttentionLayer {
        &self.blocks[layer].attn
    }

    pub fn attention_norm(&self, layer: usize) -> ParamId {
        self.blocks[layer].attn_norm
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Full forward pass recorded on a fresh tape.
    pub fn forward(&self, batch: &TokenBatch) -> Result<ForwardPass> {
        let c = &self.config;
        if batch.seq > c.seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds model context {}",
                batch.seq, c.seq_len
            )));
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab {}",
                c.vocab_size
            )));
        }
        let mut tape = Tape::new();
        let param_nodes: Vec<NodeId> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let nodes = ParamNodes(&param_nodes);
        let (bs, seq) = (batch.batch, batch.seq);

        let mut x = tape.embedding(nodes.get(self.embed), &batch.inputs())?;
        let mut records = Vec::with_capacity(c.total_heads());
        let mut attn_inputs = Vec::with_capacity(c.n_layers);
        for (l, block) in self.blocks.iter().enumerate() {
            let xn = tape.rms_norm(x, nodes.get(block.attn_norm), c.norm_eps)?;
            attn_inputs.push(xn);
            let att = block.attn.forward(&mut tape, &nodes, xn, bs, seq)?;
            records.extend(att.s_max.iter().enumerate().map(|(h, &s)| MaxLogitRecord {
                layer: l,
                head: h,
                s_max: s,
            }));
            x = tape.add(x, att.out)?;
            let xn = tape.rms_norm(x, nodes.get(block.mlp_norm), c.norm_eps)?;
            let up = tape.matmul(xn, nodes.get(block.w_up))?;
            let act = tape.silu(up);
            let down = tape.matmul(act, nodes.get(block.w_down))?;
            x = tape.add(x, down)?;
        }
        let xn = tape.rms_norm(x, nodes.get(self.final_norm), c.norm_eps)?;
        let logits = tape.matmul(xn, nodes.get(self.lm_head))?;
        let loss = tape.cross_entropy(logits, &batch.targets(), &batch.loss_mask)?;
        Ok(ForwardPass {
            tape,
            loss,
            param_nodes,
            records,
            attn_inputs,
        })
    }

    /// Mean next-token cross-entropy over scored positions, and every head's max logit.
    pub fn forward_loss(&self, batch: &TokenBatch) -> Result<(f64, Vec<MaxLogitRecord>)> {
        let pass = self.forward(batch)?;
        Ok((pass.tape.value(pass.loss).data()[0], pass.records))
    }

    /// Loss, records and the gradient of the loss for every parameter (in `params` order).
    pub fn loss_and_grads(&self, batch: &TokenBatch) -> Result<(f64, Vec<MaxLogitRecord>, Vec<Tensor>)> {
        let pass = self.forward(batch)?;
        let loss = pass.tape.value(pass.loss).data()[0];
        let grads = pass.tape.backward(pass.loss)?;
        let g = pass
            .param_nodes
            .iter()
            .zip(&self.params)
            .map(|(&n, p)| grads.get_or_zeros(n, p.value.shape()))
            .collect();
        Ok((loss, pass.records, g))
    }

    /// Runs attention layer `layer` alone on `x: [B·T × d_model]`.
    /// Returns the layer output, the scaled logits `[B·H × T × T]` and per-head records.
    pub fn attention_forward(
        &self,
        layer: usize,
        x: &Tensor,
        batch: usize,
        seq: usize,
    ) -> Result<(Tensor, Tensor, Vec<MaxLogitRecord>)> {
        let attn = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Input(format!("no attention layer {layer}")))?;
        let (rows, cols) = x.dims2()?;
        if rows != batch * seq || cols != self.config.d_model {
            return Err(Error::Dimension(format!(
                "attention input {:?} is not [{batch}·{seq} × {}]",
                x.shape(),
                self.config.d_model
            )));
        }
        let mut tape = Tape::new();
        let param_nodes: Vec<NodeId> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let xid = tape.leaf(x.clone());
        let out = attn.attn.forward(&mut tape, &ParamNodes(&param_nodes), xid, batch, seq)?;
        let records = out
            .s_max
            .iter()
            .enumerate()
            .map(|(h, &s)| MaxLogitRecord {
                layer,
                head: h,
                s_max: s,
            })
            .collect();
        Ok((tape.value(out.out).clone(), tape.value(out.scores).clone(), records))
    }
}
