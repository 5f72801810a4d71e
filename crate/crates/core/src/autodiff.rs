//! Reverse-mode automatic differentiation over whole-tensor primitives.
//!
//! A [`Tape`] records every primitive in execution order together with its
//! forward value. [`Tape::backward`] replays the records in strict reverse
//! order and sums contributions into per-node gradient accumulators.

use crate::error::{Error, Result};
use crate::tensor::{gemm, rope_rotate, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// Rank-3 batched product; `bool` is true for `a · bᵀ`.
    BatchMatMul(NodeId, NodeId, bool),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    Sum(NodeId),
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
    Rope {
        x: NodeId,
        head_dim: usize,
        seq_len: usize,
        base: f64,
    },
    SplitHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    HeadConcat {
        a: NodeId,
        b: NodeId,
        heads: usize,
        shared_b: bool,
    },
    Softmax {
        x: NodeId,
        causal: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of `like`'s shape when nothing flowed into it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [g, r, c] => Ok((g, r, c)),
        ref s => Err(Error::Dimension(format!("expected a rank-3 tensor, got {s:?}"))),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Batched `a[g] · b[g]` (or `a[g] · b[g]ᵀ` when `transpose_b`).
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (ga, m, k) = dims3(self.value(a))?;
        let (gb, rb, cb) = dims3(self.value(b))?;
        let (kb, n) = if transpose_b { (cb, rb) } else { (rb, cb) };
        if ga != gb || k != kb {
            return Err(Error::shapes(
                "batch_matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0; ga * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for g in 0..ga {
            gemm(
                m,
                k,
                n,
                &ad[g * m * k..],
                false,
                &bd[g * k * n..],
                transpose_b,
                &mut out[g * m * n..],
                false,
            );
        }
        let v = Tensor::new(&[ga, m, n], out)?;
        Ok(self.push(v, Op::BatchMatMul(a, b, transpose_b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Row-wise RMS normalization `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        let g = self.value(gain);
        if g.len() != d {
            return Err(Error::shapes("rms_norm", self.value(x).shape(), g.shape()));
        }
        let xv = self.value(x).data();
        let gv = g.data();
        let mut out = vec![0.0; n * d];
        let mut inv_rms = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for c in 0..d {
                out[r * d + c] = row[c] * inv * gv[c];
            }
        }
        let v = Tensor::new(&[n, d], out)?;
        Ok(self.push(v, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("token id {bad} out of range for vocab {vocab}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let v = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Weighted mean cross-entropy: `Σ_r w_r (logsumexp(l_r) - l_r[t_r]) / Σ_r w_r`.
    /// Rows with zero weight are excluded.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (n, vocab) = self.value(logits).dims2()?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target {bad} out of range for vocab {vocab}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: every position is masked".into()));
        }
        let weights: Vec<f64> = mask
            .iter()
            .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
            .collect();
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut loss = 0.0;
        for r in 0..n {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            if weights[r] == 0.0 {
                row.iter_mut().for_each(|p| *p = 0.0);
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[targets[r]]);
            softmax_in_place(row);
        }
        let probs = Tensor::new(&[n, vocab], probs)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
        ))
    }

    /// RoPE on `x: [N × H·head_dim]`; row `r` sits at position `r % seq_len` and each
    /// head-width chunk is rotated independently.
    pub fn rope(&mut self, x: NodeId, head_dim: usize, seq_len: usize, base: f64) -> Result<NodeId> {
        let v = rope_rows(self.value(x), head_dim, seq_len, base, false)?;
        Ok(self.push(
            v,
            Op::Rope {
                x,
                head_dim,
                seq_len,
                base,
            },
        ))
    }

    /// `[B·T × H·d] → [B·H × T × d]`.
    pub fn split_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> Result<NodeId> {
        let v = split_heads(self.value(x), batch, seq, heads)?;
        Ok(self.push(
            v,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// `[B·H × T × d] → [B·T × H·d]`.
    pub fn merge_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> Result<NodeId> {
        let v = merge_heads(self.value(x), batch, seq, heads)?;
        Ok(self.push(
            v,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Per-head column concatenation: head `h` of the output is `[a_h, b_h]`.
    /// When `b` has exactly `db` columns (not `H·db`) it is shared by every head.
    pub fn head_concat(&mut self, a: NodeId, b: NodeId, heads: usize, shared_b: bool) -> Result<NodeId> {
        let (n, ca) = self.value(a).dims2()?;
        let (nb, cb) = self.value(b).dims2()?;
        if n != nb || ca % heads != 0 || (!shared_b && cb % heads != 0) {
            return Err(Error::shapes(
                "head_concat",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let da = ca / heads;
        let db = if shared_b { cb } else { cb / heads };
        let w = da + db;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * heads * w];
        for r in 0..n {
            for h in 0..heads {
                let dst = &mut out[r * heads * w + h * w..r * heads * w + (h + 1) * w];
                dst[..da].copy_from_slice(&av[r * ca + h * da..r * ca + (h + 1) * da]);
                let boff = if shared_b { 0 } else { h * db };
                dst[da..].copy_from_slice(&bv[r * cb + boff..r * cb + boff + db]);
            }
        }
        let v = Tensor::new(&[n, heads * w], out)?;
        Ok(self.push(
            v,
            Op::HeadConcat {
                a,
                b,
                heads,
                shared_b,
            },
        ))
    }

    /// Softmax over the last dimension. With `causal`, the input must be `[G × T × T]`
    /// and entry `(i, j)` with `j > i` is excluded and set to exactly zero.
    pub fn softmax(&mut self, x: NodeId, causal: bool) -> Result<NodeId> {
        let xv = self.value(x);
        xv.ensure_finite("softmax")?;
        let v = if causal {
            let (g, t, t2) = dims3(xv)?;
            if t != t2 {
                return Err(Error::Dimension(format!(
                    "causal softmax needs square score blocks, got {:?}",
                    xv.shape()
                )));
            }
            let mut out = xv.data().to_vec();
            for gi in 0..g {
                for i in 0..t {
                    let row = &mut out[(gi * t + i) * t..(gi * t + i + 1) * t];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|p| *p = 0.0);
                }
            }
            Tensor::new(xv.shape(), out)?
        } else {
            xv.softmax_rows()?
        };
        Ok(self.push(v, Op::Softmax { x, causal }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.backprop_node(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |id: NodeId, g: Tensor| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.axpy(1.0, &g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, gout.matmul_t(bv)?)?;
                acc(*b, av.t_matmul(gout)?)?;
            }
            Op::BatchMatMul(a, b, tb) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (g, m, k) = dims3(av)?;
                let n = if *tb { bv.shape()[1] } else { bv.shape()[2] };
                let mut da = vec![0.0; g * m * k];
                let mut db = vec![0.0; g * k * n];
                let (ad, bd, gd) = (av.data(), bv.data(), gout.data());
                for gi in 0..g {
                    let (a_s, b_s, g_s) = (&ad[gi * m * k..], &bd[gi * k * n..], &gd[gi * m * n..]);
                    if *tb {
                        // C = A Bᵀ with B: n×k.  dA = dC B, dB = dCᵀ A.
                        gemm(m, n, k, g_s, false, b_s, false, &mut da[gi * m * k..], false);
                        gemm(n, m, k, g_s, true, a_s, false, &mut db[gi * k * n..], false);
                    } else {
                        // C = A B with B: k×n.  dA = dC Bᵀ, dB = Aᵀ dC.
                        gemm(m, n, k, g_s, false, b_s, true, &mut da[gi * m * k..], false);
                        gemm(k, m, n, a_s, true, g_s, false, &mut db[gi * k * n..], false);
                    }
                }
                acc(*a, Tensor::new(av.shape(), da)?)?;
                acc(*b, Tensor::new(bv.shape(), db)?)?;
            }
            Op::Add(a, b) => {
                acc(*a, gout.clone())?;
                acc(*b, gout.clone())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, gout.zip_with(bv, |g, y| g * y)?)?;
                acc(*b, gout.zip_with(av, |g, x| g * x)?)?;
            }
            Op::Scale(a, s) => acc(*a, gout.scale(*s))?,
            Op::Silu(a) => {
                let g = gout.zip_with(self.value(*a), |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })?;
                acc(*a, g)?;
            }
            Op::Sum(a) => {
                let s = gout.data()[0];
                acc(*a, Tensor::full(self.value(*a).shape(), s))?;
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let (n, d) = xv.dims2()?;
                let (xd, gd) = (xv.data(), gout.data());
                let mut dx = vec![0.0; n * d];
                let mut dgain = vec![0.0; d];
                for r in 0..n {
                    let inv = inv_rms[r];
                    let mut dot = 0.0;
                    for c in 0..d {
                        let gy = gd[r * d + c] * gv[c];
                        dot += gy * xd[r * d + c];
                        dgain[c] += gd[r * d + c] * xd[r * d + c] * inv;
                    }
                    let coef = dot * inv * inv * inv / d as f64;
                    for c in 0..d {
                        dx[r * d + c] = gd[r * d + c] * gv[c] * inv - xd[r * d + c] * coef;
                    }
                }
                acc(*x, Tensor::new(&[n, d], dx)?)?;
                acc(*gain, Tensor::new(self.value(*gain).shape(), dgain)?)?;
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[i * d + c] += gout.data()[r * d + c];
                    }
                }
                acc(*table, Tensor::new(tv.shape(), dt)?)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = gout.data()[0];
                let vocab = probs.cols();
                let mut dl = probs.data().to_vec();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut dl[r * vocab..(r + 1) * vocab];
                    if w == 0.0 {
                        continue;
                    }
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= w * s);
                }
                acc(*logits, Tensor::new(probs.shape(), dl)?)?;
            }
            Op::Rope {
                x,
                head_dim,
                seq_len,
                base,
            } => acc(*x, rope_rows(gout, *head_dim, *seq_len, *base, true)?)?,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => acc(*x, merge_heads(gout, *batch, *seq, *heads)?)?,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => acc(*x, split_heads(gout, *batch, *seq, *heads)?)?,
            Op::HeadConcat {
                a,
                b,
                heads,
                shared_b,
            } => {
                let (n, ca) = self.value(*a).dims2()?;
                let cb = self.value(*b).cols();
                let da = ca / heads;
                let db = if *shared_b { cb } else { cb / heads };
                let w = da + db;
                let mut ga = vec![0.0; n * ca];
                let mut gb = vec![0.0; n * cb];
                let gd = gout.data();
                for r in 0..n {
                    for h in 0..*heads {
                        let src = &gd[r * heads * w + h * w..r * heads * w + (h + 1) * w];
                        ga[r * ca + h * da..r * ca + (h + 1) * da].copy_from_slice(&src[..da]);
                        let boff = if *shared_b { 0 } else { h * db };
                        for (k, &v) in src[da..].iter().enumerate() {
                            gb[r * cb + boff + k] += v;
                        }
                    }
                }
                acc(*a, Tensor::new(&[n, ca], ga)?)?;
                acc(*b, Tensor::new(&[n, cb], gb)?)?;
            }
            Op::Softmax { x, causal } => {
                let p = &node.value;
                let c = *p.shape().last().unwrap();
                let mut dx = vec![0.0; p.len()];
                let (pd, gd) = (p.data(), gout.data());
                for (r, out) in dx.chunks_mut(c).enumerate() {
                    // In causal mode row r covers columns 0..=i with i = r % c.
                    let upto = if *causal { r % c + 1 } else { c };
                    let pr = &pd[r * c..r * c + upto];
                    let gr = &gd[r * c..r * c + upto];
                    let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..upto {
                        out[j] = pr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::new(p.shape(), dx)?)?;
            }
        }
        Ok(())
    }
}

fn rope_rows(x: &Tensor, head_dim: usize, seq_len: usize, base: f64, inverse: bool) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    if head_dim == 0 || head_dim % 2 != 0 || c % head_dim != 0 || seq_len == 0 {
        return Err(Error::Dimension(format!(
            "rope: width {c} is not a multiple of even head dim {head_dim}"
        )));
    }
    let mut out = x.data().to_vec();
    for r in 0..n {
        let pos = (r % seq_len) as f64;
        for chunk in out[r * c..(r + 1) * c].chunks_mut(head_dim) {
            rope_rotate(chunk, pos, base, inverse);
        }
    }
    Tensor::new(&[n, c], out)
}

fn split_heads(x: &Tensor, batch: usize, seq: usize, heads: usize) -> Result<Tensor> {
    let (n, c) = x.dims2()?;
    if n != batch * seq || c % heads != 0 {
        return Err(Error::Dimension(format!(
            "split_heads: {:?} is not [{batch}·{seq} × {heads}·d]",
            x.shape()
        )));
    }
    let d = c / heads;
    let xd = x.data();
    let mut out = vec![0.0; n * c];
    for b in 0..batch {
        for t in 0..seq {
            let src = &xd[(b * seq + t) * c..(b * seq + t + 1) * c];
            for h in 0..heads {
                let dst = ((b * heads + h) * seq + t) * d;
                out[dst..dst + d].copy_from_slice(&src[h * d..(h + 1) * d]);
            }
        }
    }
    Tensor::new(&[batch * heads, seq, d], out)
}

fn merge_heads(x: &Tensor, batch: usize, seq: usize, heads: usize) -> Result<Tensor> {
    let (g, t, d) = dims3(x)?;
    if g != batch * heads || t != seq {
        return Err(Error::Dimension(format!(
            "merge_heads: {:?} is not [{batch}·{heads} × {seq} × d]",
            x.shape()
        )));
    }
    let c = heads * d;
    let xd = x.data();
    let mut out = vec![0.0; batch * seq * c];
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..seq {
                let src = ((b * heads + h) * seq + t) * d;
                let dst = (b * seq + t) * c + h * d;
                out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
            }
        }
    }
    Tensor::new(&[batch * seq, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Central-difference check of `f` at `x` against the tape gradient.
    fn grad_check(x: Tensor, f: impl Fn(&mut Tape, NodeId) -> NodeId) {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let loss = f(&mut tape, xid);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get_or_zeros(xid, x.shape());
        let h = 1e-5;
        let eval = |v: &Tensor| {
            let mut t = Tape::new();
            let id = t.leaf(v.clone());
            let l = f(&mut t, id);
            t.value(l).data()[0]
        };
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / (a.abs() + 1e-8);
            assert!(rel < 1e-4 || (a - fd).abs() < 1e-9, "coord {i}: analytic {a} vs fd {fd}");
        }
    }

    fn weighted_sum(tape: &mut Tape, y: NodeId, seed: u64) -> NodeId {
        let shape = tape.value(y).shape().to_vec();
        let w = Rng::new(seed).normal_tensor(&shape, 1.0);
        let wid = tape.leaf(w);
        let p = tape.mul(y, wid).unwrap();
        tape.sum(p)
    }

    #[test]
    fn sum_gives_ones_and_half_square_gives_identity() {
        let w = Rng::new(1).normal_tensor(&[3, 4], 1.0);
        let mut tape = Tape::new();
        let id = tape.leaf(w.clone());
        let s = tape.sum(id);
        let g = tape.backward(s).unwrap();
        assert!(g.get(id).unwrap().data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::new();
        let id = tape.leaf(w.clone());
        let sq = tape.mul(id, id).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert!(g.get(id).unwrap().max_abs_diff(&w) < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let id = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(id), Err(Error::Contract(_))));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let other = rng.normal_tensor(&[4, 3], 1.0);
        grad_check(rng.normal_tensor(&[2, 4], 1.0), |t, x| {
            let o = t.leaf(other.clone());
            let y = t.matmul(x, o).unwrap();
            weighted_sum(t, y, 1)
        });
        grad_check(rng.normal_tensor(&[3, 5], 1.0), |t, x| {
            let y = t.silu(x);
            weighted_sum(t, y, 2)
        });
        let gain = rng.normal_tensor(&[5], 1.0);
        grad_check(rng.normal_tensor(&[3, 5], 1.0), |t, x| {
            let g = t.leaf(gain.clone());
            let y = t.rms_norm(x, g, 1e-6).unwrap();
            weighted_sum(t, y, 3)
        });
        grad_check(rng.normal_tensor(&[5], 1.0), |t, g| {
            let x = t.leaf(Rng::new(4).normal_tensor(&[3, 5], 1.0));
            let y = t.rms_norm(x, g, 1e-6).unwrap();
            weighted_sum(t, y, 5)
        });
        grad_check(rng.normal_tensor(&[4, 6], 1.0), |t, x| {
            let y = t.rope(x, 2, 2, 100.0).unwrap();
            weighted_sum(t, y, 6)
        });
        grad_check(rng.normal_tensor(&[2, 3, 3], 1.0), |t, x| {
            let y = t.softmax(x, true).unwrap();
            weighted_sum(t, y, 7)
        });
        grad_check(rng.normal_tensor(&[3, 4], 1.0), |t, x| {
            let y = t.softmax(x, false).unwrap();
            weighted_sum(t, y, 8)
        });
        grad_check(rng.normal_tensor(&[4, 5], 1.0), |t, x| {
            t.cross_entropy(x, &[0, 4, 2, 1], &[true, false, true, true]).unwrap()
        });
        grad_check(rng.normal_tensor(&[5, 3], 1.0), |t, x| {
            let y = t.embedding(x, &[4, 0, 4, 2]).unwrap();
            weighted_sum(t, y, 9)
        });
    }

    #[test]
    fn batched_and_head_reshapes_match_finite_differences() {
        let mut rng = Rng::new(31);
        let b = rng.normal_tensor(&[2, 4, 3], 1.0);
        grad_check(rng.normal_tensor(&[2, 3, 4], 1.0), |t, x| {
            let o = t.leaf(b.clone());
            let y = t.batch_matmul(x, o, false).unwrap();
            weighted_sum(t, y, 10)
        });
        let bt = rng.normal_tensor(&[2, 5, 4], 1.0);
        grad_check(rng.normal_tensor(&[2, 3, 4], 1.0), |t, x| {
            let o = t.leaf(bt.clone());
            let y = t.batch_matmul(o, x, true).unwrap_or_else(|_| unreachable!());
            weighted_sum(t, y, 11)
        });
        grad_check(rng.normal_tensor(&[6, 4], 1.0), |t, x| {
            let y = t.split_heads(x, 2, 3, 2).unwrap();
            let z = t.merge_heads(y, 2, 3, 2).unwrap();
            let s = t.silu(z);
            weighted_sum(t, s, 12)
        });
        let shared = rng.normal_tensor(&[3, 2], 1.0);
        grad_check(rng.normal_tensor(&[3, 4], 1.0), |t, x| {
            let s = t.leaf(shared.clone());
            let y = t.head_concat(x, s, 2, true).unwrap();
            weighted_sum(t, y, 13)
        });
        grad_check(rng.normal_tensor(&[3, 2], 1.0), |t, s| {
            let x = t.leaf(Rng::new(14).normal_tensor(&[3, 4], 1.0));
            let y = t.head_concat(x, s, 2, true).unwrap();
            let z = t.silu(y);
            weighted_sum(t, z, 15)
        });
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn split_merge_layout() {
        // batch 1, seq 2, heads 2, d 1: rows [a0 a1], [b0 b1]
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = split_heads(&x, 1, 2, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1]);
        assert_eq!(s.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(merge_heads(&s, 1, 2, 2).unwrap(), x);
    }
}
