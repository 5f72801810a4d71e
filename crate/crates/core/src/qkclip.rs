//! QK-Clip: rescale query/key projection weights after the optimizer step so
//! that heads whose max logit exceeded `tau` are pulled back to it.
//!
//! Per-head variant, for `γ = τ / S_max^h` when `S_max^h > τ`:
//! - MHA: `W_q^h`, `W_k^h` scaled by `√γ`.
//! - MLA: `W_qc^h`, `W_kc^h` scaled by `√γ`, `W_qr^h` by `γ`, shared `W_kr` untouched.
//!
//! Every logit of head `h` is bilinear in (query weights, key weights), so after
//! the rescale each logit of that head is exactly `γ` times what it was.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaxLogitRecord, Model, ParamId};
use crate::optim::maybe_inf;
use crate::param::{AttnRole, ParamTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipVariant {
    PerHead,
    GlobalNaive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipPolicy {
    #[serde(with = "maybe_inf")]
    pub tau: f64,
    pub variant: ClipVariant,
    /// Query share of the global scaling (`γ^α` on queries, `γ^(1-α)` on keys).
    pub alpha: f64,
}

impl Default for ClipPolicy {
    fn default() -> Self {
        Self {
            tau: 100.0,
            variant: ClipVariant::PerHead,
            alpha: 0.5,
        }
    }
}

impl ClipPolicy {
    pub fn per_head(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn global(tau: f64, alpha: f64) -> Self {
        Self {
            tau,
            variant: ClipVariant::GlobalNaive,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("clip tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("clip alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEvent {
    pub step: u64,
    pub layer: usize,
    pub head: usize,
    pub s_max: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct HeadEntry {
    layer: usize,
    head: usize,
    slices: Vec<(ParamId, AttnRole)>,
}

/// Clippable parameter slices of every attention head, plus the attention weights
/// that must never be clipped.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParamRegistry {
    n_layers: usize,
    n_heads: usize,
    heads: Vec<HeadEntry>,
    never_clip: Vec<ParamId>,
}

impl HeadParamRegistry {
    pub fn from_model(model: &Model) -> Result<Self> {
        let (n_layers, n_heads) = (model.config.n_layers, model.config.n_heads);
        let mut heads: Vec<HeadEntry> = (0..n_layers * n_heads)
            .map(|i| HeadEntry {
                layer: i / n_heads,
                head: i % n_heads,
                slices: Vec::new(),
            })
            .collect();
        let mut never_clip = Vec::new();
        let mut shared_rotary = vec![0usize; n_layers];
        for (i, p) in model.params.iter().enumerate() {
            let Some(slice) = p.head_slice else { continue };
            if slice.layer >= n_layers {
                return Err(Error::Registry(format!("{} claims layer {}", p.name, slice.layer)));
            }
            if slice.role.is_clippable() {
                if slice.heads != n_heads || slice.heads * slice.head_width != p.value.cols() {
                    return Err(Error::Registry(format!(
                        "{} is not split into {n_heads} head blocks",
                        p.name
                    )));
                }
                for h in 0..n_heads {
                    heads[slice.layer * n_heads + h].slices.push((ParamId(i), slice.role));
                }
            } else {
                if slice.role == AttnRole::SharedKeyRotary {
                    shared_rotary[slice.layer] += 1;
                }
                never_clip.push(ParamId(i));
            }
        }
        for entry in &heads {
            let count = |r: AttnRole| entry.slices.iter().filter(|(_, role)| *role == r).count();
            let rotary = count(AttnRole::QueryRotary);
            let ok = count(AttnRole::Query) == 1
                && count(AttnRole::Key) == 1
                && rotary <= 1
                && rotary == shared_rotary[entry.layer];
            if !ok {
                return Err(Error::Registry(format!(
                    "layer {} head {} has an incomplete set of query/key slices",
                    entry.layer, entry.head
                )));
            }
        }
        Ok(Self {
            n_layers,
            n_heads,
            heads,
            never_clip,
        })
    }

    pub fn total_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn never_clip(&self) -> &[ParamId] {
        &self.never_clip
    }

    /// Parameters registered as clippable for `(layer, head)`.
    pub fn head_params(&self, layer: usize, head: usize) -> Vec<(ParamId, AttnRole)> {
        self.heads[layer * self.n_heads + head].slices.clone()
    }

    /// Every attention parameter, each exactly once.
    pub fn registered_params(&self) -> Vec<ParamId> {
        let mut set = BTreeSet::new();
        for e in &self.heads {
            for (id, _) in &e.slices {
                set.insert(id.0);
            }
        }
        set.extend(self.never_clip.iter().map(|id| id.0));
        set.into_iter().map(ParamId).collect()
    }

    /// Orders `records` by head, checking each registered head appears exactly once.
    fn s_max_by_head(&self, records: &[MaxLogitRecord]) -> Result<Vec<f64>> {
        let mut out: Vec<Option<f64>> = vec![None; self.heads.len()];
        for r in records {
            if r.layer >= self.n_layers || r.head >= self.n_heads {
                return Err(Error::Registry(format!(
                    "record for unknown head (layer {}, head {})",
                    r.layer, r.head
                )));
            }
            let slot = &mut out[r.layer * self.n_heads + r.head];
            if slot.is_some() {
                return Err(Error::Registry(format!(
                    "duplicate record for layer {} head {}",
                    r.layer, r.head
                )));
            }
            if r.s_max.is_nan() || r.s_max == f64::INFINITY {
                return Err(Error::Numeric(format!(
                    "max logit of layer {} head {} is {}",
                    r.layer, r.head, r.s_max
                )));
            }
            *slot = Some(r.s_max);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| {
                    Error::Registry(format!(
                        "missing record for layer {} head {}",
                        i / self.n_heads,
                        i % self.n_heads
                    ))
                })
            })
            .collect()
    }
}

/// Per-head QK-Clip. Heads at or below `tau` are left bit-identical.
pub fn qk_clip_per_head(
    params: &mut [ParamTensor],
    registry: &HeadParamRegistry,
    records: &[MaxLogitRecord],
    policy: &ClipPolicy,
    step: u64,
) -> Result<Vec<ClipEvent>> {
    policy.validate()?;
    let s_max = registry.s_max_by_head(records)?;
    let mut events = Vec::new();
    for (entry, &s) in registry.heads.iter().zip(&s_max) {
        if s <= policy.tau {
            continue;
        }
        let gamma = policy.tau / s;
        for &(id, role) in &entry.slices {
            let factor = match role {
                AttnRole::QueryRotary => gamma,
                _ => gamma.sqrt(),
            };
            params[id.0].scale_head(entry.head, factor);
        }
        events.push(ClipEvent {
            step,
            layer: entry.layer,
            head: entry.head,
            s_max: s,
            gamma,
        });
    }
    Ok(events)
}

/// Global QK-Clip: one `γ = min(1, τ / max_h S_max^h)` for the whole model, queries
/// scaled by `γ^α`, keys by `γ^(1-α)`, MLA rotary queries by `γ`.
pub fn qk_clip_global(
    params: &mut [ParamTensor],
    registry: &HeadParamRegistry,
    records: &[MaxLogitRecord],
    policy: &ClipPolicy,
    step: u64,
) -> Result<Vec<ClipEvent>> {
    policy.validate()?;
    let s_max = registry.s_max_by_head(records)?;
    let worst = s_max.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if worst <= policy.tau {
        return Ok(Vec::new());
    }
    let gamma = policy.tau / worst;
    let mut events = Vec::with_capacity(registry.heads.len());
    for (entry, &s) in registry.heads.iter().zip(&s_max) {
        for &(id, role) in &entry.slices {
            let factor = match role {
                AttnRole::Query => gamma.powf(policy.alpha),
                AttnRole::Key => gamma.powf(1.0 - policy.alpha),
                _ => gamma,
            };
            params[id.0].scale_head(entry.head, factor);
        }
        events.push(ClipEvent {
            step,
            layer: entry.layer,
            head: entry.head,
            s_max: s,
            gamma,
        });
    }
    Ok(events)
}

/// Dispatches on `policy.variant`.
pub fn qk_clip(
    params: &mut [ParamTensor],
    registry: &HeadParamRegistry,
    records: &[MaxLogitRecord],
    policy: &ClipPolicy,
    step: u64,
) -> Result<Vec<ClipEvent>> {
    match policy.variant {
        ClipVariant::PerHead => qk_clip_per_head(params, registry, records, policy, step),
        ClipVariant::GlobalNaive => qk_clip_global(params, registry, records, policy, step),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipStats {
    pub heads_triggered: usize,
    pub total_heads: usize,
    /// Fraction of heads clipped at least once.
    pub fraction: f64,
    pub last_trigger_step: Option<u64>,
    /// Events whose step falls inside the queried window.
    pub events_in_window: usize,
}

pub fn clip_trigger_stats(events: &[ClipEvent], total_heads: usize, window: RangeInclusive<u64>) -> ClipStats {
    let heads: BTreeSet<(usize, usize)> = events.iter().map(|e| (e.layer, e.head)).collect();
    ClipStats {
        heads_triggered: heads.len(),
        total_heads,
        fraction: if total_heads == 0 {
            0.0
        } else {
            heads.len() as f64 / total_heads as f64
        },
        last_trigger_step: events.iter().map(|e| e.step).max(),
        events_in_window: events.iter().filter(|e| window.contains(&e.step)).count(),
    }
}
