//! Synthetic token streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Uniform iid tokens; nothing to learn, every target scored.
    IidTokens,
    /// Random first half, repeated verbatim; second-half targets scored.
    Copy,
    /// Random filler, a run of distinct tokens `S`, then `S` again. Targets in the
    /// second copy after its first token are determined by an earlier occurrence
    /// of their query token.
    Induction,
}

/// Which targets count toward the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// Every next-token target.
    #[default]
    All,
    /// Only targets the context fully determines (the repeated part of copy and
    /// induction sequences). Same as `all` for iid tokens.
    Determined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub scoring: Scoring,
    /// Data stream seed; the run seed is used when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, vocab: usize, seq_len: usize) -> Self {
        Self {
            kind,
            vocab,
            seq_len,
            scoring: Scoring::All,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check(self.seq_len)
    }

    fn check(&self, seq: usize) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config(format!("task vocab must be >= 2, got {}", self.vocab)));
        }
        if seq == 0 {
            return Err(Error::Config("task sequence length must be positive".into()));
        }
        if self.kind == TaskKind::Induction {
            let (_, k_max) = induction_span(seq);
            if seq < 3 {
                return Err(Error::Config(format!("induction needs seq_len >= 3, got {seq}")));
            }
            if self.vocab <= k_max {
                return Err(Error::Config(format!(
                    "induction at seq_len {seq} needs vocab > {k_max}, got {}",
                    self.vocab
                )));
            }
        }
        Ok(())
    }
}

/// Range of the repeated segment length for a sequence of `seq + 1` tokens.
fn induction_span(seq: usize) -> (usize, usize) {
    let k_max = (seq + 1) / 2;
    ((seq / 4).clamp(2, k_max.max(2)), k_max)
}

/// Draws `batch` sequences of `seq + 1` tokens with their loss mask.
pub fn gen_batch(task: &SyntheticTask, batch: usize, seq: usize, rng: &mut Rng) -> Result<TokenBatch> {
    task.check(seq)?;
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let v = task.vocab;
    let n = seq + 1;
    let mut tokens = Vec::with_capacity(batch * n);
    let mut mask = Vec::with_capacity(batch * seq);
    let mut pool: Vec<usize> = (0..v).collect();
    for _ in 0..batch {
        // Targets at token positions >= first_scored are determined by context.
        let first_scored = match task.kind {
            TaskKind::IidTokens => {
                tokens.extend((0..n).map(|_| rng.below(v)));
                1
            }
            TaskKind::Copy => {
                let half = n / 2;
                let pad = n - 2 * half;
                let start = tokens.len();
                tokens.extend((0..pad + half).map(|_| rng.below(v)));
                tokens.extend_from_within(start + pad..start + pad + half);
                pad + half
            }
            TaskKind::Induction => {
                let (lo, hi) = induction_span(seq);
                let k = lo + rng.below(hi - lo + 1);
                // Partial shuffle: pool[..k] becomes the segment, pool[k..] the filler alphabet.
                for i in 0..k {
                    let j = i + rng.below(v - i);
                    pool.swap(i, j);
                }
                let filler = n - 2 * k;
                tokens.extend((0..filler).map(|_| pool[k + rng.below(v - k)]));
                tokens.extend_from_slice(&pool[..k]);
                tokens.extend_from_slice(&pool[..k]);
                filler + k + 1
            }
        };
        let first_scored = match task.scoring {
            Scoring::All => 1,
            Scoring::Determined => first_scored,
        };
        mask.extend((1..n).map(|p| p >= first_scored));
    }
    TokenBatch::new(batch, seq, tokens, mask)
}
