//! Training loop: synthetic data, optimizer step, QK-Clip, per-step metrics,
//! checkpoints, and the Muon vs MuonClip ablation.

mod checkpoint;
mod metrics;
mod task;

pub use checkpoint::{CheckpointFile, MAGIC, VERSION};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter};
pub use task::{gen_batch, Scoring, SyntheticTask, TaskKind};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InitMode, Model, ModelConfig};
use crate::optim::{route_for, step_param, wsd_lr, LrSchedule, OptimizerConfig};
use crate::param::OptimState;
use crate::qkclip::{clip_trigger_stats, qk_clip, ClipEvent, ClipPolicy, ClipStats, HeadParamRegistry};
use crate::rng::{Rng, RngState};
use crate::tensor::Tensor;

/// Steps averaged for the "initial" and "final" loss of a run.
pub const LOSS_WINDOW: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Muon on hidden matrices, AdamW elsewhere, no clipping.
    Muon,
    /// Muon plus QK-Clip after every step.
    MuonClip,
    /// AdamW everywhere.
    AdamW,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything a run depends on. Equal configs give bit-identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub clip: ClipPolicy,
    pub optimizer_kind: OptimizerKind,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub task: SyntheticTask,
    pub output: OutputPaths,
    pub init: InitMode,
    /// Writes real wall-clock time to the `ms` column. Off by default so that
    /// metrics files stay byte-identical across repeated runs.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let task = SyntheticTask::new(TaskKind::Induction, model.vocab_size, model.seq_len);
        Self {
            model,
            optimizer: OptimizerConfig::default(),
            schedule: LrSchedule::default(),
            clip: ClipPolicy::default(),
            optimizer_kind: OptimizerKind::MuonClip,
            steps: 1500,
            batch_size: 8,
            seed: 0,
            task,
            output: OutputPaths::default(),
            init: InitMode::Standard,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        self.clip.validate()?;
        self.init.validate()?;
        self.task.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.clip.tau != self.optimizer.tau {
            return bad(format!(
                "clip.tau ({}) and optimizer.tau ({}) disagree",
                self.clip.tau, self.optimizer.tau
            ));
        }
        if self.steps > self.schedule.total_steps {
            return bad(format!(
                "steps ({}) exceeds schedule.total_steps ({})",
                self.steps, self.schedule.total_steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.task.vocab > self.model.vocab_size || self.task.seq_len > self.model.seq_len {
            return bad(format!(
                "task (vocab {}, seq_len {}) does not fit the model (vocab {}, seq_len {})",
                self.task.vocab, self.task.seq_len, self.model.vocab_size, self.model.seq_len
            ));
        }
        Ok(())
    }

    /// Sets both copies of the clip threshold.
    pub fn set_tau(&mut self, tau: f64) {
        self.clip.tau = tau;
        self.optimizer.tau = tau;
    }
}

/// A training run in progress.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    registry: HeadParamRegistry,
    data_rng: Rng,
    step: u64,
    events: Vec<ClipEvent>,
    metrics: Option<MetricsWriter>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let mut model_rng = root.fork(1);
        let data_rng = Rng::new(config.task.seed.unwrap_or(config.seed)).fork(2);
        let mut model = Model::new(config.model.clone(), config.init, &mut model_rng)?;
        let use_muon = config.optimizer_kind != OptimizerKind::AdamW;
        for p in &mut model.params {
            let route = route_for(p, use_muon);
            p.init_state(route);
        }
        let registry = HeadParamRegistry::from_model(&model)?;
        Ok(Self {
            config,
            model,
            registry,
            data_rng,
            step: 0,
            events: Vec::new(),
            metrics: None,
        })
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn events(&self) -> &[ClipEvent] {
        &self.events
    }

    pub fn total_heads(&self) -> usize {
        self.registry.total_heads()
    }

    /// Sends every following row to `path`.
    pub fn open_metrics(&mut self, path: impl AsRef<Path>, append: bool) -> Result<()> {
        self.metrics = Some(MetricsWriter::open(path, append)?);
        Ok(())
    }

    /// One optimizer step. A non-finite loss writes a diagnostic row (loss `null`)
    /// and returns a numeric error without touching the weights.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let started = Instant::now();
        let t = self.step + 1;
        let cfg = &self.config;
        let seq = cfg.task.seq_len;
        let batch = gen_batch(&cfg.task, cfg.batch_size, seq, &mut self.data_rng)?;
        let lr = wsd_lr(t, &cfg.schedule)?;
        let n_heads = cfg.model.n_heads;
        let (loss, records, grads) = match self.model.loss_and_grads(&batch) {
            Ok(v) => v,
            Err(Error::Numeric(msg)) => {
                // Overflow inside the forward pass: no logits to report.
                let heads = cfg.model.total_heads();
                let row = MetricsRow {
                    step: t,
                    loss: f64::NAN,
                    lr,
                    n_heads,
                    smax: vec![f64::NAN; heads],
                    gamma: vec![1.0; heads],
                    clip_events: 0,
                    update_rms_max: f64::NAN,
                    ms: 0.0,
                };
                self.emit(&row)?;
                return Err(Error::Numeric(format!("step {t}: {msg}")));
            }
            Err(e) => return Err(e),
        };
        let mut row = MetricsRow {
            step: t,
            loss,
            lr,
            n_heads,
            smax: records.iter().map(|r| r.s_max).collect(),
            gamma: vec![1.0; records.len()],
            clip_events: 0,
            update_rms_max: f64::NAN,
            ms: 0.0,
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            self.emit(&row)?;
            return Err(Error::Numeric(format!("non-finite loss or gradient at step {t} (loss {loss})")));
        }
        let mut rms_max = 0.0f64;
        for (p, g) in self.model.params.iter_mut().zip(grads) {
            p.grad = g;
            rms_max = rms_max.max(step_param(p, &cfg.optimizer, lr)?);
        }
        row.update_rms_max = rms_max;
        if cfg.optimizer_kind == OptimizerKind::MuonClip {
            let events = qk_clip(&mut self.model.params, &self.registry, &records, &cfg.clip, t)?;
            for e in &events {
                row.gamma[e.layer * n_heads + e.head] = e.gamma;
            }
            row.clip_events = events.len();
            self.events.extend(events);
        }
        self.step = t;
        if cfg.record_timing {
            row.ms = started.elapsed().as_secs_f64() * 1e3;
        }
        self.emit(&row)?;
        Ok(row)
    }

    fn emit(&mut self, row: &MetricsRow) -> Result<()> {
        match &mut self.metrics {
            Some(w) => w.write(row),
            None => Ok(()),
        }
    }

    /// Runs until `step_count() == until`.
    pub fn run_to(&mut self, until: u64) -> Result<Vec<MetricsRow>> {
        if until > self.config.schedule.total_steps {
            return Err(Error::Config(format!(
                "cannot run to step {until}: schedule ends at {}",
                self.config.schedule.total_steps
            )));
        }
        let mut rows = Vec::new();
        while self.step < until {
            rows.push(self.step()?);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> CheckpointFile {
        let compact = serde_json::to_string(&self.config).expect("config serializes");
        let mut c = CheckpointFile::new(compact);
        for p in &self.model.params {
            c.push(format!("param/{}", p.name), p.value.clone());
            match &p.state {
                OptimState::Muon(s) => c.push(format!("muon_m/{}", p.name), s.momentum.clone()),
                OptimState::Adam(s) => {
                    c.push(format!("adam_m/{}", p.name), s.m.clone());
                    c.push(format!("adam_v/{}", p.name), s.v.clone());
                    c.push(format!("adam_t/{}", p.name), Tensor::scalar(s.step as f64));
                }
            }
        }
        c.push("state.step", Tensor::scalar(self.step as f64));
        c.push("state.rng", encode_rng(self.data_rng.state()));
        if !self.events.is_empty() {
            let data = self
                .events
                .iter()
                .flat_map(|e| [e.step as f64, e.layer as f64, e.head as f64, e.s_max, e.gamma])
                .collect();
            c.push("state.events", Tensor::new(&[self.events.len(), 5], data).expect("event table"));
        }
        c
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(c: &CheckpointFile) -> Result<Self> {
        let config: TrainConfig =
            serde_json::from_str(&c.config_json).map_err(|e| Error::Format(format!("config block: {e}")))?;
        let mut tr = Self::new(config)?;
        let mut expected = 2 + usize::from(c.get("state.events").is_some());
        let fetch = |name: String, like: &Tensor| -> Result<Tensor> {
            let t = c.get(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        for p in &mut tr.model.params {
            p.value = fetch(format!("param/{}", p.name), &p.value)?;
            expected += 1;
            match &mut p.state {
                OptimState::Muon(s) => {
                    s.momentum = fetch(format!("muon_m/{}", p.name), &s.momentum)?;
                    expected += 1;
                }
                OptimState::Adam(s) => {
                    s.m = fetch(format!("adam_m/{}", p.name), &s.m)?;
                    s.v = fetch(format!("adam_v/{}", p.name), &s.v)?;
                    s.step = fetch(format!("adam_t/{}", p.name), &Tensor::scalar(0.0))?.data()[0] as u64;
                    expected += 3;
                }
            }
        }
        if c.tensors.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, expected {expected}",
                c.tensors.len()
            )));
        }
        tr.step = fetch("state.step".into(), &Tensor::scalar(0.0))?.data()[0] as u64;
        tr.data_rng = Rng::from_state(decode_rng(c.get("state.rng"))?);
        if let Some(ev) = c.get("state.events") {
            if ev.rank() != 2 || ev.cols() != 5 {
                return Err(Error::Format("state.events must be [n × 5]".into()));
            }
            tr.events = ev
                .data()
                .chunks(5)
                .map(|r| ClipEvent {
                    step: r[0] as u64,
                    layer: r[1] as usize,
                    head: r[2] as usize,
                    s_max: r[3],
                    gamma: r[4],
                })
                .collect();
        }
        Ok(tr)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&CheckpointFile::load(path)?)
    }
}

/// Seed and word position as u32 halves, each exact in an f64.
fn encode_rng(s: RngState) -> Tensor {
    let halves = |x: u128, n: usize| (0..n).rev().map(move |i| ((x >> (32 * i)) & 0xFFFF_FFFF) as f64);
    let data = halves(s.seed as u128, 2).chain(halves(s.word_pos, 4)).collect();
    Tensor::new(&[6], data).expect("rng state")
}

fn decode_rng(t: Option<&Tensor>) -> Result<RngState> {
    let t = t.ok_or_else(|| Error::Format("missing tensor state.rng".into()))?;
    if t.shape() != [6] || t.data().iter().any(|&x| x.fract() != 0.0 || !(0.0..4294967296.0).contains(&x)) {
        return Err(Error::Format("state.rng must hold six u32 words".into()));
    }
    let join = |w: &[f64]| w.iter().fold(0u128, |acc, &x| (acc << 32) | x as u128);
    Ok(RngState {
        seed: join(&t.data()[..2]) as u64,
        word_pos: join(&t.data()[2..]),
    })
}

/// Summary of a finished run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub events: Vec<ClipEvent>,
    pub clip_stats: ClipStats,
    /// Mean loss over the first [`LOSS_WINDOW`] steps.
    pub initial_loss: f64,
    /// Mean loss over the last [`LOSS_WINDOW`] steps.
    pub final_loss: f64,
}

impl TrainReport {
    fn new(rows: Vec<MetricsRow>, events: Vec<ClipEvent>, total_heads: usize) -> Self {
        let n = rows.len();
        let w = LOSS_WINDOW.min(n);
        let mean = |r: &[MetricsRow]| r.iter().map(|r| r.loss).sum::<f64>() / r.len() as f64;
        let (initial_loss, final_loss) = if n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (mean(&rows[..w]), mean(&rows[n - w..]))
        };
        let clip_stats = clip_trigger_stats(&events, total_heads, 1..=n as u64);
        Self {
            rows,
            events,
            clip_stats,
            initial_loss,
            final_loss,
        }
    }
}

/// Runs `config` from scratch, writing metrics and the final checkpoint if
/// output paths are set.
pub fn train(config: &TrainConfig) -> Result<TrainReport> {
    let mut tr = Trainer::new(config.clone())?;
    if let Some(p) = &config.output.metrics {
        tr.open_metrics(p, false)?;
    }
    let rows = tr.run_to(config.steps)?;
    if let Some(p) = &config.output.checkpoint {
        tr.save_checkpoint(p)?;
    }
    let total = tr.total_heads();
    Ok(TrainReport::new(rows, tr.events, total))
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub muon: TrainReport,
    pub muonclip: TrainReport,
    /// `loss_muonclip - loss_muon` at every step.
    pub loss_deltas: Vec<f64>,
    /// `|final_muonclip - final_muon| / final_muon`.
    pub final_rel_diff: f64,
    /// True when both runs produced bitwise-equal losses and max logits.
    pub identical: bool,
}

/// Appends `.{tag}` before the extension: `out/m.jsonl` becomes `out/m.muon.jsonl`.
pub fn tagged_path(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

/// Twin runs from `base` (which must be a Muon run): unchanged, and with QK-Clip.
/// The two runs share nothing and execute on separate threads.
pub fn run_ablation(base: &TrainConfig) -> Result<AblationReport> {
    if base.optimizer_kind != OptimizerKind::Muon {
        return Err(Error::Config(format!(
            "ablation base must use the muon optimizer, got {:?}",
            base.optimizer_kind
        )));
    }
    let twin = |kind: OptimizerKind, tag: &str| {
        let mut c = base.clone();
        c.optimizer_kind = kind;
        c.output.metrics = base.output.metrics.as_deref().map(|p| tagged_path(p, tag));
        c.output.checkpoint = base.output.checkpoint.as_deref().map(|p| tagged_path(p, tag));
        c
    };
    let plain = twin(OptimizerKind::Muon, "muon");
    let clipped = twin(OptimizerKind::MuonClip, "muonclip");
    let (muon, muonclip) = std::thread::scope(|s| {
        let a = s.spawn(|| train(&plain));
        let b = s.spawn(|| train(&clipped));
        (
            a.join().expect("muon run panicked"),
            b.join().expect("muonclip run panicked"),
        )
    });
    let (muon, muonclip) = (muon?, muonclip?);
    let loss_deltas: Vec<f64> = muon
        .rows
        .iter()
        .zip(&muonclip.rows)
        .map(|(a, b)| b.loss - a.loss)
        .collect();
    let final_rel_diff = (muonclip.final_loss - muon.final_loss).abs() / muon.final_loss;
    let bits = |r: &MetricsRow| {
        let mut v = vec![r.loss.to_bits()];
        v.extend(r.smax.iter().map(|x| x.to_bits()));
        v
    };
    let identical = muon.rows.len() == muonclip.rows.len()
        && muon.rows.iter().zip(&muonclip.rows).all(|(a, b)| bits(a) == bits(b));
    Ok(AblationReport {
        muon,
        muonclip,
        loss_deltas,
        final_rel_diff,
        identical,
    })
}

/// Steps whose loss rose over the previous step by more than `k` times the
/// standard deviation of the preceding `window` losses.
pub fn loss_spikes(losses: &[f64], window: usize, k: f64) -> Vec<usize> {
    let mut out = Vec::new();
    for i in window.max(2)..losses.len() {
        let w = &losses[i - window.max(2)..i];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        if losses[i] - losses[i - 1] > k * std {
            out.push(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_state_codec() {
        let s = RngState {
            seed: u64::MAX - 5,
            word_pos: (1u128 << 90) + 12345,
        };
        assert_eq!(decode_rng(Some(&encode_rng(s))).unwrap(), s);
        assert!(decode_rng(Some(&Tensor::new(&[6], vec![0.5; 6]).unwrap())).is_err());
    }

    #[test]
    fn tagged_paths() {
        assert_eq!(tagged_path(Path::new("out/m.jsonl"), "muon"), PathBuf::from("out/m.muon.jsonl"));
        assert_eq!(tagged_path(Path::new("ckpt"), "muonclip"), PathBuf::from("ckpt.muonclip"));
    }

    #[test]
    fn default_config_round_trips_and_validates() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.schedule.warmup_steps, 500);
        assert_eq!(c.optimizer.lambda, 0.1);
    }

    #[test]
    fn validation_catches_mismatches() {
        let mut c = TrainConfig::default();
        c.clip.tau = 30.0;
        assert!(c.validate().is_err());
        c.set_tau(30.0);
        assert!(c.validate().is_ok());
        c.steps = c.schedule.total_steps + 1;
        assert!(c.validate().is_err());
        assert!(TrainConfig::from_json(r#"{"stepz": 3}"#).is_err());
    }

    #[test]
    fn spikes() {
        let mut l: Vec<f64> = (0..50).map(|i| 5.0 - 0.01 * i as f64 + 0.001 * (i % 3) as f64).collect();
        assert!(loss_spikes(&l, 20, 5.0).is_empty());
        l[40] += 1.0;
        assert_eq!(loss_spikes(&l, 20, 5.0), vec![40]);
    }
}
