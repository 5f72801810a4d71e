use muonclip::model::{AttentionKind, InitMode, Model, ModelConfig};
use muonclip::optim::LrSchedule;
use muonclip::qkclip::clip_trigger_stats;
use muonclip::train::{
    gen_batch, read_metrics, run_ablation, train, OptimizerKind, Scoring, SyntheticTask, TaskKind, TrainConfig,
    Trainer,
};
use muonclip::{Error, Rng};

fn tiny(kind: AttentionKind, steps: u64) -> TrainConfig {
    let model = ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_head: 8,
        attention_kind: kind,
        d_cq: 12,
        d_ckv: 12,
        d_head_c: 6,
        d_head_r: 2,
        d_ff: 32,
        seq_len: 16,
        ..ModelConfig::default()
    };
    TrainConfig {
        task: SyntheticTask::new(TaskKind::Copy, 32, 16),
        model,
        schedule: LrSchedule {
            warmup_steps: 5,
            stable_lr: 1e-2,
            decay_start_step: (steps * 3 / 4).max(5),
            end_lr: 1e-3,
            total_steps: steps.max(5),
        },
        steps,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn hot(mut c: TrainConfig, scale: f64, tau: f64) -> TrainConfig {
    c.init = InitMode::Hot { scale };
    c.set_tau(tau);
    c
}

#[test]
fn induction_queries_always_have_an_antecedent() {
    let task = SyntheticTask {
        scoring: Scoring::Determined,
        ..SyntheticTask::new(TaskKind::Induction, 40, 31)
    };
    let mut rng = Rng::new(5);
    let mut scored = 0;
    for _ in 0..50 {
        let b = gen_batch(&task, 8, 31, &mut rng).unwrap();
        for s in 0..b.batch {
            let toks = b.sequence(s);
            for t in 0..b.seq {
                if !b.loss_mask[s * b.seq + t] {
                    continue;
                }
                scored += 1;
                // Target toks[t + 1] is predicted from query toks[t]; scan the prefix.
                let (query, target) = (toks[t], toks[t + 1]);
                let followers: Vec<usize> = (0..t).filter(|&j| toks[j] == query).map(|j| toks[j + 1]).collect();
                assert!(!followers.is_empty(), "query at {t} has no antecedent: {toks:?}");
                assert!(followers.iter().all(|&f| f == target), "ambiguous antecedent: {toks:?}");
            }
        }
    }
    assert!(scored > 0);
}

#[test]
fn all_scoring_covers_every_target() {
    let task = SyntheticTask::new(TaskKind::Induction, 40, 31);
    let b = gen_batch(&task, 3, 31, &mut Rng::new(1)).unwrap();
    assert!(b.loss_mask.iter().all(|&m| m));
}

#[test]
fn zero_steps_leaves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(AttentionKind::Mha, 0);
    c.output.metrics = Some(dir.path().join("m.jsonl"));
    c.output.checkpoint = Some(dir.path().join("c.mclk"));
    let report = train(&c).unwrap();
    assert!(report.rows.is_empty());
    assert!(read_metrics(dir.path().join("m.jsonl")).unwrap().is_empty());
    let loaded = Trainer::load_checkpoint(dir.path().join("c.mclk")).unwrap();
    let fresh = Trainer::new(c).unwrap();
    for (a, b) in loaded.model.params.iter().zip(&fresh.model.params) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(loaded.step_count(), 0);
}

#[test]
fn same_config_gives_identical_metrics_files() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: u64| {
        let mut c = hot(tiny(AttentionKind::Mla, 25), 30.0, 10.0);
        c.seed = seed;
        c.output.metrics = Some(dir.path().join(name));
        train(&c).unwrap();
        std::fs::read(dir.path().join(name)).unwrap()
    };
    let a = run("a.jsonl", 1);
    assert_eq!(a, run("b.jsonl", 1));
    assert_ne!(a, run("c.jsonl", 2));
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    for kind in [AttentionKind::Mha, AttentionKind::Mla] {
        for opt in [OptimizerKind::MuonClip, OptimizerKind::AdamW] {
            let dir = tempfile::tempdir().unwrap();
            let mut c = hot(tiny(kind, 24), 30.0, 0.5);
            c.optimizer_kind = opt;
            let full = dir.path().join("full.jsonl");
            let split = dir.path().join("split.jsonl");
            let ckpt = dir.path().join("mid.mclk");

            let mut a = Trainer::new(c.clone()).unwrap();
            a.open_metrics(&full, false).unwrap();
            a.run_to(24).unwrap();

            let mut b = Trainer::new(c).unwrap();
            b.open_metrics(&split, false).unwrap();
            b.run_to(10).unwrap();
            b.save_checkpoint(&ckpt).unwrap();
            drop(b);
            let mut r = Trainer::load_checkpoint(&ckpt).unwrap();
            assert_eq!(r.step_count(), 10);
            r.open_metrics(&split, true).unwrap();
            r.run_to(24).unwrap();

            assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&split).unwrap(), "{kind:?} {opt:?}");
            assert_eq!(a.events(), r.events());
            assert_eq!(a.checkpoint().to_bytes(), r.checkpoint().to_bytes());
            if opt == OptimizerKind::MuonClip {
                assert!(!a.events().is_empty(), "scenario should exercise clipping");
            }
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let mut t = Trainer::new(tiny(AttentionKind::Mha, 10)).unwrap();
    t.open_metrics(&path, false).unwrap();
    t.run_to(3).unwrap();
    let before = t.model.params.clone();
    let id = t.model.find("lm_head").unwrap();
    t.model.param_mut(id).value.data_mut()[0] = f64::NAN;
    let err = t.step().unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(t.step_count(), 3);
    let rows = read_metrics(&path).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].loss.is_nan());
    for (a, b) in t.model.params.iter().zip(&before) {
        if a.name != "lm_head" {
            assert_eq!(a.value, b.value);
        }
    }
}

#[test]
fn copy_task_loss_decreases() {
    let c = tiny(AttentionKind::Mha, 300);
    let r = train(&c).unwrap();
    assert!(r.final_loss < r.initial_loss, "{} vs {}", r.final_loss, r.initial_loss);
}

#[test]
fn ablation_with_infinite_tau_is_bit_identical() {
    let mut c = hot(tiny(AttentionKind::Mla, 30), 30.0, f64::INFINITY);
    c.optimizer_kind = OptimizerKind::Muon;
    let r = run_ablation(&c).unwrap();
    assert!(r.identical);
    assert!(r.muonclip.events.is_empty());
    assert!(r.loss_deltas.iter().all(|&d| d == 0.0));
    assert_eq!(r.final_rel_diff, 0.0);
}

#[test]
fn ablation_trigger_fraction_matches_the_event_log() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = hot(tiny(AttentionKind::Mha, 30), 30.0, 10.0);
    c.optimizer_kind = OptimizerKind::Muon;
    c.output.metrics = Some(dir.path().join("m.jsonl"));
    let r = run_ablation(&c).unwrap();
    assert!(!r.identical);
    // Recompute from the metrics file: a head clipped at step t has gamma < 1 in row t.
    let rows = read_metrics(dir.path().join("m.muonclip.jsonl")).unwrap();
    let mut events = Vec::new();
    for row in &rows {
        for (i, &g) in row.gamma.iter().enumerate() {
            if g < 1.0 {
                events.push(muonclip::qkclip::ClipEvent {
                    step: row.step,
                    layer: i / row.n_heads,
                    head: i % row.n_heads,
                    s_max: row.smax[i],
                    gamma: g,
                });
            }
        }
        assert_eq!(row.clip_events, row.gamma.iter().filter(|&&g| g < 1.0).count());
    }
    let again = clip_trigger_stats(&events, 4, 1..=30);
    assert_eq!(again, r.muonclip.clip_stats);
    assert!(again.fraction > 0.0);
    assert!(read_metrics(dir.path().join("m.muon.jsonl")).unwrap().iter().all(|r| r.clip_events == 0));
}

#[test]
fn ablation_needs_a_muon_base() {
    assert!(matches!(run_ablation(&tiny(AttentionKind::Mha, 5)), Err(Error::Config(_))));
}

#[test]
fn model_built_by_trainer_matches_seeded_construction() {
    let c = tiny(AttentionKind::Mla, 5);
    let t = Trainer::new(c.clone()).unwrap();
    let m = Model::new(c.model.clone(), c.init, &mut Rng::new(c.seed).fork(1)).unwrap();
    for (a, b) in t.model.params.iter().zip(&m.params) {
        assert_eq!(a.value, b.value);
    }
}
