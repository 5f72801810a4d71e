//! Muon against MuonClip from the same seed. The clip threshold is low enough
//! that hot-initialized heads trigger, and the final losses are compared.
//! Runs two 2000-step trainings; expect several minutes.

use muonclip::train::{run_ablation, TrainConfig};

const CONFIG: &str = include_str!("../../../configs/ablation.json");

fn main() -> muonclip::Result<()> {
    let mut config = TrainConfig::from_json(CONFIG)?;
    config.output = Default::default();
    if let Some(steps) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        config.steps = steps;
        config.schedule.total_steps = steps;
        config.schedule.warmup_steps = steps / 10;
        config.schedule.decay_start_step = steps * 4 / 5;
    }
    let r = run_ablation(&config)?;
    let s = &r.muonclip.clip_stats;
    println!(
        "heads triggered {}/{} ({:.0}%), last clip at step {:?}",
        s.heads_triggered,
        s.total_heads,
        100.0 * s.fraction,
        s.last_trigger_step
    );
    println!(
        "final loss muon {:.5}  muonclip {:.5}  relative difference {:.3}%",
        r.muon.final_loss,
        r.muonclip.final_loss,
        100.0 * r.final_rel_diff
    );
    Ok(())
}
