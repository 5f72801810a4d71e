//! Hot-initialized MuonClip run: the largest logit is pulled down to tau in
//! the first steps, then clip events stop once training no longer pushes the
//! logits up.

use muonclip::qkclip::clip_trigger_stats;
use muonclip::train::{train, TrainConfig};

const CONFIG: &str = include_str!("../../../configs/clip_demo.json");

fn main() -> muonclip::Result<()> {
    let mut config = TrainConfig::from_json(CONFIG)?;
    config.output = Default::default();
    let tau = config.clip.tau;
    let report = train(&config)?;
    println!("{:>5} {:>10} {:>6}", "step", "max s_max", "clips");
    for row in report.rows.iter().filter(|r| r.step <= 10 || r.step % 25 == 0) {
        println!("{:>5} {:>10.3} {:>6}", row.step, row.max_smax(), row.clip_events);
    }
    let over = report.rows.iter().skip(1).filter(|r| r.max_smax() > tau + 1e-6).count();
    let n = config.steps;
    let tail = clip_trigger_stats(&report.events, report.clip_stats.total_heads, n * 4 / 5 + 1..=n);
    println!(
        "{} events, last at step {:?}; {over} later rows saw a fresh batch above tau before its clip; {} events in the last 20%",
        report.events.len(),
        report.clip_stats.last_trigger_step,
        tail.events_in_window
    );
    Ok(())
}
