//! Interrupts a run, saves it, resumes from disk, and compares against the
//! uninterrupted run bit for bit.

use muonclip::train::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = TrainConfig::default();
    config.steps = 40;
    config.schedule.total_steps = 40;
    config.schedule.warmup_steps = 4;
    config.schedule.decay_start_step = 30;

    let dir = std::env::temp_dir().join(format!("muonclip-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("mid.mclk");

    let mut whole = Trainer::new(config.clone())?;
    let straight = whole.run_to(40)?;

    let mut first = Trainer::new(config)?;
    first.run_to(20)?;
    first.save_checkpoint(&ckpt)?;
    drop(first);
    let mut resumed = Trainer::load_checkpoint(&ckpt)?;
    let tail = resumed.run_to(40)?;

    let same_rows = straight[20..] == tail[..];
    let same_state = whole.checkpoint().to_bytes() == resumed.checkpoint().to_bytes();
    println!("resumed at step 20: metrics identical {same_rows}, final state identical {same_state}");
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
