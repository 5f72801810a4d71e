//! Trains the default MHA model on the induction task with MuonClip and
//! prints the loss curve. About two minutes on one core in release mode.
//!
//! cargo run --release --example train_induction [steps]

use muonclip::train::{TrainConfig, Trainer};

const CONFIG: &str = include_str!("../../../configs/train_induction.json");

fn main() -> muonclip::Result<()> {
    let mut config = TrainConfig::from_json(CONFIG)?;
    config.output = Default::default();
    if let Some(steps) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        config.steps = steps;
    }
    let steps = config.steps;
    let mut trainer = Trainer::new(config)?;
    let mut window = Vec::new();
    for _ in 0..steps {
        let row = trainer.step()?;
        window.push(row.loss);
        if row.step % 100 == 0 {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            println!("step {:>5}  loss {mean:.4}  lr {:.2e}  max s_max {:.2}", row.step, row.lr, row.max_smax());
            window.clear();
        }
    }
    println!("chance level ln 256 = {:.4}", (256f64).ln());
    Ok(())
}
