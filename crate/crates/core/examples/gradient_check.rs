//! Finite-difference check of the full model gradient, MHA and MLA.
//!
//! cargo run --release --example gradient_check [samples]

use muonclip::diag::{gradient_check, randomize_params};
use muonclip::model::{InitMode, Model, ModelConfig, TokenBatch};
use muonclip::Rng;

fn main() -> muonclip::Result<()> {
    let samples: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    for cfg in [ModelConfig::default(), ModelConfig::mla()] {
        let mut rng = Rng::new(7);
        let mut model = Model::new(cfg.clone(), InitMode::Standard, &mut rng)?;
        // Zero-initialized output projections would leave most gradients at exactly 0.
        randomize_params(&mut model, 0.3, &mut rng);
        let tokens = (0..2 * 17).map(|_| rng.below(cfg.vocab_size)).collect();
        let batch = TokenBatch::unmasked(2, 16, tokens)?;
        let report = gradient_check(&model, &batch, samples, 1e-5, &mut rng)?;
        let worst = report
            .samples
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("at least one sample");
        println!(
            "{:?}: {} coordinates, max relative error {:.2e} (at {}[{}]: analytic {:.6e}, numeric {:.6e})",
            cfg.attention_kind, samples, report.max_rel_err, worst.param, worst.index, worst.analytic, worst.numeric
        );
    }
    Ok(())
}
