//! Singular-value entropy of Muon vs AdamW updates on one rank-1-dominated
//! gradient stream.

use muonclip::diag::entropy_comparison;
use muonclip::linalg::MsignMode;
use muonclip::optim::OptimizerConfig;

fn main() -> muonclip::Result<()> {
    for mode in [MsignMode::ExactSvd, MsignMode::default()] {
        let cfg = OptimizerConfig {
            msign_mode: mode,
            ..OptimizerConfig::default()
        };
        let r = entropy_comparison(16, 32, 50, 0.05, &cfg, 0)?;
        println!(
            "{mode:?}: muon {:.6}  adamw {:.6}  flat spectrum ln(16) = {:.6}",
            r.muon_mean, r.adamw_mean, r.max_entropy
        );
    }
    Ok(())
}
