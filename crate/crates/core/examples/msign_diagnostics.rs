//! Exact, cubic and quintic msign on random matrices up to 16×16.

use muonclip::diag::{msign_diagnostics, ShapeSpec};
use muonclip::linalg::MsignMode;
use muonclip::Rng;

fn main() -> muonclip::Result<()> {
    let modes = [
        MsignMode::ExactSvd,
        MsignMode::NewtonSchulzCubic { iterations: 30 },
        MsignMode::NewtonSchulzQuintic { iterations: 5 },
    ];
    for mode in modes {
        let d = msign_diagnostics(ShapeSpec::UpTo(16), mode, 100, &mut Rng::new(1))?;
        println!(
            "{mode:?}: sigma in [{:.4}, {:.4}], max |sigma-1| {:.2e}, max distance to exact {:.2e}",
            d.sigma_min, d.sigma_max, d.max_sigma_dev, d.max_dist_to_exact
        );
    }
    Ok(())
}
