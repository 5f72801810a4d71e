//! RMS matching: with exact msign the Muon update has RMS 0.2 at any shape.

use muonclip::linalg::MsignMode;
use muonclip::optim::{muon_step, update_rms, MuonState, OptimizerConfig};
use muonclip::{Rng, Tensor};

fn main() -> muonclip::Result<()> {
    let cfg = OptimizerConfig {
        msign_mode: MsignMode::ExactSvd,
        ..OptimizerConfig::default()
    };
    let mut rng = Rng::new(3);
    for (n, m) in [(1, 1), (4, 2), (16, 16), (7, 31), (64, 256)] {
        let mut w = Tensor::zeros(&[n, m]);
        let g = rng.normal_tensor(&[n, m], 1.0);
        let mut state = MuonState::new(&[n, m]);
        let o = muon_step(&mut w, &g, &mut state, &cfg, 1e-3)?;
        println!("{n:>3}×{m:<3} update RMS {:.12}", update_rms(&o)?);
    }
    Ok(())
}
