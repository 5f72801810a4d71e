use crate::error::{Error, Result};
use crate::linalg::msign;
use crate::optim::OptimizerConfig;
use crate::tensor::Tensor;

/// Heavy-ball momentum buffer, zero at start.
#[derive(Clone, Debug, PartialEq)]
pub struct MuonState {
    pub momentum: Tensor,
}

impl MuonState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            momentum: Tensor::zeros(shape),
        }
    }
}

/// One Muon step on a matrix:
///
/// ```text
/// M ← μM + G
/// O ← msign(M) · √max(n, m) · rms_const
/// W ← W − lr · (O + λW)
/// ```
///
/// An all-zero momentum skips the orthogonalization (only decay applies).
/// Returns `O`.
pub fn muon_step(
    w: &mut Tensor,
    g: &Tensor,
    state: &mut MuonState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::Dimension(format!(
            "muon_step needs a matrix, got shape {:?}",
            w.shape()
        )));
    }
    if w.shape() != g.shape() || w.shape() != state.momentum.shape() {
        return Err(Error::shapes("muon_step", w.shape(), g.shape()));
    }
    if !(lr > 0.0) {
        return Err(Error::Contract(format!("learning rate must be > 0, got {lr}")));
    }
    let (n, m) = w.dims2()?;
    let mut momentum = state.momentum.scale(cfg.mu);
    momentum.axpy(1.0, g)?;
    state.momentum = momentum;

    let update = if state.momentum.data().iter().all(|&x| x == 0.0) {
        Tensor::zeros(w.shape())
    } else {
        msign(&state.momentum, cfg.msign_mode)?.scale((n.max(m) as f64).sqrt() * cfg.rms_const)
    };
    for (wi, &oi) in w.data_mut().iter_mut().zip(update.data()) {
        *wi -= lr * (oi + cfg.lambda * *wi);
    }
    Ok(update)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{svd, MsignMode};
    use crate::optim::update_rms;
    use crate::rng::Rng;

    fn exact() -> OptimizerConfig {
        OptimizerConfig {
            msign_mode: MsignMode::ExactSvd,
            ..Default::default()
        }
    }

    #[test]
    fn scalar_closed_form() {
        let cfg = OptimizerConfig {
            mu: 0.95,
            lambda: 0.1,
            ..exact()
        };
        let mut w = Tensor::new(&[1, 1], vec![0.5]).unwrap();
        let g = Tensor::new(&[1, 1], vec![-3.0]).unwrap();
        let mut s = MuonState::new(&[1, 1]);
        let o = muon_step(&mut w, &g, &mut s, &cfg, 0.1).unwrap();
        assert_eq!(s.momentum.data(), &[-3.0]);
        assert!((o.data()[0] + 0.2).abs() < 1e-15);
        assert!((w.data()[0] - 0.515).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let cfg = exact();
        let w0 = Rng::new(1).normal_tensor(&[3, 2], 1.0);
        let mut w = w0.clone();
        let mut s = MuonState::new(&[3, 2]);
        let g = Tensor::zeros(&[3, 2]);
        muon_step(&mut w, &g, &mut s, &cfg, 0.1).unwrap();
        assert_eq!(w, w0.map(|x| x - 0.1 * (0.0 + cfg.lambda * x)));
        assert!(w.max_abs_diff(&w0.scale(1.0 - 0.1 * cfg.lambda)) < 1e-15);
    }

    #[test]
    fn full_rank_update_rms_matches_constant() {
        // Oracle: for full-rank M the polar factor has min(n,m) unit singular values,
        // so ‖O‖_F² = min(n,m)·(√max·c)² and RMS = c.
        let mut rng = Rng::new(2);
        let g = rng.normal_tensor(&[4, 2], 1.0);
        assert_eq!(svd(&g).unwrap().rank(), 2);
        let mut w = Tensor::zeros(&[4, 2]);
        let mut s = MuonState::new(&[4, 2]);
        let o = muon_step(&mut w, &g, &mut s, &exact(), 0.01).unwrap();
        let f = svd(&g).unwrap();
        let algebraic = (f.rank() as f64 * (4f64.sqrt() * 0.2).powi(2) / 8.0).sqrt();
        assert!((algebraic - 0.2).abs() < 1e-15);
        assert!((update_rms(&o).unwrap() - algebraic).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let cfg = exact();
        let mut s = MuonState::new(&[2, 2]);
        let mut w = Tensor::zeros(&[2, 2]);
        assert!(muon_step(&mut w, &Tensor::zeros(&[2, 3]), &mut s, &cfg, 0.1).is_err());
        let mut v = Tensor::zeros(&[2]);
        let mut s1 = MuonState::new(&[2]);
        assert!(muon_step(&mut v, &Tensor::zeros(&[2]), &mut s1, &cfg, 0.1).is_err());
    }

    #[test]
    fn deterministic() {
        let mut rng = Rng::new(3);
        let g = rng.normal_tensor(&[5, 3], 1.0);
        let w0 = rng.normal_tensor(&[5, 3], 1.0);
        let run = || {
            let mut w = w0.clone();
            let mut s = MuonState::new(&[5, 3]);
            for _ in 0..3 {
                muon_step(&mut w, &g, &mut s, &OptimizerConfig::default(), 0.01).unwrap();
            }
            w
        };
        assert_eq!(run(), run());
    }
}
