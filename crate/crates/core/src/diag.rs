//! Diagnostics: finite-difference gradient checks, how close an msign
//! approximation gets to the exact polar factor, and how spread out the
//! singular values of Muon and AdamW updates are on the same gradient stream.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{msign, singular_entropy, svd, MsignMode};
use crate::model::{Model, TokenBatch};
use crate::optim::{adamw_step, muon_step, AdamState, MuonState, OptimizerConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_err: f64,
}

/// `|a - n| / (max(|a|, |n|) + 1e-8)`; the floor keeps exactly-zero gradients finite.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-8)
}

/// Replaces every parameter with `N(0, std²)` (gains get `1 + N(0, std²)`), so no
/// gradient path is blocked by zero-initialized output projections.
pub fn randomize_params(model: &mut Model, std: f64, rng: &mut Rng) {
    for p in &mut model.params {
        let shape = p.value.shape().to_vec();
        p.value = rng.normal_tensor(&shape, std);
        if p.value.rank() == 1 {
            p.value = p.value.map(|x| 1.0 + x);
        }
    }
}

/// Compares backprop gradients with central differences of step `h` at
/// `samples` coordinates drawn uniformly (parameter first, then entry).
pub fn gradient_check(model: &Model, batch: &TokenBatch, samples: usize, h: f64, rng: &mut Rng) -> Result<GradCheckReport> {
    if !(h > 0.0) || samples == 0 {
        return Err(Error::Config(format!("gradient check needs h > 0 and samples > 0, got {h}, {samples}")));
    }
    let (_, _, grads) = model.loss_and_grads(batch)?;
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let pi = rng.below(model.params.len());
        let ei = rng.below(model.params[pi].value.len());
        let orig = model.params[pi].value.data()[ei];
        let mut eval = |x: f64| -> Result<f64> {
            probe.params[pi].value.data_mut()[ei] = x;
            Ok(probe.forward_loss(batch)?.0)
        };
        let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
        probe.params[pi].value.data_mut()[ei] = orig;
        let analytic = grads[pi].data()[ei];
        out.push(GradSample {
            param: model.params[pi].name.clone(),
            index: ei,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = out.iter().map(|s| s.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        samples: out,
        max_rel_err,
    })
}

/// Matrix shape for each trial: fixed, or drawn uniformly up to a bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeSpec {
    Fixed(usize, usize),
    UpTo(usize),
}

impl ShapeSpec {
    fn draw(self, rng: &mut Rng) -> Result<(usize, usize)> {
        match self {
            ShapeSpec::Fixed(r, c) if r > 0 && c > 0 => Ok((r, c)),
            ShapeSpec::UpTo(n) if n > 0 => Ok((1 + rng.below(n), 1 + rng.below(n))),
            _ => Err(Error::Config(format!("matrix sizes must be positive, got {self:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MsignDiag {
    pub trials: usize,
    /// Smallest and largest singular value over every output.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `max |σ - 1|` over every output.
    pub max_sigma_dev: f64,
    /// Largest Frobenius distance to the exact-SVD polar factor.
    pub max_dist_to_exact: f64,
}

/// Runs `mode` on `trials` Gaussian matrices and compares against exact msign.
pub fn msign_diagnostics(shape: ShapeSpec, mode: MsignMode, trials: usize, rng: &mut Rng) -> Result<MsignDiag> {
    mode.validate()?;
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let mut d = MsignDiag {
        trials,
        sigma_min: f64::INFINITY,
        sigma_max: 0.0,
        max_sigma_dev: 0.0,
        max_dist_to_exact: 0.0,
    };
    for _ in 0..trials {
        let (r, c) = shape.draw(rng)?;
        let m = rng.normal_tensor(&[r, c], 1.0);
        let o = msign(&m, mode)?;
        let exact = msign(&m, MsignMode::ExactSvd)?;
        for &s in &svd(&o)?.s {
            d.sigma_min = d.sigma_min.min(s);
            d.sigma_max = d.sigma_max.max(s);
            d.max_sigma_dev = d.max_sigma_dev.max((s - 1.0).abs());
        }
        d.max_dist_to_exact = d.max_dist_to_exact.max(o.sub(&exact)?.frobenius_norm());
    }
    Ok(d)
}

#[derive(Clone, Debug, Serialize)]
pub struct EntropyComparison {
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    /// `ln(min(rows, cols))`, the entropy of a flat spectrum.
    pub max_entropy: f64,
    pub muon_entropy: Vec<f64>,
    pub adamw_entropy: Vec<f64>,
    pub muon_mean: f64,
    pub adamw_mean: f64,
}

/// Gradient stream `G_t = a_t u vᵀ + noise·N_t`: a fixed rank-1 direction with a
/// random positive amplitude, plus isotropic Gaussian noise.
pub struct RankOneStream {
    u: Tensor,
    v: Tensor,
    noise: f64,
    rng: Rng,
}

impl RankOneStream {
    pub fn new(rows: usize, cols: usize, noise: f64, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let u = rng.normal_tensor(&[rows, 1], 1.0);
        let v = rng.normal_tensor(&[1, cols], 1.0);
        Self { u, v, noise, rng }
    }

    pub fn next_grad(&mut self) -> Tensor {
        let amp = 0.5 + self.rng.uniform();
        let signal = self.u.matmul(&self.v).expect("outer product").scale(amp);
        let shape = signal.shape().to_vec();
        signal
            .add(&self.rng.normal_tensor(&shape, self.noise))
            .expect("same shape")
    }
}

/// Feeds the same gradient stream to a Muon state and an AdamW state and records
/// the singular-value entropy of each update direction.
pub fn entropy_comparison(
    rows: usize,
    cols: usize,
    steps: usize,
    noise: f64,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<EntropyComparison> {
    if rows == 0 || cols == 0 || steps == 0 {
        return Err(Error::Config(format!(
            "entropy comparison needs positive sizes, got {rows}×{cols}, {steps} steps"
        )));
    }
    cfg.validate()?;
    let mut stream = RankOneStream::new(rows, cols, noise, seed);
    let (mut w_muon, mut w_adam) = (Tensor::zeros(&[rows, cols]), Tensor::zeros(&[rows, cols]));
    let mut muon = MuonState::new(&[rows, cols]);
    let mut adam = AdamState::new(&[rows, cols]);
    let (mut me, mut ae) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for _ in 0..steps {
        let g = stream.next_grad();
        let o = muon_step(&mut w_muon, &g, &mut muon, cfg, cfg.eta)?;
        let a = adamw_step(&mut w_adam, &g, &mut adam, cfg, cfg.eta)?;
        me.push(singular_entropy(&o)?);
        ae.push(singular_entropy(&a)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EntropyComparison {
        rows,
        cols,
        steps,
        max_entropy: (rows.min(cols) as f64).ln(),
        muon_mean: mean(&me),
        adamw_mean: mean(&ae),
        muon_entropy: me,
        adamw_entropy: ae,
    })
}
