//! Matrix sign (polar factor) and spectral diagnostics.
//!
//! The SVD here is a one-sided (Hestenes) Jacobi sweep. It is slow but accurate
//! to a few ulps on the small matrices this crate deals with, which makes it a
//! good oracle for the Newton-Schulz iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coefficients of the quintic Newton-Schulz step `aX + b(XXᵀ)X + c(XXᵀ)²X`.
pub const QUINTIC_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

const MAX_SWEEPS: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MsignMode {
    ExactSvd,
    NewtonSchulzCubic { iterations: usize },
    NewtonSchulzQuintic { iterations: usize },
}

impl Default for MsignMode {
    fn default() -> Self {
        MsignMode::NewtonSchulzQuintic { iterations: 5 }
    }
}

impl MsignMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            MsignMode::NewtonSchulzCubic { iterations: 0 }
            | MsignMode::NewtonSchulzQuintic { iterations: 0 } => Err(Error::Config(
                "Newton-Schulz modes need at least one iteration".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Thin SVD `M = U diag(s) Vᵀ` with `k = min(n, m)` columns in `u` and `v`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    pub fn reconstruct(&self) -> Tensor {
        let k = self.s.len();
        let mut us = self.u.clone();
        let n = us.rows();
        for i in 0..n {
            for j in 0..k {
                let x = us.get(i, j) * self.s[j];
                us.set(i, j, x);
            }
        }
        us.matmul_t(&self.v).expect("svd factors agree")
    }

    /// Numerical rank threshold used to separate zero from nonzero singular values.
    pub fn tolerance(&self) -> f64 {
        let dim = self.u.rows().max(self.v.rows()) as f64;
        self.s.first().copied().unwrap_or(0.0) * dim * f64::EPSILON * 16.0
    }

    pub fn rank(&self) -> usize {
        let tol = self.tolerance();
        self.s.iter().filter(|&&s| s > tol).count()
    }
}

/// Singular value decomposition by one-sided Jacobi rotations.
pub fn svd(m: &Tensor) -> Result<Svd> {
    let (rows, cols) = m.dims2()?;
    m.ensure_finite("svd")?;
    if rows < cols {
        let t = svd(&m.transpose()?)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    // Column-major working copies: a[j] is column j of M, v[j] column j of V.
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let tol = s.first().copied().unwrap_or(0.0) * rows as f64 * f64::EPSILON * 16.0;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut pending = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if s[k] > tol && s[k] > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / s[k]).collect());
        } else {
            pending.push(k);
            u_cols.push(vec![0.0; rows]);
        }
    }
    complete_basis(&mut u_cols, &pending);

    let mut u = Tensor::zeros(&[rows, cols]);
    let mut vt = Tensor::zeros(&[cols, cols]);
    for (k, &j) in order.iter().enumerate() {
        for i in 0..rows {
            u.set(i, k, u_cols[k][i]);
        }
        for i in 0..cols {
            vt.set(i, k, v[j][i]);
        }
    }
    Ok(Svd { u, s, v: vt })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the columns listed in `pending` with unit vectors orthogonal to every other column.
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let n = cols[0].len();
    let mut candidate = 0;
    for &k in pending {
        while candidate < n {
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if j == k {
                        continue;
                    }
                    let d: f64 = col.iter().zip(&e).map(|(a, b)| a * b).sum();
                    for (x, c) in e.iter_mut().zip(col) {
                        *x -= d * c;
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                cols[k] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Matrix sign / polar factor `U Vᵀ` of `m`.
pub fn msign(m: &Tensor, mode: MsignMode) -> Result<Tensor> {
    mode.validate()?;
    m.dims2()?;
    m.ensure_finite("msign")?;
    let norm = m.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::Contract("msign of a zero matrix is undefined".into()));
    }
    match mode {
        MsignMode::ExactSvd => msign_exact(m),
        MsignMode::NewtonSchulzCubic { iterations } => newton_schulz(m, norm, iterations, false),
        MsignMode::NewtonSchulzQuintic { iterations } => newton_schulz(m, norm, iterations, true),
    }
}

fn msign_exact(m: &Tensor) -> Result<Tensor> {
    let f = svd(m)?;
    let r = f.rank();
    let (n, mm) = (f.u.rows(), f.v.rows());
    let mut out = Tensor::zeros(&[n, mm]);
    for i in 0..n {
        for j in 0..mm {
            let mut acc = 0.0;
            for k in 0..r {
                acc += f.u.get(i, k) * f.v.get(j, k);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

fn newton_schulz(m: &Tensor, norm: f64, iterations: usize, quintic: bool) -> Result<Tensor> {
    let (rows, cols) = m.dims2()?;
    let m2 = m.clone().reshape(&[rows, cols])?;
    // Iterate on the wide orientation so the Gram matrix X Xᵀ is the small one.
    let transposed = rows > cols;
    let mut x = if transposed { m2.transpose()? } else { m2 }.scale(1.0 / norm);
    let (a, b, c) = QUINTIC_COEFFS;
    for _ in 0..iterations {
        let gram = x.matmul_t(&x)?;
        x = if quintic {
            // (b·A + c·A²) X + a·X
            let mut poly = gram.matmul(&gram)?.scale(c);
            poly.axpy(b, &gram)?;
            let mut next = poly.matmul(&x)?;
            next.axpy(a, &x)?;
            next
        } else {
            let mut next = gram.matmul(&x)?.scale(-0.5);
            next.axpy(1.5, &x)?;
            next
        };
    }
    let out = if transposed { x.transpose()? } else { x };
    out.reshape(m.shape())
}

/// Singular values plus entropy-based effective rank.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub entropy: f64,
    pub spectral_norm: f64,
    pub effective_rank: f64,
}

pub fn spectrum(m: &Tensor) -> Result<SpectrumReport> {
    let s = svd(m)?.s;
    let entropy = entropy_of(&s)?;
    Ok(SpectrumReport {
        spectral_norm: s[0],
        effective_rank: entropy.exp(),
        entropy,
        singular_values: s,
    })
}

fn entropy_of(s: &[f64]) -> Result<f64> {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Err(Error::Contract("singular entropy of a zero matrix".into()));
    }
    Ok(s.iter()
        .map(|x| x * x / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum())
}

/// Shannon entropy of the squared singular values normalized to sum to one.
pub fn singular_entropy(m: &Tensor) -> Result<f64> {
    entropy_of(&svd(m)?.s)
}

pub fn spectral_norm(m: &Tensor) -> Result<f64> {
    Ok(svd(m)?.s.first().copied().unwrap_or(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitBound {
    /// `|q_i · k_j|`
    pub lhs: f64,
    /// `‖x_i‖ ‖x_j‖ ‖W_q‖₂ ‖W_k‖₂`
    pub rhs: f64,
}

impl LogitBound {
    pub fn holds(&self, rel_slack: f64) -> bool {
        self.lhs <= self.rhs * (1.0 + rel_slack) + f64::MIN_POSITIVE
    }
}

/// Both sides of `|q_i·k_j| ≤ ‖x_i‖‖x_j‖‖W_q‖‖W_k‖` for `q = x_i W_q`, `k = x_j W_k`.
pub fn logit_bound_report(x_i: &Tensor, x_j: &Tensor, wq: &Tensor, wk: &Tensor) -> Result<LogitBound> {
    let as_row = |x: &Tensor| -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        if r != 1 {
            return Err(Error::Dimension(format!("expected a row vector, got {:?}", x.shape())));
        }
        x.clone().reshape(&[1, c])
    };
    let (xi, xj) = (as_row(x_i)?, as_row(x_j)?);
    let q = xi.matmul(wq)?;
    let k = xj.matmul(wk)?;
    if q.len() != k.len() {
        return Err(Error::shapes("logit_bound_report", wq.shape(), wk.shape()));
    }
    let lhs = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum::<f64>().abs();
    let rhs = xi.frobenius_norm() * xj.frobenius_norm() * spectral_norm(wq)? * spectral_norm(wk)?;
    Ok(LogitBound { lhs, rhs })
}
