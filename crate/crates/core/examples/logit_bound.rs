//! |q_i·k_j| ≤ ‖x_i‖‖x_j‖‖W_q‖‖W_k‖: the attention logit is bounded by the
//! spectral norms of the projections, which is what QK-Clip shrinks.

use muonclip::linalg::logit_bound_report;
use muonclip::Rng;

fn main() -> muonclip::Result<()> {
    let mut rng = Rng::new(9);
    let mut tightest: f64 = 0.0;
    for _ in 0..1000 {
        let x_i = rng.normal_tensor(&[1, 64], 1.0);
        let x_j = rng.normal_tensor(&[1, 64], 1.0);
        let wq = rng.normal_tensor(&[64, 16], 0.1);
        let wk = rng.normal_tensor(&[64, 16], 0.1);
        let b = logit_bound_report(&x_i, &x_j, &wq, &wk)?;
        assert!(b.holds(1e-12), "{b:?}");
        tightest = tightest.max(b.lhs / b.rhs);
    }
    println!("1000 instances, bound held everywhere, largest lhs/rhs {tightest:.4}");
    Ok(())
}
