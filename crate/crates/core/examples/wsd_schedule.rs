//! Warmup-stable-decay learning rate with the reference recipe.

use muonclip::optim::{wsd_lr, LrSchedule};

fn main() -> muonclip::Result<()> {
    let s = LrSchedule::reference_recipe(1000, 1500);
    for step in [0, 1, 250, 500, 501, 1000, 1125, 1250, 1375, 1499, 1500] {
        println!("step {step:>5}  lr {:.6e}", wsd_lr(step, &s)?);
    }
    println!("largest step-to-step change allowed: {:.3e}", s.continuity_bound());
    Ok(())
}
