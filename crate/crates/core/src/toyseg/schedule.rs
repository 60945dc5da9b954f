//! Linear warmup followed by cosine annealing to zero.

use std::f64::consts::PI;

/// Learning rate at `step` (0-based update index).
///
/// Ramps linearly from 0 to `lr_init` over `warmup_steps`, then follows a
/// half cosine from `lr_init` down to 0 at `total_steps`. Steps past the end
/// clamp to 0.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, lr_init: f64) -> f64 {
    let warmup = warmup_steps.min(total_steps);
    if step < warmup {
        return lr_init * step as f64 / warmup as f64;
    }
    let decay = total_steps - warmup;
    if decay == 0 || step >= total_steps {
        return if step >= total_steps { 0.0 } else { lr_init };
    }
    let t = (step - warmup) as f64 / decay as f64;
    0.5 * lr_init * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        let lr = 1e-4;
        assert_eq!(lr_at(0, 1000, 100, lr), 0.0);
        assert_eq!(lr_at(100, 1000, 100, lr), lr);
        assert!(lr_at(1000, 1000, 100, lr).abs() <= 1e-12);
        assert!((lr_at(550, 1000, 100, lr) - lr / 2.0).abs() < 1e-18);
        assert!((lr_at(50, 1000, 100, lr) - lr / 2.0).abs() < 1e-18);
    }

    #[test]
    fn no_warmup() {
        assert_eq!(lr_at(0, 10, 0, 1.0), 1.0);
        assert_eq!(lr_at(10, 10, 0, 1.0), 0.0);
    }

    proptest! {
        #[test]
        fn bounded_and_monotone_after_warmup(total in 2usize..500, warm_frac in 0.0f64..0.5, lr in 1e-6f64..1.0) {
            let warm = (total as f64 * warm_frac) as usize;
            let mut prev = f64::INFINITY;
            for s in 0..=total {
                let v = lr_at(s, total, warm, lr);
                prop_assert!(v >= 0.0 && v <= lr * (1.0 + 1e-15));
                if s >= warm {
                    prop_assert!(v <= prev + 1e-18);
                    prev = v;
                }
            }
        }
    }
}
