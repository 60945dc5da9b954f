//! Cross-entropy plus soft Dice segmentation loss.

use crate::error::{Result, WauError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smoothing added to the soft Dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1e-6;

/// Loss value and its gradient w.r.t. the logits.
///
/// `logits` is `N x (K+1) x H x W`; `labels` holds one class per pixel in
/// `N x H x W` order. The loss is the mean pixel cross-entropy plus one
/// minus the soft Dice averaged over classes `1..=K`, with Dice sums taken
/// over the whole batch.
pub fn seg_loss_forward<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let (classes, plane) = (s.c, s.plane());
    let pixels = s.n * plane;
    if labels.len() != pixels {
        return Err(WauError::dim(
            "seg_loss",
            format!("{} labels for logits {s}", labels.len()),
        ));
    }
    if classes < 2 {
        return Err(WauError::contract("seg_loss", "need at least background and one class"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(WauError::contract("seg_loss", format!("label {bad} out of range for {classes} classes")));
    }
    let x = logits.data();
    let at = |n: usize, c: usize, p: usize| (n * classes + c) * plane + p;

    let mut probs = vec![0.0f64; x.len()];
    let mut ce = 0.0f64;
    for n in 0..s.n {
        for p in 0..plane {
            let max = (0..classes).map(|c| x[at(n, c, p)].to_f64().unwrap_or(f64::NAN)).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..classes {
                let e = (x[at(n, c, p)].to_f64().unwrap_or(f64::NAN) - max).exp();
                probs[at(n, c, p)] = e;
                sum += e;
            }
            for c in 0..classes {
                probs[at(n, c, p)] /= sum;
            }
            let t = labels[n * plane + p];
            ce -= probs[at(n, t, p)].ln();
        }
    }
    ce /= pixels as f64;

    let fg = classes - 1;
    let mut inter = vec![0.0f64; classes];
    let mut denom = vec![0.0f64; classes];
    for n in 0..s.n {
        for p in 0..plane {
            let t = labels[n * plane + p];
            for c in 1..classes {
                let pr = probs[at(n, c, p)];
                let gt = if t == c { 1.0 } else { 0.0 };
                inter[c] += pr * gt;
                denom[c] += pr + gt;
            }
        }
    }
    let mut dice_mean = 0.0;
    for c in 1..classes {
        dice_mean += (2.0 * inter[c] + DICE_SMOOTH) / (denom[c] + DICE_SMOOTH);
    }
    dice_mean /= fg as f64;
    let loss = ce + (1.0 - dice_mean);

    // dL/dp for the Dice term, then through the per-pixel softmax.
    let mut grad = vec![T::zero(); x.len()];
    let mut dp = vec![0.0f64; classes];
    for n in 0..s.n {
        for p in 0..plane {
            let t = labels[n * plane + p];
            dp[0] = 0.0;
            for c in 1..classes {
                let gt = if t == c { 1.0 } else { 0.0 };
                let den = denom[c] + DICE_SMOOTH;
                let num = 2.0 * inter[c] + DICE_SMOOTH;
                dp[c] = -(2.0 * gt * den - num) / (den * den) / fg as f64;
            }
            let dot: f64 = (0..classes).map(|c| dp[c] * probs[at(n, c, p)]).sum();
            for c in 0..classes {
                let pr = probs[at(n, c, p)];
                let ce_grad = (pr - if c == t { 1.0 } else { 0.0 }) / pixels as f64;
                grad[at(n, c, p)] = T::of(ce_grad + pr * (dp[c] - dot));
            }
        }
    }
    Ok((T::of(loss), Tensor::from_vec(s, grad)?))
}
