//! Adam with bias correction.

use crate::error::{Result, WauError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter with learning rate `lr`.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(WauError::dim(
                "adam",
                format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(WauError::dim("adam", format!("param {i}: {} vs grad {}", p.shape(), g.shape())));
            }
            g.ensure_finite("adam", "gradient")?;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                let g = g.to_f64().unwrap_or(f64::NAN);
                let mn = b1 * m.to_f64().unwrap_or(0.0) + (1.0 - b1) * g;
                let vn = b2 * v.to_f64().unwrap_or(0.0) + (1.0 - b2) * g * g;
                *m = T::of(mn);
                *v = T::of(vn);
                let step = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = T::of(p.to_f64().unwrap_or(f64::NAN) - step);
            }
        }
        Ok(())
    }
}
