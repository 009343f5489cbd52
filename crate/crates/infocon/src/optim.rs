//! AdamW with a linear-warmup + cosine-annealing schedule.

use crate::autodiff::Gradients;
use crate::nn::{Bound, ParamStore};
use ndarray::Array2;

/// Decoupled-weight-decay Adam. Moment buffers are kept in `f32`.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m = (0..store.len())
            .map(|i| Array2::zeros(store.array(i).raw_dim()))
            .collect();
        let v = (0..store.len())
            .map(|i| Array2::zeros(store.array(i).raw_dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m,
            v,
            t: 0,
        }
    }

    /// One update over every parameter that received a gradient. Parameters
    /// outside the current loss (e.g. ablated heads) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let Some(g) = grads.get(bound.var_at(i)) else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.array_mut(i);
            for ((pe, ge), (me, ve)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *me = (self.beta1 * *me as f64 + (1.0 - self.beta1) * ge) as f32;
                *ve = (self.beta2 * *ve as f64 + (1.0 - self.beta2) * ge * ge) as f32;
                let mhat = *me as f64 / bc1;
                let vhat = *ve as f64 / bc2;
                *pe -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pe);
            }
        }
    }
}

/// Learning rate at `iter` of `total`: linear ramp from `0.1 * base` to
/// `base` over `warmup` iterations, then cosine decay back to `0.1 * base`
/// at the final iteration.
pub fn warmup_cosine_lr(base: f64, warmup: usize, total: usize, iter: usize) -> f64 {
    debug_assert!(iter < total.max(1));
    let warmup = warmup.min(total);
    if iter < warmup {
        return base * (0.1 + 0.9 * iter as f64 / warmup as f64);
    }
    if total <= warmup + 1 {
        return base;
    }
    let progress = (iter - warmup) as f64 / (total - 1 - warmup) as f64;
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let base = 3e-4;
        let (warmup, total) = (1000, 20000);
        assert!((warmup_cosine_lr(base, warmup, total, 0) - 0.1 * base).abs() < 1e-12);
        assert!((warmup_cosine_lr(base, warmup, total, warmup) - base).abs() < 1e-12);
        assert!((warmup_cosine_lr(base, warmup, total, total - 1) - 0.1 * base).abs() < 1e-9);
    }

    #[test]
    fn schedule_is_monotone_up_then_down() {
        let base = 1.0;
        let (warmup, total) = (10, 100);
        for i in 1..warmup {
            assert!(
                warmup_cosine_lr(base, warmup, total, i) > warmup_cosine_lr(base, warmup, total, i - 1)
            );
        }
        for i in warmup + 1..total {
            assert!(
                warmup_cosine_lr(base, warmup, total, i) <= warmup_cosine_lr(base, warmup, total, i - 1)
            );
        }
    }
}
