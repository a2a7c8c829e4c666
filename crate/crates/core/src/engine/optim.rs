use serde::{Deserialize, Serialize};
use transdod_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Polynomial decay `lr_init * (1 - k/K)^0.9`.
pub fn poly_lr(epoch: u64, max_epoch: u64, lr_init: f64) -> Result<f64> {
    if epoch > max_epoch || max_epoch == 0 {
        return Err(Error::Schedule(format!("epoch {epoch} outside 0..={max_epoch}")));
    }
    Ok(lr_init * (1.0 - epoch as f64 / max_epoch as f64).powf(0.9))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moments plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }
}

impl AdamW {
    /// One update of every parameter: `p <- p (1 - lr wd)`, then the
    /// bias-corrected Adam step.
    pub fn step<T: Scalar>(&self, params: &mut [Tensor<T>], grads: &[Vec<T>], state: &mut AdamState<T>, lr: f64) {
        state.step += 1;
        let t = state.step as i32;
        let decay = T::of(1.0 - lr * self.weight_decay);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let corr1 = T::of(1.0 - self.beta1.powi(t));
        let corr2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p = *p * decay;
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let mh = *m / corr1;
                let vh = *v / corr2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        assert_eq!(poly_lr(0, 300, 2e-4).unwrap(), 2e-4);
        assert_eq!(poly_lr(300, 300, 2e-4).unwrap(), 0.0);
        assert!((poly_lr(150, 300, 1.0).unwrap() - 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(matches!(poly_lr(301, 300, 1.0), Err(Error::Schedule(_))));
    }

    #[test]
    fn decay_only_step() {
        let opt = AdamW::new(0.01);
        let mut p = vec![Tensor::new([3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let before = p[0].clone();
        let mut st = AdamState::zeros(&p);
        opt.step(&mut p, &[vec![0.0; 3]], &mut st, 0.1);
        let factor = 1.0 - 0.1 * 0.01;
        for (a, b) in p[0].data().iter().zip(before.data()) {
            assert_eq!(*a, b * factor);
        }
    }
}
