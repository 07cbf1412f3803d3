use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Adam with bias correction; moments are kept in the parameter scalar type.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], beta1: f64, beta2: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { beta1, beta2, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2): (T, T) = (cast(self.beta1), cast(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size: T = cast(lr * c2.sqrt() / c1);
        let eps: T = cast(self.eps * c2.sqrt());
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            debug_assert_eq!(p.shape(), g.shape());
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi = *pi - step_size * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Constant for the first half of `total` steps, then linear decay to zero.
pub fn linear_decay_lr(base: f64, step: usize, total: usize) -> f64 {
    let half = total / 2;
    if step < half || total == 0 {
        base
    } else {
        base * (total - step) as f64 / (total - half) as f64
    }
}
