use crate::scalar::Scalar;

use super::ParamSet;

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step_count: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new(learning_rate: T) -> Self {
        Self::with_betas(learning_rate, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_betas(learning_rate: T, beta1: T, beta2: T, epsilon: T) -> Self {
        Self { learning_rate, beta1, beta2, epsilon, step_count: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
            self.second = self.first.clone();
        }
        self.step_count += 1;
        let t = i32::try_from(self.step_count).unwrap_or(i32::MAX);
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for ((p, m), v) in params.tensors_mut().zip(&mut self.first).zip(&mut self.second) {
            let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
            for (((w, &gv), mv), vv) in p.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Multiplies the learning rate by `gamma` every `step_size_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepScheduler<T> {
    pub initial_lr: T,
    pub step_size_epochs: usize,
    pub gamma: T,
}

impl<T: Scalar> StepScheduler<T> {
    pub fn new(initial_lr: T, step_size_epochs: usize, gamma: T) -> Self {
        Self { initial_lr, step_size_epochs: step_size_epochs.max(1), gamma }
    }

    pub fn lr_at(&self, epoch: usize) -> T {
        let decays = i32::try_from(epoch / self.step_size_epochs).unwrap_or(i32::MAX);
        self.initial_lr * self.gamma.powi(decays)
    }

    /// Sets the optimiser's learning rate for `epoch`.
    pub fn step(&self, opt: &mut Adam<T>, epoch: usize) {
        opt.learning_rate = self.lr_at(epoch);
    }
}
