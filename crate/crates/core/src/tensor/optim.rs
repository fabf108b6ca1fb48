use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Trainable tensor with its Adam moment accumulators.
#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub(crate) adam_m: Vec<F>,
    pub(crate) adam_v: Vec<F>,
    pub(crate) step_count: u64,
}

impl<F: Real> Parameter<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let n = value.len();
        Parameter { value, grad: None, adam_m: vec![F::zero(); n], adam_v: vec![F::zero(); n], step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[F], &[F]) {
        (&self.adam_m, &self.adam_v)
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn set_optimizer_state(&mut self, m: Vec<F>, v: Vec<F>, step_count: u64) -> Result<()> {
        if m.len() != self.value.len() || v.len() != self.value.len() {
            return Err(Error::shape("Adam moments must match parameter length"));
        }
        self.adam_m = m;
        self.adam_v = v;
        self.step_count = step_count;
        Ok(())
    }
}

/// Adam with the conventional defaults β1 = 0.9, β2 = 0.999, ε = 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter. Consumes the gradients;
    /// stepping again before the next backward pass is a usage error.
    pub fn step<'a, F: Real>(&self, params: impl IntoIterator<Item = &'a mut Parameter<F>>, lr: f64) -> Result<()> {
        let params: Vec<&mut Parameter<F>> = params.into_iter().collect();
        if params.iter().any(|p| p.grad.is_none()) {
            return Err(Error::usage("adam_step: parameter has no gradient; run backward first"));
        }
        let (b1, b2) = (F::from_f64_lossy(self.beta1), F::from_f64_lossy(self.beta2));
        let eps = F::from_f64_lossy(self.eps);
        let lr = F::from_f64_lossy(lr);
        for p in params {
            let grad = p.grad.take().expect("checked above");
            if grad.len() != p.value.len() {
                return Err(Error::shape("adam_step: gradient length differs from parameter"));
            }
            p.step_count += 1;
            let t = p.step_count as i32;
            let c1 = F::one() - b1.powi(t);
            let c2 = F::one() - b2.powi(t);
            let Parameter { value, adam_m, adam_v, .. } = p;
            for (((w, m), v), &g) in value.data_mut().iter_mut().zip(adam_m.iter_mut()).zip(adam_v.iter_mut()).zip(grad.data()) {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
