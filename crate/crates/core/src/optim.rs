//! Bias-corrected Adam over a fixed list of parameter tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimizer state: one first/second moment buffer per parameter, in the
/// same order as the parameter list it was built from.
pub struct AdamState<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], lr: T, beta1: T, beta2: T, eps: T) -> Result<Self> {
        if lr < T::zero() || !lr.is_finite() {
            return Err(Error::config(format!("adam lr must be non-negative, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if b <= T::zero() || b >= T::one() {
                return Err(Error::config(format!("adam {name} must lie in (0,1), got {b}")));
            }
        }
        if eps <= T::zero() {
            return Err(Error::config(format!("adam eps must be positive, got {eps}")));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step_count: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update in place using each parameter's accumulated gradient
    /// (absent gradients count as zero). Gradients are left untouched;
    /// callers zero them between steps.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam state built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();

        for (i, param) in params.iter().enumerate() {
            let inner = &mut *param.inner.borrow_mut();
            if inner.data.len() != self.m[i].len() {
                return Err(Error::shape(format!(
                    "adam moment {} has {} elements, parameter has {}",
                    i,
                    self.m[i].len(),
                    inner.data.len()
                )));
            }
            let zeros;
            let grad: &[T] = match &inner.grad {
                Some(g) => g,
                None => {
                    zeros = vec![T::zero(); inner.data.len()];
                    &zeros
                }
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), mi), vi) in inner.data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (one - self.beta1) * g;
                *vi = self.beta2 * *vi + (one - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Raw moments for checkpointing.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Rebuild state from checkpointed moments.
    pub fn from_parts(
        lr: T,
        beta1: T,
        beta2: T,
        eps: T,
        step_count: u64,
        m: Vec<Vec<T>>,
        v: Vec<Vec<T>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(v.iter()).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::shape("adam moment buffers disagree in shape"));
        }
        let mut state = AdamState::new(&[], lr, beta1, beta2, eps)?;
        state.step_count = step_count;
        state.m = m;
        state.v = v;
        Ok(state)
    }
}
