//! Adam optimizer with bias correction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum AdamError {
    ShapeMismatch(String),
}

impl core::fmt::Display for AdamError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            AdamError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
        }
    }
}

impl core::error::Error for AdamError {}

/// First/second moment estimates for one group of parameters, plus the step
/// counter and hyperparameters. Moments start at zero; `t` counts completed
/// steps and drives the bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<E: Real> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub epsilon: E,
    pub t: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    // Running beta^t products, updated once per step.
    beta1_t: E,
    beta2_t: E,
}

impl<E: Real> AdamState<E> {
    /// Defaults beta1=0.9, beta2=0.999, epsilon=1e-8.
    pub fn new(lr: E, param_lens: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: E::from_f64(0.9),
            beta2: E::from_f64(0.999),
            epsilon: E::from_f64(1e-8),
            t: 0,
            m: param_lens.iter().map(|&n| vec![E::ZERO; n]).collect(),
            v: param_lens.iter().map(|&n| vec![E::ZERO; n]).collect(),
            beta1_t: E::ONE,
            beta2_t: E::ONE,
        }
    }

    /// One update over every parameter/gradient pair:
    /// m <- b1*m + (1-b1)*g, v <- b2*v + (1-b2)*g^2,
    /// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    pub fn step(
        &mut self,
        params: &mut [Tensor<E>],
        grads: &[&[E]],
    ) -> Result<(), AdamError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(AdamError::ShapeMismatch(format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(AdamError::ShapeMismatch(format!(
                    "parameter {i}: {} values, {} gradient entries, {} moments",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }

        self.t += 1;
        self.beta1_t = self.beta1_t * self.beta1;
        self.beta2_t = self.beta2_t * self.beta2;
        let m_corr = E::ONE / (E::ONE - self.beta1_t);
        let v_corr = E::ONE / (E::ONE - self.beta2_t);
        let one_m_b1 = E::ONE - self.beta1;
        let one_m_b2 = E::ONE - self.beta2;

        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((p, &g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + one_m_b1 * g;
                *vi = self.beta2 * *vi + one_m_b2 * g * g;
                let m_hat = *mi * m_corr;
                let v_hat = *vi * v_corr;
                *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
