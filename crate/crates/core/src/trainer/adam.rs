use super::TrainHyper;
use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam with bias correction; one instance per round.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub t: u32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            t: 0,
        }
    }

    /// Applies one update to `params` in flatten order.
    pub fn step_flat(&mut self, params: &mut [S], grad: &[S], h: &TrainHyper) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::contract(format!(
                "Adam state has {} moments, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (S::lit(h.beta1), S::lit(h.beta2));
        let c1 = S::one() - b1.powi(self.t as i32);
        let c2 = S::one() - b2.powi(self.t as i32);
        let (lr, eps) = (S::lit(h.lr), S::lit(h.eps));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (S::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (S::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("adam step"));
        }
        Ok(())
    }

    pub fn step(&mut self, adapters: &mut AdapterSet<S>, grad: &[S], h: &TrainHyper) -> Result<()> {
        let mut flat = adapters.flatten();
        self.step_flat(&mut flat, grad, h)?;
        adapters.assign_flat(&flat)
    }
}
