use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter running mean of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    pub s: Vec<Tensor>,
    pub rho: f64,
    pub eps: f64,
}

impl RmsPropState {
    /// Zero accumulators shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, rho: f64, eps: f64) -> Self {
        RmsPropState {
            s: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
            rho,
            eps,
        }
    }

    /// `s ← ρ·s + (1−ρ)·g²`, then `w ← w − lr·g / (√s + ε)`.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != self.s.len() || grads.len() != self.s.len() {
            return Err(Error::shape(
                "rmsprop_update",
                &[params.len(), grads.len()],
                &[self.s.len()],
            ));
        }
        for ((w, g), s) in params.into_iter().zip(grads).zip(&mut self.s) {
            if w.shape() != g.shape() || w.shape() != s.shape() {
                return Err(Error::shape("rmsprop_update", w.shape(), g.shape()));
            }
            let (rho, eps) = (self.rho, self.eps);
            for ((wi, &gi), si) in w.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                let g = gi as f64;
                let sn = rho * *si as f64 + (1.0 - rho) * g * g;
                *si = sn as f32;
                *wi = (*wi as f64 - lr * g / (sn.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}
