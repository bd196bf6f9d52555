use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::Result;

/// Adam with bias correction; moments are kept per parameter for resuming.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) first: Vec<Tensor>,
    pub(crate) second: Vec<Tensor>,
    pub(crate) steps: u64,
}

impl Adam {
    pub fn new(vars: &[(String, Var)], learning_rate: f64) -> Result<Self> {
        let zeros = || -> Result<Vec<Tensor>> { vars.iter().map(|(_, v)| Ok(v.as_tensor().zeros_like()?)).collect() };
        Ok(Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: zeros()?,
            second: zeros()?,
            steps: 0,
        })
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(vars: &[(String, Var)], grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, v) in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// One update; gradients are multiplied by `grad_scale` first (clipping).
    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, grad_scale: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (_, v)) in vars.iter().enumerate() {
            let Some(g) = grads.get(v.as_tensor()) else { continue };
            let g = g.detach().affine(grad_scale, 0.0)?;
            let m = ((&self.first[k] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let s = ((&self.second[k] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = s.affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, self.eps)?;
            let update = (m.affine(self.learning_rate / c1, 0.0)? / denom)?;
            v.set(&(v.as_tensor().detach() - update)?.detach())?;
            self.first[k] = m.detach();
            self.second[k] = s.detach();
        }
        Ok(())
    }
}
