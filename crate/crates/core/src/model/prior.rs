//! Learned transition prior of one latent layer.
//!
//! Each component `i` has its own network
//! `r_i(z_i, c) = exp(s_i(c)) * (z_i + phi_i(z_i)) + m_i(c)`,
//! where `c` stacks the delayed latents of the layer and the current latent
//! of the parent layer, `(s_i, m_i)` is a free MLP of `c` and `phi_i` is a
//! non-decreasing network (squared weights, LeakyReLU). The map is strictly
//! increasing in `z_i`, so the Jacobian is diagonal and positive and
//! `r_i` is a bijection of the real line for every `c`. The derivative of
//! `phi_i` is carried alongside the forward pass, which keeps the log-determinant
//! inside the autodiff graph.

use candle_core::{Tensor, Var};

use super::nn::{leaky_relu, leaky_relu_slope, ParamBuilder};
use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone)]
struct Batched {
    weight: Var,
    bias: Var,
}

impl Batched {
    fn new(pb: &mut ParamBuilder, name: &str, n: usize, input: usize, output: usize, bound: f64) -> Result<Self> {
        Ok(Batched {
            weight: pb.uniform(format!("{name}.weight"), &[n, input, output], bound)?,
            bias: pb.uniform(format!("{name}.bias"), &[n, 1, output], bound)?,
        })
    }

    /// `[n, R, in] -> [n, R, out]`
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Clone)]
pub(crate) struct LayerPrior {
    pub(crate) dim: usize,
    pub(crate) cond_dim: usize,
    conditioner: Vec<Batched>,
    flow_in: Batched,
    flow_hidden: Vec<Batched>,
    flow_out: Var,
    slope: f64,
}

/// Noise and log-derivative for a batch of rows, both `[R, n]`.
pub(crate) struct PriorOutput {
    pub noise: Tensor,
    pub log_jac: Tensor,
}

impl LayerPrior {
    pub(crate) fn new(pb: &mut ParamBuilder, cfg: &ModelConfig, layer: usize) -> Result<Self> {
        let dims = cfg.dims_bottom_up();
        let n = dims[layer];
        let parent = dims.get(layer + 1).copied().unwrap_or(0);
        let cond_dim = cfg.lag * n + parent;
        let name = format!("prior{layer}");
        let h = cfg.prior_hidden;
        let mut conditioner = Vec::with_capacity(cfg.prior_depth + 1);
        let mut input = cond_dim;
        for d in 0..cfg.prior_depth {
            conditioner.push(Batched::new(pb, &format!("{name}.cond{d}"), n, input, h, 1.0 / (input as f64).sqrt())?);
            input = h;
        }
        conditioner.push(Batched::new(pb, &format!("{name}.cond_out"), n, input, 2, 1.0 / (input as f64).sqrt())?);
        // Squared weights: uniform(-a, a)^2 has mean a^2 / 3 = 1 / fan_in.
        let hf = cfg.flow_hidden;
        let flow_in = Batched::new(pb, &format!("{name}.flow0"), n, 1, hf, 3f64.sqrt())?;
        let raw = (3.0 / hf as f64).sqrt();
        let flow_hidden = (1..cfg.flow_depth.max(1))
            .map(|d| Batched::new(pb, &format!("{name}.flow{d}"), n, hf, hf, raw))
            .collect::<Result<_>>()?;
        let flow_out = pb.uniform(format!("{name}.flow_out.weight"), &[n, hf, 1], raw * 0.1)?;
        Ok(LayerPrior {
            dim: n,
            cond_dim,
            conditioner,
            flow_in,
            flow_hidden,
            flow_out,
            slope: cfg.leaky_slope,
        })
    }

    /// `cond`: `[R, c]` -> `(s, m)`, each `[n, R, 1]`.
    pub(crate) fn conditioner(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let (rows, c) = cond.dims2()?;
        if c != self.cond_dim {
            return Err(Error::Shape(format!("prior conditioning has width {c}, expected {}", self.cond_dim)));
        }
        let mut h = cond.unsqueeze(0)?.broadcast_as((self.dim, rows, c))?.contiguous()?;
        let last = self.conditioner.len() - 1;
        for (i, layer) in self.conditioner.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = leaky_relu(&h, self.slope)?;
            }
        }
        Ok((h.narrow(2, 0, 1)?, h.narrow(2, 1, 1)?))
    }

    /// `z`: `[n, R, 1]` -> `(phi, dphi/dz)`, each `[n, R, 1]`.
    pub(crate) fn monotone(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = self.flow_in.weight.as_tensor().sqr()?;
        let a = z.broadcast_mul(&w)?.broadcast_add(self.flow_in.bias.as_tensor())?;
        let da = w.broadcast_as(a.shape())?;
        let mut dh = (leaky_relu_slope(&a, self.slope)? * da)?;
        let mut h = leaky_relu(&a, self.slope)?;
        for layer in &self.flow_hidden {
            let w = layer.weight.as_tensor().sqr()?;
            let a = h.matmul(&w)?.broadcast_add(layer.bias.as_tensor())?;
            let da = dh.matmul(&w)?;
            dh = (leaky_relu_slope(&a, self.slope)? * da)?;
            h = leaky_relu(&a, self.slope)?;
        }
        let w = self.flow_out.as_tensor().sqr()?;
        Ok((h.matmul(&w)?, dh.matmul(&w)?))
    }

    /// `z`: `[R, n]`, `cond`: `[R, c]`.
    pub(crate) fn forward(&self, z: &Tensor, cond: &Tensor) -> Result<PriorOutput> {
        let (s, m) = self.conditioner(cond)?;
        let zc = z.t()?.unsqueeze(2)?.contiguous()?;
        let (phi, dphi) = self.monotone(&zc)?;
        let noise = ((s.exp()? * (zc + phi)?)? + m)?;
        let log_jac = (s + dphi.affine(1.0, 1.0)?.log()?)?;
        Ok(PriorOutput {
            noise: noise.squeeze(2)?.t()?.contiguous()?,
            log_jac: log_jac.squeeze(2)?.t()?.contiguous()?,
        })
    }

    /// Solves `r(z, cond) = noise` for `z` by bracketing and bisection.
    /// `noise`: `[R, n]` row-major values; returns `[R, n]` row-major.
    pub(crate) fn invert(&self, noise: &[f64], cond: &Tensor) -> Result<Vec<f64>> {
        let rows = cond.dim(0)?;
        let n = self.dim;
        if noise.len() != rows * n {
            return Err(Error::Shape("inverse flow: noise length mismatch".into()));
        }
        let (s, m) = self.conditioner(cond)?;
        let dtype = s.dtype();
        // Component-major target (r - m) * exp(-s).
        let s = s.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let m = m.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let target: Vec<f64> = (0..n * rows)
            .map(|k| {
                let (i, r) = (k / rows, k % rows);
                (noise[r * n + i] - m[k]) * (-s[k]).exp()
            })
            .collect();
        let g = |z: &[f64]| -> Result<Vec<f64>> {
            let zt = Tensor::from_slice(z, (n, rows, 1), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
            let (phi, _) = self.monotone(&zt)?;
            let v = (zt + phi)?.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            Ok(v)
        };
        let mut lo = vec![-1.0; n * rows];
        let mut hi = vec![1.0; n * rows];
        for _ in 0..64 {
            let (glo, ghi) = (g(&lo)?, g(&hi)?);
            let mut done = true;
            for k in 0..n * rows {
                if glo[k] > target[k] {
                    lo[k] *= 2.0;
                    done = false;
                }
                if ghi[k] < target[k] {
                    hi[k] *= 2.0;
                    done = false;
                }
            }
            if done {
                break;
            }
        }
        for _ in 0..60 {
            let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
            let gm = g(&mid)?;
            for k in 0..n * rows {
                if gm[k] < target[k] {
                    lo[k] = mid[k];
                } else {
                    hi[k] = mid[k];
                }
            }
        }
        let mut out = vec![0.0; rows * n];
        for k in 0..n * rows {
            let (i, r) = (k / rows, k % rows);
            out[r * n + i] = 0.5 * (lo[k] + hi[k]);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("inverse prior flow did not converge".into()));
        }
        Ok(out)
    }

    /// Makes the flow the affine map `exp(log_scale) * z + shift` in every component.
    pub(crate) fn set_affine(&self, log_scale: f64, shift: f64) -> Result<()> {
        let out = self.conditioner.last().unwrap();
        out.weight.set(&out.weight.zeros_like()?)?;
        let bias: Vec<f64> = (0..self.dim).flat_map(|_| [log_scale, shift]).collect();
        let dtype = out.bias.dtype();
        out.bias.set(&Tensor::from_vec(bias, (self.dim, 1, 2), &candle_core::Device::Cpu)?.to_dtype(dtype)?)?;
        self.flow_out.set(&self.flow_out.zeros_like()?)?;
        Ok(())
    }
}
