//! Hierarchical sequential VAE: a contextual posterior network, a decoder
//! from the bottom latent layer and a learned flow prior per layer.

mod config;
mod encoder;
mod nn;
mod prior;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use config::ModelConfig;
pub(crate) use encoder::Posterior;
use encoder::{Decoder, Encoder};
use nn::ParamBuilder;
use prior::LayerPrior;

use crate::error::{Error, Result};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHUNK: usize = 256;

/// Per-layer posterior statistics, bottom layer first, each `[N, T, n_l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStack {
    pub mean: Vec<Array3<f64>>,
    pub log_var: Vec<Array3<f64>>,
    pub sample: Vec<Array3<f64>>,
}

impl LatentStack {
    pub fn num_layers(&self) -> usize {
        self.mean.len()
    }

    /// All layers side by side, `[N, T, sum n_l]`, bottom layer first.
    pub fn concat(layers: &[Array3<f64>]) -> Array3<f64> {
        let views: Vec<_> = layers.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(2), &views).expect("layers share N and T")
    }
}

/// Prior noise of one latent step and the derivative of each noise
/// component with respect to its own latent component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEvaluation {
    pub noise: Vec<f64>,
    /// Diagonal of the (diagonal) Jacobian `d noise / d z_current`.
    pub jacobian_diag: Vec<f64>,
    pub log_abs_det: f64,
}

pub struct ChildModel {
    config: ModelConfig,
    dtype: DType,
    vars: Vec<(String, Var)>,
    encoder: Encoder,
    decoder: Decoder,
    priors: Vec<LayerPrior>,
}

pub(crate) fn to_tensor(a: ArrayView3<f64>, dtype: DType) -> Result<Tensor> {
    let a = a.as_standard_layout();
    let v: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, a.dim(), &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn to_array3(t: &Tensor) -> Result<Array3<f64>> {
    let shape = t.dims3()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array3::from_shape_vec(shape, v).expect("shape matches"))
}

impl ChildModel {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        if !matches!(dtype, DType::F32 | DType::F64) {
            return Err(Error::Config("model dtype must be f32 or f64".into()));
        }
        let mut pb = ParamBuilder::new(seed, dtype);
        let encoder = Encoder::new(&mut pb, &config)?;
        let decoder = Decoder::new(&mut pb, &config)?;
        let priors = (0..config.num_layers)
            .map(|l| LayerPrior::new(&mut pb, &config, l))
            .collect::<Result<_>>()?;
        Ok(ChildModel { config, dtype, vars: pb.vars, encoder, decoder, priors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Trainable parameters in a fixed order.
    pub fn named_parameters(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn check_obs(&self, x: &ArrayView3<f64>) -> Result<()> {
        if x.dim().2 != self.config.obs_dim {
            return Err(Error::Shape(format!(
                "observations have {} features, model expects {}",
                x.dim().2,
                self.config.obs_dim
            )));
        }
        if x.dim().1 == 0 {
            return Err(Error::Shape("sequences must have at least one step".into()));
        }
        Ok(())
    }

    pub(crate) fn encode_tensor(&self, x: &Tensor, noise: Option<&[Tensor]>) -> Result<Vec<Posterior>> {
        self.encoder.forward(x, noise)
    }

    pub(crate) fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    /// Standard normal reparameterisation noise for a batch, one tensor per layer.
    pub(crate) fn draw_noise(&self, batch: usize, steps: usize, rng: &mut impl rand::Rng) -> Result<Vec<Tensor>> {
        self.config
            .dims_bottom_up()
            .iter()
            .map(|&n| {
                let v: Vec<f64> = (0..batch * steps * n).map(|_| StandardNormal.sample(rng)).collect();
                Ok(Tensor::from_vec(v, (batch, steps, n), &Device::Cpu)?.to_dtype(self.dtype)?)
            })
            .collect()
    }

    /// Prior log-density of latent trajectories, one `[B, T]` tensor per layer
    /// (summed over components). `samples[l]`: `[B, T, n_l]`, bottom first.
    pub(crate) fn prior_log_density_tensor(&self, samples: &[Tensor]) -> Result<Vec<Tensor>> {
        let tau = self.config.lag;
        let mut out = Vec::with_capacity(samples.len());
        for (l, prior) in self.priors.iter().enumerate() {
            let z = &samples[l];
            let (b, t, n) = z.dims3()?;
            let init_len = tau.min(t);
            let init = z.narrow(1, 0, init_len)?.sqr()?.sum(2)?.affine(-0.5, -0.5 * LN_2PI * n as f64)?;
            if t <= tau {
                out.push(init);
                continue;
            }
            let rows = b * (t - tau);
            let cur = z.narrow(1, tau, t - tau)?.reshape((rows, n))?;
            let mut cond: Vec<Tensor> = (1..=tau).map(|j| z.narrow(1, tau - j, t - tau)).collect::<candle_core::Result<_>>()?;
            if let Some(parent) = samples.get(l + 1) {
                cond.push(parent.narrow(1, tau, t - tau)?);
            }
            let cond = Tensor::cat(&cond, 2)?.reshape((rows, prior.cond_dim))?;
            let po = prior.forward(&cur, &cond)?;
            let lp = (po.noise.sqr()?.affine(-0.5, -0.5 * LN_2PI)? + po.log_jac)?
                .sum(1)?
                .reshape((b, t - tau))?;
            out.push(Tensor::cat(&[init, lp], 1)?);
        }
        Ok(out)
    }

    fn encode_chunks(&self, x: ArrayView3<f64>, seed: Option<u64>) -> Result<LatentStack> {
        self.check_obs(&x)?;
        let layers = self.config.num_layers;
        let mut parts: [Vec<Vec<Array3<f64>>>; 3] = Default::default();
        for p in parts.iter_mut() {
            *p = vec![Vec::new(); layers];
        }
        let mut rng = seed.map(rng::chacha);
        let n = x.dim().0;
        for start in (0..n).step_by(CHUNK) {
            let chunk = x.slice(s![start..(start + CHUNK).min(n), .., ..]);
            let xt = to_tensor(chunk, self.dtype)?;
            let noise = match rng.as_mut() {
                Some(r) => Some(self.draw_noise(chunk.dim().0, chunk.dim().1, r)?),
                None => None,
            };
            let post = self.encoder.forward(&xt, noise.as_deref())?;
            for (l, p) in post.iter().enumerate() {
                parts[0][l].push(to_array3(&p.mean)?);
                parts[1][l].push(to_array3(&p.log_var)?);
                parts[2][l].push(to_array3(&p.sample)?);
            }
        }
        let join = |v: &Vec<Array3<f64>>| {
            let views: Vec<_> = v.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("chunks share T and n")
        };
        let [m, lv, sm] = parts;
        Ok(LatentStack {
            mean: m.iter().map(join).collect(),
            log_var: lv.iter().map(join).collect(),
            sample: sm.iter().map(join).collect(),
        })
    }

    /// Posterior statistics for `[N, T, obs_dim]` observations; the sample
    /// equals the mean.
    pub fn encode_context(&self, observations: ArrayView3<f64>) -> Result<LatentStack> {
        self.encode_chunks(observations, None)
    }

    /// Like [`encode_context`](Self::encode_context) with reparameterised samples.
    pub fn sample_posterior(&self, observations: ArrayView3<f64>, seed: u64) -> Result<LatentStack> {
        self.encode_chunks(observations, Some(seed))
    }

    /// Reconstructs observations from the bottom latent layer, `[N, T, n_1]`.
    pub fn decode(&self, bottom: ArrayView3<f64>) -> Result<Array3<f64>> {
        let n1 = self.config.dims_bottom_up()[0];
        if bottom.dim().2 != n1 {
            return Err(Error::Shape(format!("decoder expects {n1} latent features, got {}", bottom.dim().2)));
        }
        to_array3(&self.decoder.forward(&to_tensor(bottom, self.dtype)?)?)
    }

    fn layer_prior(&self, layer: usize) -> Result<&LayerPrior> {
        self.priors
            .get(layer)
            .ok_or_else(|| Error::Shape(format!("layer {layer} out of range (model has {})", self.priors.len())))
    }

    fn condition_row(&self, layer: usize, delayed: &[&[f64]], parent: Option<&[f64]>) -> Result<Vec<f64>> {
        let prior = self.layer_prior(layer)?;
        let n = prior.dim;
        if delayed.len() != self.config.lag || delayed.iter().any(|d| d.len() != n) {
            return Err(Error::Shape(format!("expected {} delayed states of width {n}", self.config.lag)));
        }
        let mut row: Vec<f64> = delayed.iter().flat_map(|d| d.iter().copied()).collect();
        let top = layer + 1 == self.priors.len();
        match (parent, top) {
            (None, true) => {}
            (Some(p), false) if p.len() == self.priors[layer + 1].dim => row.extend_from_slice(p),
            _ => return Err(Error::Shape("parent latent missing or of the wrong width".into())),
        }
        Ok(row)
    }

    /// Evaluates the prior flow of `layer` (0 = bottom) at one step.
    /// `delayed` lists `z_{t-1}, ..., z_{t-tau}` of the same layer and
    /// `parent` is the current latent of the layer above (absent at the top).
    pub fn prior_noise_and_jacobian(
        &self,
        layer: usize,
        current: &[f64],
        delayed: &[&[f64]],
        parent: Option<&[f64]>,
    ) -> Result<PriorEvaluation> {
        let prior = self.layer_prior(layer)?;
        if current.len() != prior.dim {
            return Err(Error::Shape(format!("current latent must have width {}", prior.dim)));
        }
        let cond = self.condition_row(layer, delayed, parent)?;
        let z = Tensor::from_slice(current, (1, prior.dim), &Device::Cpu)?.to_dtype(self.dtype)?;
        let c = Tensor::from_vec(cond, (1, prior.cond_dim), &Device::Cpu)?.to_dtype(self.dtype)?;
        let out = prior.forward(&z, &c)?;
        let noise = out.noise.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let log_jac = out.log_jac.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(PriorEvaluation {
            noise,
            jacobian_diag: log_jac.iter().map(|v| v.exp()).collect(),
            log_abs_det: log_jac.iter().sum(),
        })
    }

    /// Solves the prior flow of `layer` for the latent that produces `noise`.
    pub fn invert_prior(&self, layer: usize, noise: &[f64], delayed: &[&[f64]], parent: Option<&[f64]>) -> Result<Vec<f64>> {
        let prior = self.layer_prior(layer)?;
        if noise.len() != prior.dim {
            return Err(Error::Shape(format!("noise must have width {}", prior.dim)));
        }
        let cond = self.condition_row(layer, delayed, parent)?;
        let c = Tensor::from_vec(cond, (1, prior.cond_dim), &Device::Cpu)?.to_dtype(self.dtype)?;
        prior.invert(noise, &c)
    }

    /// Prior log-density per sequence, step and layer, `[N, T, L]`.
    /// `latents[l]` is `[N, T, n_l]`, bottom layer first.
    pub fn prior_log_density(&self, latents: &[Array3<f64>]) -> Result<Array3<f64>> {
        let dims = self.config.dims_bottom_up();
        if latents.len() != dims.len() || latents.iter().zip(&dims).any(|(a, &n)| a.dim().2 != n) {
            return Err(Error::Shape("latents do not match the model's layer widths".into()));
        }
        let (n, t, _) = latents[0].dim();
        if latents.iter().any(|a| a.dim().0 != n || a.dim().1 != t) {
            return Err(Error::Shape("latent layers disagree on N or T".into()));
        }
        let mut out = Array3::zeros((n, t, dims.len()));
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let samples = latents
                .iter()
                .map(|a| to_tensor(a.slice(s![start..end, .., ..]), self.dtype))
                .collect::<Result<Vec<_>>>()?;
            for (l, lp) in self.prior_log_density_tensor(&samples)?.iter().enumerate() {
                let v = lp.to_dtype(DType::F64)?.to_vec2::<f64>()?;
                for (i, row) in v.iter().enumerate() {
                    for (j, x) in row.iter().enumerate() {
                        out[[start + i, j, l]] = *x;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Ancestral sampling from the learned prior and decoder.
    /// Returns latents (bottom first, each `[N, T, n_l]`) and decoded
    /// observations `[N, T, obs_dim]` in the model's observation space.
    pub fn generate(&self, num_sequences: usize, seq_length: usize, seed: u64) -> Result<(Vec<Array3<f64>>, Array3<f64>)> {
        let dims = self.config.dims_bottom_up();
        let tau = self.config.lag;
        let mut rng = rng::chacha(seed);
        let mut z: Vec<Array3<f64>> = dims.iter().map(|&n| Array3::zeros((num_sequences, seq_length, n))).collect();
        for t in 0..seq_length {
            for l in (0..dims.len()).rev() {
                let n = dims[l];
                let noise: Vec<f64> = (0..num_sequences * n).map(|_| StandardNormal.sample(&mut rng)).collect();
                let values = if t < tau {
                    noise
                } else {
                    let prior = &self.priors[l];
                    let mut cond = Array2::<f64>::zeros((num_sequences, prior.cond_dim));
                    for j in 1..=tau {
                        cond.slice_mut(s![.., (j - 1) * n..j * n]).assign(&z[l].slice(s![.., t - j, ..]));
                    }
                    if l + 1 < dims.len() {
                        cond.slice_mut(s![.., tau * n..]).assign(&z[l + 1].slice(s![.., t, ..]));
                    }
                    let c = Tensor::from_vec(cond.into_raw_vec_and_offset().0, (num_sequences, prior.cond_dim), &Device::Cpu)?
                        .to_dtype(self.dtype)?;
                    prior.invert(&noise, &c)?
                };
                let values = Array2::from_shape_vec((num_sequences, n), values).expect("sizes agree");
                z[l].slice_mut(s![.., t, ..]).assign(&values);
            }
        }
        let x = self.decode(z[0].view())?;
        Ok((z, x))
    }

    /// Sets every component of the prior flow of `layer` to the affine map
    /// `exp(log_scale) * z + shift`, regardless of conditioning.
    pub fn set_prior_affine(&self, layer: usize, log_scale: f64, shift: f64) -> Result<()> {
        self.layer_prior(layer)?.set_affine(log_scale, shift)
    }

    /// Parameter values as `f64` arrays, keyed by name.
    pub fn export_parameters(&self) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let values = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                Ok((name.clone(), v.dims().to_vec(), values))
            })
            .collect()
    }

    /// Overwrites parameters; names and shapes must match exactly.
    pub fn import_parameters(&self, params: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        if params.len() != self.vars.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameter tensors, model has {}",
                params.len(),
                self.vars.len()
            )));
        }
        for ((name, shape, values), (own, var)) in params.iter().zip(&self.vars) {
            if name != own || shape.as_slice() != var.dims() || values.len() != var.elem_count() {
                return Err(Error::Shape(format!("parameter {name} {shape:?} does not match {own} {:?}", var.dims())));
            }
        }
        for ((_, shape, values), (_, var)) in params.iter().zip(&self.vars) {
            let t = Tensor::from_slice(values, shape.as_slice(), &Device::Cpu)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// Observation scaling into the decoder's (-1, 1) range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ObsNormalizer {
    pub fn identity(dim: usize) -> Self {
        ObsNormalizer { offset: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Centres each feature and divides by `max |x - mean| / target`.
    pub fn fit(x: ArrayView3<f64>, target: f64) -> Self {
        let d = x.dim().2;
        let flat = x.to_shape((x.len() / d.max(1), d)).expect("contiguous reshape");
        let offset: Vec<f64> = flat.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or(vec![0.0; d]);
        let scale = (0..d)
            .map(|j| {
                let m = flat.column(j).iter().fold(0.0f64, |a, v| a.max((v - offset[j]).abs()));
                if m > 0.0 { m / target } else { 1.0 }
            })
            .collect();
        ObsNormalizer { offset, scale }
    }

    pub fn apply(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let mut y = x.to_owned();
        for mut row in y.lanes_mut(Axis(2)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.offset[j]) / self.scale[j];
            }
        }
        y
    }

    pub fn invert(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let mut y = x.to_owned();
        for mut row in y.lanes_mut(Axis(2)) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.scale[j] + self.offset[j];
            }
        }
        y
    }
}
