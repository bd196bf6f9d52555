use candle_core::Tensor;

use super::nn::{leaky_relu, Linear, Mlp, ParamBuilder};
use super::ModelConfig;
use crate::error::Result;

/// Posterior network. The bottom layer reads a window of observations
/// through stacked temporal convolutions; every higher layer reads only the
/// sample of the layer below at the same step.
#[derive(Clone)]
pub(crate) struct Encoder {
    convs: Vec<Linear>,
    kernel: usize,
    bottom_head: Mlp,
    upper_heads: Vec<Mlp>,
    dims: Vec<usize>,
    slope: f64,
}

pub(crate) struct Posterior {
    pub mean: Tensor,
    pub log_var: Tensor,
    pub sample: Tensor,
}

impl Encoder {
    pub(crate) fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let kernel = if cfg.contextual { 3 } else { 1 };
        let dims = cfg.dims_bottom_up();
        let mut convs = Vec::with_capacity(cfg.receptive_half_width);
        let mut channels = cfg.obs_dim;
        for r in 0..cfg.receptive_half_width {
            convs.push(Linear::new(pb, &format!("encoder.conv{r}"), kernel * channels, cfg.encoder_channels)?);
            channels = cfg.encoder_channels;
        }
        let h = cfg.encoder_hidden;
        let bottom_head = Mlp::new(pb, "encoder.layer0", &[channels, h, 2 * dims[0]], cfg.leaky_slope)?;
        let upper_heads = (1..dims.len())
            .map(|l| {
                Mlp::new(pb, &format!("encoder.layer{l}"), &[dims[l - 1], h, h, 2 * dims[l]], cfg.leaky_slope)
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { convs, kernel, bottom_head, upper_heads, dims, slope: cfg.leaky_slope })
    }

    fn conv(&self, layer: &Linear, h: &Tensor) -> Result<Tensor> {
        let h = if self.kernel == 3 {
            let t = h.dim(1)?;
            let padded = h.pad_with_zeros(1, 1, 1)?;
            Tensor::cat(&[padded.narrow(1, 0, t)?, padded.narrow(1, 1, t)?, padded.narrow(1, 2, t)?], 2)?
        } else {
            h.clone()
        };
        leaky_relu(&layer.forward(&h)?, self.slope)
    }

    fn split(&self, out: &Tensor, n: usize) -> Result<(Tensor, Tensor)> {
        Ok((out.narrow(2, 0, n)?.contiguous()?, out.narrow(2, n, n)?.contiguous()?))
    }

    /// `x`: `[B, T, obs_dim]`. `noise[l]`: `[B, T, n_l]` standard normals;
    /// without noise the sample is the posterior mean.
    pub(crate) fn forward(&self, x: &Tensor, noise: Option<&[Tensor]>) -> Result<Vec<Posterior>> {
        let mut h = x.clone();
        for c in &self.convs {
            h = self.conv(c, &h)?;
        }
        let mut out = Vec::with_capacity(self.dims.len());
        let mut input = h;
        for (l, &n) in self.dims.iter().enumerate() {
            let head = if l == 0 { &self.bottom_head } else { &self.upper_heads[l - 1] };
            let (mean, log_var) = self.split(&head.forward(&input)?, n)?;
            let sample = match noise {
                Some(eps) => (&mean + (log_var.affine(0.5, 0.0)?.exp()? * &eps[l])?)?,
                None => mean.clone(),
            };
            input = sample.clone();
            out.push(Posterior { mean, log_var, sample });
        }
        Ok(out)
    }
}

/// Maps the bottom latent at each step to an observation in (-1, 1).
#[derive(Clone)]
pub(crate) struct Decoder {
    net: Mlp,
}

impl Decoder {
    pub(crate) fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let mut widths = vec![cfg.dims_bottom_up()[0]];
        widths.extend(std::iter::repeat_n(cfg.decoder_hidden, cfg.decoder_depth));
        widths.push(cfg.obs_dim);
        Ok(Decoder { net: Mlp::new(pb, "decoder", &widths, cfg.leaky_slope)? })
    }

    pub(crate) fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(z)?.tanh()?)
    }
}
