use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::ProcessSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    /// Latent dims, top layer first (same convention as `ProcessSpec`).
    pub dims_per_layer: Vec<usize>,
    pub obs_dim: usize,
    /// Encoder sees `x_{t-R..t+R}`.
    pub receptive_half_width: usize,
    /// When false the encoder only sees `x_t` (kernel-1 convolutions).
    pub contextual: bool,
    pub lag: usize,
    pub encoder_channels: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_depth: usize,
    /// Width and depth of the conditioner of every prior flow.
    pub prior_hidden: usize,
    pub prior_depth: usize,
    /// Width and depth of the monotone part of every prior flow.
    pub flow_hidden: usize,
    pub flow_depth: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            dims_per_layer: vec![1, 4],
            obs_dim: 4,
            receptive_half_width: 2,
            contextual: true,
            lag: 1,
            encoder_channels: 64,
            encoder_hidden: 64,
            decoder_hidden: 64,
            decoder_depth: 2,
            prior_hidden: 128,
            prior_depth: 3,
            flow_hidden: 32,
            flow_depth: 2,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    /// Defaults sized for a process: matching dims, `R = L`, `tau` from the spec.
    pub fn for_process(spec: &ProcessSpec) -> Self {
        ModelConfig {
            num_layers: spec.num_layers,
            dims_per_layer: spec.dims_per_layer.clone(),
            obs_dim: spec.obs_dim(),
            receptive_half_width: spec.num_layers,
            lag: spec.lag_order,
            ..Default::default()
        }
    }

    pub fn dims_bottom_up(&self) -> Vec<usize> {
        self.dims_per_layer.iter().rev().copied().collect()
    }

    /// Half-width actually used by the encoder (0 without context).
    pub fn effective_half_width(&self) -> usize {
        if self.contextual {
            self.receptive_half_width
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("model config: {m}")));
        if self.num_layers == 0 || self.dims_per_layer.len() != self.num_layers {
            return fail("dims_per_layer must have num_layers >= 1 entries");
        }
        if self.dims_per_layer.iter().any(|&d| d == 0) || self.obs_dim == 0 {
            return fail("dims must be >= 1");
        }
        if self.receptive_half_width == 0 {
            return fail("receptive_half_width must be >= 1");
        }
        if self.lag == 0 {
            return fail("lag must be >= 1");
        }
        if self.prior_depth == 0 || self.prior_hidden == 0 {
            return fail("prior networks need depth >= 1 and width >= 1");
        }
        if self.flow_hidden == 0 || self.encoder_channels == 0 || self.encoder_hidden == 0 || self.decoder_hidden == 0 {
            return fail("hidden widths must be >= 1");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail("leaky_slope must lie in (0, 1)");
        }
        Ok(())
    }
}
