//! Parameter storage and the few layers the model needs.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng;

/// Creates named parameters with deterministic initial values.
pub(crate) struct ParamBuilder {
    rng: ChaCha8Rng,
    dtype: DType,
    pub(crate) vars: Vec<(String, Var)>,
}

impl ParamBuilder {
    pub(crate) fn new(seed: u64, dtype: DType) -> Self {
        ParamBuilder {
            rng: rng::chacha(rng::substream(seed, "model-init")),
            dtype,
            vars: Vec::new(),
        }
    }

    fn push(&mut self, name: String, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        self.vars.push((name, v.clone()));
        Ok(v)
    }

    pub(crate) fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    self.rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.push(name, shape, values)
    }

}

pub(crate) fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()?.affine(1.0 - slope, 0.0)? + x.affine(slope, 0.0)?)?)
}

/// Derivative of LeakyReLU at `x` (1 or `slope`).
pub(crate) fn leaky_relu_slope(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.ge(0.0)?.to_dtype(x.dtype())?.affine(1.0 - slope, slope)?)
}

/// Dense layer acting on the last dimension of a tensor of any rank.
#[derive(Clone)]
pub(crate) struct Linear {
    pub(crate) weight: Var,
    pub(crate) bias: Var,
}

impl Linear {
    pub(crate) fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Linear {
            weight: pb.uniform(format!("{name}.weight"), &[input, output], bound)?,
            bias: pb.uniform(format!("{name}.bias"), &[output], bound)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().expect("rank >= 1");
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, input))?
            .matmul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

/// LeakyReLU MLP; the last layer is linear.
#[derive(Clone)]
pub(crate) struct Mlp {
    layers: Vec<Linear>,
    slope: f64,
}

impl Mlp {
    pub(crate) fn new(
        pb: &mut ParamBuilder,
        name: &str,
        widths: &[usize],
        slope: f64,
    ) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(pb, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, slope })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = leaky_relu(&h, self.slope)?;
            }
        }
        Ok(h)
    }
}
