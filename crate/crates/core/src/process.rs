//! Ground-truth hierarchical latent processes.
//!
//! Layer `L` (the top) evolves from its own delayed values only; every lower
//! layer `l` is driven by its delayed values and by layer `l + 1` at the same
//! timestep. Only layer 1 reaches the observations, through a nonlinear
//! mixing map with additive noise.
//!
//! Internally layers are indexed bottom-up (`0` is layer 1). `ProcessSpec`
//! lists dims top to bottom, matching how the presets are written.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub const LEAKY_SLOPE: f64 = 0.2;
const TARGET_SPECTRAL_RADIUS: f64 = 0.9;
const WEIGHT_RANGE: f64 = 0.5;

pub const PRESETS: [&str; 7] = ["A", "B", "C", "D", "E", "F", "G"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProcessVariant {
    LeakyLinear,
    DeepNonlinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub num_layers: usize,
    /// Latent dims, top layer first: `[n_L, ..., n_1]`.
    pub dims_per_layer: Vec<usize>,
    pub lag_order: usize,
    pub variant: ProcessVariant,
    /// Transition noise scale per layer, top layer first.
    pub noise_scales: Vec<f64>,
    pub obs_noise_scale: f64,
    pub mixing_noise_dim: usize,
    /// Observation dimension; defaults to the bottom-layer dimension.
    #[serde(default)]
    pub obs_dim: Option<usize>,
    pub seed: u64,
}

impl ProcessSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return cfg("num_layers must be >= 1".into());
        }
        if self.dims_per_layer.len() != self.num_layers {
            return cfg(format!(
                "dims_per_layer has {} entries for {} layers",
                self.dims_per_layer.len(),
                self.num_layers
            ));
        }
        if self.dims_per_layer.iter().any(|&d| d == 0) {
            return cfg("all layer dims must be >= 1".into());
        }
        if self.lag_order == 0 {
            return cfg("lag_order must be >= 1".into());
        }
        if self.noise_scales.len() != self.num_layers {
            return cfg(format!(
                "noise_scales has {} entries for {} layers",
                self.noise_scales.len(),
                self.num_layers
            ));
        }
        if self
            .noise_scales
            .iter()
            .chain(std::iter::once(&self.obs_noise_scale))
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return cfg("noise scales must be finite and > 0".into());
        }
        let n1 = self.bottom_dim();
        match (self.variant, self.obs_dim) {
            (ProcessVariant::LeakyLinear, Some(d)) if d != n1 => cfg(format!(
                "LEAKY_LINEAR mixing is square: obs_dim {d} != bottom layer dim {n1}"
            )),
            (ProcessVariant::DeepNonlinear, Some(d)) if d < n1 => cfg(format!(
                "obs_dim {d} < bottom layer dim {n1} makes the mixing non-injective"
            )),
            _ => Ok(()),
        }
    }

    /// Layer dims bottom-up: `[n_1, ..., n_L]`.
    pub fn dims_bottom_up(&self) -> Vec<usize> {
        self.dims_per_layer.iter().rev().copied().collect()
    }

    pub fn bottom_dim(&self) -> usize {
        *self.dims_per_layer.last().unwrap_or(&0)
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim.unwrap_or_else(|| self.bottom_dim())
    }

    pub fn max_dim(&self) -> usize {
        self.dims_per_layer.iter().copied().max().unwrap_or(0)
    }

    /// Noise scale of layer `layer` (bottom-up index).
    pub fn noise_scale(&self, layer: usize) -> f64 {
        self.noise_scales[self.num_layers - 1 - layer]
    }

    /// Default sequence length `2 (2L + 1)`.
    pub fn default_seq_length(&self) -> usize {
        2 * (2 * self.num_layers + 1)
    }
}

/// The seven simulation presets.
pub fn preset(name: &str) -> Result<ProcessSpec> {
    let (dims, lag, variant): (Vec<usize>, usize, ProcessVariant) =
        match name.to_ascii_uppercase().as_str() {
            "A" => (vec![1, 4], 1, ProcessVariant::LeakyLinear),
            "B" => (vec![4], 1, ProcessVariant::LeakyLinear),
            "C" => (vec![2, 8], 1, ProcessVariant::LeakyLinear),
            "D" => (vec![1, 4], 2, ProcessVariant::LeakyLinear),
            "E" => (vec![1, 4], 1, ProcessVariant::DeepNonlinear),
            "F" => (vec![1, 2, 4], 1, ProcessVariant::LeakyLinear),
            "G" => (vec![8, 8, 8], 1, ProcessVariant::LeakyLinear),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; available presets: {}",
                    PRESETS.join(", ")
                )))
            }
        };
    let layers = dims.len();
    Ok(ProcessSpec {
        num_layers: layers,
        dims_per_layer: dims,
        lag_order: lag,
        variant,
        noise_scales: vec![0.1; layers],
        obs_noise_scale: 0.1,
        mixing_noise_dim: 1,
        obs_dim: None,
        seed: 0,
    })
}

pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky(v: DVector<f64>) -> DVector<f64> {
    v.map(leaky_relu)
}

/// A bias-free linear layer followed by LeakyReLU, applied twice.
#[derive(Clone, Debug)]
pub struct TwoLayerMap {
    pub inner: DMatrix<f64>,
    pub outer: DMatrix<f64>,
}

impl TwoLayerMap {
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        leaky(&self.outer * leaky(&self.inner * x))
    }
}

#[derive(Clone, Debug)]
pub enum Transition {
    /// `z_i = LeakyReLU(sum_k W_k[i,:] z_{t-k}) + V[i,:] z^{l+1}_t + eps_i`.
    LeakyLinear {
        lags: Vec<DMatrix<f64>>,
        hierarchical: Option<DMatrix<f64>>,
    },
    /// `z = 0.5 M_d(z_{t-1:t-tau}) + 0.5 M_h(z^{l+1}_t) + eps` (top layer: `M_d + eps`).
    Deep {
        temporal: TwoLayerMap,
        hierarchical: Option<TwoLayerMap>,
    },
}

#[derive(Clone, Debug)]
pub struct Mixing {
    pub first: DMatrix<f64>,
    pub second: DMatrix<f64>,
    /// Maps the mixing noise vector into observation space.
    pub noise_injection: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct HierarchicalProcess {
    spec: ProcessSpec,
    /// Bottom-up.
    transitions: Vec<Transition>,
    mixing: Mixing,
}

/// Latent values at one timestep, bottom-up, one vector per layer.
pub type LatentState = Vec<DVector<f64>>;

fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        rng.random_range(-WEIGHT_RANGE..WEIGHT_RANGE)
    })
}

/// Matrix with orthonormal columns (square: orthogonal), Haar distributed.
fn orthonormal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Rescales lag matrices so the companion matrix of the lag polynomial has
/// spectral radius `TARGET_SPECTRAL_RADIUS`. Scaling `W_k` by `c^k` scales
/// every companion eigenvalue by `c`.
fn rescale_lags(lags: &mut [DMatrix<f64>]) {
    let n = lags[0].nrows();
    let tau = lags.len();
    let mut companion = DMatrix::zeros(n * tau, n * tau);
    for (k, w) in lags.iter().enumerate() {
        companion.view_mut((0, k * n), (n, n)).copy_from(w);
    }
    for k in 1..tau {
        companion
            .view_mut((k * n, (k - 1) * n), (n, n))
            .fill_with_identity();
    }
    let rho = spectral_radius(&companion);
    if rho > 0.0 {
        let c = TARGET_SPECTRAL_RADIUS / rho;
        for (k, w) in lags.iter_mut().enumerate() {
            *w *= c.powi(k as i32 + 1);
        }
    }
}

fn rescale_norm(m: &mut DMatrix<f64>, target: f64) {
    let s = m.singular_values().max();
    if s > 0.0 {
        *m *= target / s;
    }
}

/// Builds a process whose parameters are a pure function of `spec`.
pub fn build_process(spec: &ProcessSpec) -> Result<HierarchicalProcess> {
    spec.validate()?;
    let mut rng = rng::chacha(rng::substream(spec.seed, "process-parameters"));
    let dims = spec.dims_bottom_up();
    let layers = spec.num_layers;
    let tau = spec.lag_order;
    let mut transitions = Vec::with_capacity(layers);
    for l in 0..layers {
        let n = dims[l];
        let parent_dim = (l + 1 < layers).then(|| dims[l + 1]);
        let t = match spec.variant {
            ProcessVariant::LeakyLinear => {
                let mut lags: Vec<_> = (0..tau).map(|_| uniform_matrix(&mut rng, n, n)).collect();
                rescale_lags(&mut lags);
                let hierarchical = parent_dim.map(|np| {
                    // strictly lower-triangular: z^l_i only sees z^{l+1}_j for j < i
                    DMatrix::from_fn(n, np, |i, j| {
                        let w = rng.random_range(-WEIGHT_RANGE..WEIGHT_RANGE);
                        if j < i {
                            w
                        } else {
                            0.0
                        }
                    })
                });
                Transition::LeakyLinear { lags, hierarchical }
            }
            ProcessVariant::DeepNonlinear => {
                // Lipschitz bound 0.9 on the temporal map keeps trajectories bounded.
                let gain = TARGET_SPECTRAL_RADIUS.sqrt();
                let mut inner = uniform_matrix(&mut rng, n, n * tau);
                let mut outer = uniform_matrix(&mut rng, n, n);
                rescale_norm(&mut inner, gain);
                rescale_norm(&mut outer, gain);
                let temporal = TwoLayerMap { inner, outer };
                let hierarchical = parent_dim.map(|np| TwoLayerMap {
                    inner: uniform_matrix(&mut rng, n, np),
                    outer: uniform_matrix(&mut rng, n, n),
                });
                Transition::Deep {
                    temporal,
                    hierarchical,
                }
            }
        };
        transitions.push(t);
    }
    let n1 = dims[0];
    let n_obs = spec.obs_dim();
    let first = orthonormal_matrix(&mut rng, n1, n1);
    let second = orthonormal_matrix(&mut rng, n_obs, n1);
    let d = spec.mixing_noise_dim;
    let noise_injection = if d == 1 {
        DMatrix::from_element(n_obs, 1, 1.0)
    } else {
        uniform_matrix(&mut rng, n_obs, d)
    };
    Ok(HierarchicalProcess {
        spec: spec.clone(),
        transitions,
        mixing: Mixing {
            first,
            second,
            noise_injection,
        },
    })
}

/// Recorded noise draws of a sampled batch, enough to replay it exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTrace {
    /// Initial latent states `[N, tau, L, n_max]` (standard normal).
    pub initial: Array4<f64>,
    /// Scaled transition noise `[N, T, L, n_max]`; zero for `t < tau`.
    pub latent: Array4<f64>,
    /// Scaled mixing noise `[N, T, mixing_noise_dim]`.
    pub observation: Array3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSeries {
    pub spec: ProcessSpec,
    /// Sampling seed.
    pub seed: u64,
    /// `[N, T, n_obs]`.
    pub observations: Array3<f64>,
    /// `[N, T, L, n_max]`, layers bottom-up, zero-padded where `mask` is false.
    pub latents: Array4<f64>,
    /// `[L, n_max]`.
    pub mask: Array2<bool>,
    pub fingerprint: String,
}

impl GroundTruthSeries {
    pub fn num_sequences(&self) -> usize {
        self.observations.shape()[0]
    }

    pub fn seq_length(&self) -> usize {
        self.observations.shape()[1]
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.shape()[2]
    }

    pub fn num_layers(&self) -> usize {
        self.latents.shape()[2]
    }

    /// Valid dims of each layer, bottom-up, read from the mask.
    pub fn layer_dims(&self) -> Vec<usize> {
        self.mask
            .outer_iter()
            .map(|row| row.iter().filter(|&&m| m).count())
            .collect()
    }

    /// Latents of one layer (bottom-up index), `[N, T, n_l]`.
    pub fn layer(&self, layer: usize) -> Array3<f64> {
        let n = self.layer_dims()[layer];
        let (big_n, t) = (self.num_sequences(), self.seq_length());
        Array3::from_shape_fn((big_n, t, n), |(s, k, i)| self.latents[[s, k, layer, i]])
    }

    /// Sequences `range`, keeping metadata.
    pub fn select(&self, range: std::ops::Range<usize>) -> GroundTruthSeries {
        use ndarray::s;
        GroundTruthSeries {
            spec: self.spec.clone(),
            seed: self.seed,
            observations: self.observations.slice(s![range.clone(), .., ..]).to_owned(),
            latents: self.latents.slice(s![range, .., .., ..]).to_owned(),
            mask: self.mask.clone(),
            fingerprint: self.fingerprint.clone(),
        }
    }
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    spec: &'a ProcessSpec,
    seed: u64,
}

/// SHA-256 (hex) of the canonical JSON of `{spec, seed}`.
pub fn fingerprint(spec: &ProcessSpec, seed: u64) -> String {
    let canonical = serde_json::to_string(&FingerprintInput { spec, seed })
        .expect("process spec serialises");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl HierarchicalProcess {
    pub fn spec(&self) -> &ProcessSpec {
        &self.spec
    }

    pub fn transition(&self, layer: usize) -> &Transition {
        &self.transitions[layer]
    }

    pub fn mixing(&self) -> &Mixing {
        &self.mixing
    }

    /// Weights from layer `layer + 2` into layer `layer + 1` (bottom-up
    /// index `layer`), if this layer has a hierarchical parent.
    pub fn hierarchical_weights(&self, layer: usize) -> Option<&DMatrix<f64>> {
        match &self.transitions[layer] {
            Transition::LeakyLinear { hierarchical, .. } => hierarchical.as_ref(),
            Transition::Deep { .. } => None,
        }
    }

    /// One structural equation for layer `layer`.
    ///
    /// `history[k]` is the full latent state at `t - 1 - k`; only this
    /// layer's entries are read. `parent` is layer `layer + 1` at `t`.
    pub fn layer_step(
        &self,
        layer: usize,
        history: &[LatentState],
        parent: Option<&DVector<f64>>,
        noise: &DVector<f64>,
    ) -> DVector<f64> {
        match &self.transitions[layer] {
            Transition::LeakyLinear { lags, hierarchical } => {
                let n = lags[0].nrows();
                let mut pre = DVector::zeros(n);
                for (w, state) in lags.iter().zip(history) {
                    pre += w * &state[layer];
                }
                let mut z = leaky(pre);
                if let (Some(v), Some(p)) = (hierarchical, parent) {
                    z += v * p;
                }
                z + noise
            }
            Transition::Deep {
                temporal,
                hierarchical,
            } => {
                let delayed = DVector::from_iterator(
                    temporal.inner.ncols(),
                    history.iter().flat_map(|s| s[layer].iter().copied()),
                );
                let drift = temporal.apply(&delayed);
                match (hierarchical, parent) {
                    (Some(h), Some(p)) => drift * 0.5 + h.apply(p) * 0.5 + noise,
                    _ => drift + noise,
                }
            }
        }
    }

    /// Observation map `x = g(z^1, eps^0)`.
    pub fn emit(&self, bottom: &DVector<f64>, noise: &DVector<f64>) -> DVector<f64> {
        let m = &self.mixing;
        let injected = &m.noise_injection * noise;
        match self.spec.variant {
            ProcessVariant::LeakyLinear => {
                leaky(&m.second * leaky(&m.first * bottom) + injected)
            }
            ProcessVariant::DeepNonlinear => {
                leaky(&m.second * leaky(&m.first * bottom)) + injected
            }
        }
    }

    /// Samples `num_sequences` sequences of length `seq_length`.
    pub fn sample_series(
        &self,
        num_sequences: usize,
        seq_length: usize,
        seed: u64,
    ) -> Result<GroundTruthSeries> {
        self.sample_traced(num_sequences, seq_length, seed)
            .map(|(series, _)| series)
    }

    /// Like [`sample_series`](Self::sample_series), also returning every noise draw.
    pub fn sample_traced(
        &self,
        num_sequences: usize,
        seq_length: usize,
        seed: u64,
    ) -> Result<(GroundTruthSeries, NoiseTrace)> {
        let spec = &self.spec;
        let tau = spec.lag_order;
        if seq_length <= tau {
            return Err(Error::Config(format!(
                "seq_length {seq_length} must exceed lag_order {tau}"
            )));
        }
        let layers = spec.num_layers;
        let n_max = spec.max_dim();
        let dims = spec.dims_bottom_up();
        let d0 = spec.mixing_noise_dim;
        let mut trace = NoiseTrace {
            initial: Array4::zeros((num_sequences, tau, layers, n_max)),
            latent: Array4::zeros((num_sequences, seq_length, layers, n_max)),
            observation: Array3::zeros((num_sequences, seq_length, d0)),
        };
        for s in 0..num_sequences {
            // one independent stream per sequence
            let mut rng = rng::chacha_stream(seed, s as u64);
            for t in 0..seq_length {
                for l in (0..layers).rev() {
                    for i in 0..dims[l] {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        if t < tau {
                            trace.initial[[s, t, l, i]] = e;
                        } else {
                            trace.latent[[s, t, l, i]] = spec.noise_scale(l) * e;
                        }
                    }
                }
                for j in 0..d0 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    trace.observation[[s, t, j]] = spec.obs_noise_scale * e;
                }
            }
        }
        let series = self.replay(&trace, seed)?;
        Ok((series, trace))
    }

    /// Regenerates the series deterministically from recorded noise.
    pub fn replay(&self, trace: &NoiseTrace, seed: u64) -> Result<GroundTruthSeries> {
        let spec = &self.spec;
        let tau = spec.lag_order;
        let layers = spec.num_layers;
        let dims = spec.dims_bottom_up();
        let n_max = spec.max_dim();
        let n_obs = spec.obs_dim();
        let d0 = spec.mixing_noise_dim;
        let (num_sequences, seq_length) = (trace.latent.shape()[0], trace.latent.shape()[1]);
        if trace.initial.shape() != [num_sequences, tau, layers, n_max]
            || trace.latent.shape()[2..] != [layers, n_max]
            || trace.observation.shape() != [num_sequences, seq_length, d0]
        {
            return Err(Error::Shape("noise trace does not match the process".into()));
        }
        let mut observations = Array3::zeros((num_sequences, seq_length, n_obs));
        let mut latents = Array4::zeros((num_sequences, seq_length, layers, n_max));
        for s in 0..num_sequences {
            let mut states: Vec<LatentState> = Vec::with_capacity(seq_length);
            for t in 0..seq_length {
                let mut state: LatentState = dims.iter().map(|&n| DVector::zeros(n)).collect();
                if t < tau {
                    for (l, v) in state.iter_mut().enumerate() {
                        for i in 0..dims[l] {
                            v[i] = trace.initial[[s, t, l, i]];
                        }
                    }
                } else {
                    // most recent first
                    let history: Vec<LatentState> =
                        (1..=tau).map(|k| states[t - k].clone()).collect();
                    for l in (0..layers).rev() {
                        let noise = DVector::from_fn(dims[l], |i, _| trace.latent[[s, t, l, i]]);
                        let parent = (l + 1 < layers).then(|| state[l + 1].clone());
                        state[l] = self.layer_step(l, &history, parent.as_ref(), &noise);
                    }
                }
                let e0 = DVector::from_fn(d0, |j, _| trace.observation[[s, t, j]]);
                let x = self.emit(&state[0], &e0);
                for (j, v) in x.iter().enumerate() {
                    observations[[s, t, j]] = *v;
                }
                for (l, v) in state.iter().enumerate() {
                    for (i, z) in v.iter().enumerate() {
                        latents[[s, t, l, i]] = *z;
                    }
                }
                states.push(state);
            }
        }
        if observations.iter().chain(latents.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite value in sampled series".into()));
        }
        let mask = Array2::from_shape_fn((layers, n_max), |(l, i)| i < dims[l]);
        Ok(GroundTruthSeries {
            spec: spec.clone(),
            seed,
            observations,
            latents,
            mask,
            fingerprint: fingerprint(spec, seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_a(seed: u64) -> ProcessSpec {
        ProcessSpec {
            seed,
            ..preset("A").unwrap()
        }
    }

    #[test]
    fn dataset_a_shape() {
        let p = build_process(&spec_a(7)).unwrap();
        assert_eq!(p.spec().dims_bottom_up(), vec![4, 1]);
        let v = p.hierarchical_weights(0).unwrap();
        assert_eq!(v.shape(), (4, 1));
        assert!(p.hierarchical_weights(1).is_none());
        // first bottom component has no hierarchical parent
        assert_eq!(v[(0, 0)], 0.0);
        assert!(v.column(0).iter().skip(1).all(|w| *w != 0.0));
    }

    #[test]
    fn single_layer_has_no_hierarchical_weights() {
        let p = build_process(&preset("B").unwrap()).unwrap();
        assert!(p.hierarchical_weights(0).is_none());
    }

    #[test]
    fn lag_matrices_have_target_radius() {
        for name in ["A", "D"] {
            let p = build_process(&preset(name).unwrap()).unwrap();
            let Transition::LeakyLinear { lags, .. } = p.transition(0) else {
                panic!()
            };
            let n = lags[0].nrows();
            let tau = lags.len();
            let mut c = DMatrix::zeros(n * tau, n * tau);
            for (k, w) in lags.iter().enumerate() {
                c.view_mut((0, k * n), (n, n)).copy_from(w);
            }
            for k in 1..tau {
                c.view_mut((k * n, (k - 1) * n), (n, n)).fill_with_identity();
            }
            assert!((spectral_radius(&c) - 0.9).abs() < 1e-9);
        }
    }

    #[test]
    fn mixing_is_orthogonal() {
        let p = build_process(&spec_a(3)).unwrap();
        let m = &p.mixing().first;
        let err = (m.transpose() * m - DMatrix::identity(4, 4)).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn rejects_non_square_leaky_mixing() {
        let mut spec = spec_a(1);
        spec.obs_dim = Some(3);
        assert!(matches!(build_process(&spec), Err(Error::Config(_))));
        spec.obs_dim = Some(4);
        assert!(build_process(&spec).is_ok());
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = spec_a(1);
        spec.lag_order = 0;
        assert!(spec.validate().is_err());
        let mut spec = spec_a(1);
        spec.noise_scales = vec![0.1, 0.0];
        assert!(spec.validate().is_err());
        let mut spec = spec_a(1);
        spec.dims_per_layer = vec![0, 4];
        assert!(spec.validate().is_err());
        assert!(matches!(preset("Z"), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = build_process(&spec_a(7)).unwrap();
        let a = p.sample_series(5, 6, 42).unwrap();
        let b = p.sample_series(5, 6, 42).unwrap();
        assert_eq!(a, b);
        let c = p.sample_series(5, 6, 43).unwrap();
        assert_ne!(a.observations, c.observations);
        assert_eq!(a.fingerprint, fingerprint(p.spec(), 42));
    }

    #[test]
    fn short_sequences_are_rejected() {
        let p = build_process(&preset("D").unwrap()).unwrap();
        assert!(p.sample_series(1, 2, 0).is_err());
    }

    #[test]
    fn zero_noise_and_zero_start_stay_at_zero() {
        let p = build_process(&spec_a(7)).unwrap();
        let (_, mut trace) = p.sample_traced(2, 5, 0).unwrap();
        trace.initial.fill(0.0);
        trace.latent.fill(0.0);
        trace.observation.fill(0.0);
        let s = p.replay(&trace, 0).unwrap();
        assert!(s.latents.iter().all(|v| *v == 0.0));
        assert!(s.observations.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn replay_matches_structural_equations() {
        // 1 sequence, T = 3, L = 2
        let p = build_process(&spec_a(7)).unwrap();
        let (s, trace) = p.sample_traced(1, 3, 5).unwrap();
        let Transition::LeakyLinear { lags, hierarchical } = p.transition(0) else {
            panic!()
        };
        let w1 = &lags[0];
        let v = hierarchical.as_ref().unwrap();
        let Transition::LeakyLinear { lags: top, .. } = p.transition(1) else {
            panic!()
        };
        for t in 1..3 {
            let z2 = leaky_relu(top[0][(0, 0)] * s.latents[[0, t - 1, 1, 0]])
                + trace.latent[[0, t, 1, 0]];
            assert!((z2 - s.latents[[0, t, 1, 0]]).abs() < 1e-12);
            for i in 0..4 {
                let pre: f64 = (0..4).map(|j| w1[(i, j)] * s.latents[[0, t - 1, 0, j]]).sum();
                let expect = leaky_relu(pre) + v[(i, 0)] * z2 + trace.latent[[0, t, 0, i]];
                assert!((expect - s.latents[[0, t, 0, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deep_variant_samples_finite_values() {
        let p = build_process(&preset("E").unwrap()).unwrap();
        let s = p.sample_series(20, 10, 1).unwrap();
        assert!(s.observations.iter().all(|v| v.is_finite()));
        assert!(matches!(p.transition(0), Transition::Deep { .. }));
    }

    #[test]
    fn mask_marks_ragged_layers() {
        let p = build_process(&preset("F").unwrap()).unwrap();
        let s = p.sample_series(2, 8, 0).unwrap();
        assert_eq!(s.layer_dims(), vec![4, 2, 1]);
        assert_eq!(s.latents.shape(), &[2, 8, 3, 4]);
        assert!(s.latents.slice(ndarray::s![.., .., 2, 1..]).iter().all(|v| *v == 0.0));
    }
}
