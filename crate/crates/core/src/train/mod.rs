//! ELBO optimisation of [`ChildModel`] on ground-truth series.

mod adam;
mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use ndarray::{s, Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::eval::{compute_mcc, Correlation};
use crate::model::{to_tensor, ChildModel, LatentStack, ModelConfig, ObsNormalizer};
use crate::process::GroundTruthSeries;
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    #[default]
    Full,
    /// KL term reported but not optimised.
    NoKl,
    /// Encoder restricted to the current observation.
    NoContext,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// KL weight after warm-up.
    pub beta: f64,
    /// Fraction of all steps over which the KL weight ramps up linearly.
    pub kl_warmup_fraction: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Write `checkpoint_last` every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub variant: Variant,
    /// Trailing sequences held out for validation.
    pub validation_sequences: usize,
    /// Observations are scaled so that the largest centred value is this.
    pub obs_scale_target: f64,
    pub precision: Precision,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 100,
            beta: 0.002,
            kl_warmup_fraction: 0.1,
            grad_clip: 10.0,
            seed: 0,
            checkpoint_every: 0,
            variant: Variant::Full,
            validation_sequences: 1024,
            obs_scale_target: 0.9,
            precision: Precision::F32,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be > 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail("beta must be >= 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return fail("kl_warmup_fraction must lie in [0, 1]");
        }
        if !(self.grad_clip >= 0.0) {
            return fail("grad_clip must be >= 0");
        }
        if !(self.obs_scale_target > 0.0 && self.obs_scale_target < 1.0) {
            return fail("obs_scale_target must lie in (0, 1)");
        }
        Ok(())
    }

    /// Model config with the variant applied.
    pub fn adapt_model(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        if self.variant == Variant::NoContext {
            m.contextual = false;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub elbo: f64,
    pub val_mcc: Option<f64>,
    pub wall_time_s: f64,
}

/// Parameters as `(name, shape, values)`.
pub type ParamSnapshot = Vec<(String, Vec<usize>, Vec<f64>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_mcc: f64,
    pub params: ParamSnapshot,
}

pub struct TrainState {
    pub model: ChildModel,
    pub optimizer: Adam,
    pub config: TrainConfig,
    pub normalizer: ObsNormalizer,
    /// Optimiser steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub best: Option<BestSnapshot>,
}

impl TrainState {
    /// Copy of the model holding the best-validation parameters (or the
    /// current ones when no validation score exists).
    pub fn best_model(&self) -> Result<ChildModel> {
        let model = ChildModel::new(self.model.config().clone(), 0, self.model.dtype())?;
        match &self.best {
            Some(b) => model.import_parameters(&b.params)?,
            None => model.import_parameters(&self.model.export_parameters()?)?,
        }
        Ok(model)
    }
}

/// Batch means of the two ELBO terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
}

/// Per-sequence reconstruction error (sum of squares over steps and
/// features) and single-sample KL estimate, each `[B]`.
pub(crate) fn elbo_tensors(model: &ChildModel, x: &Tensor, noise: &[Tensor]) -> Result<(Tensor, Tensor)> {
    let post = model.encode_tensor(x, Some(noise))?;
    let xhat = model.decode_tensor(&post[0].sample)?;
    let recon = (xhat - x)?.sqr()?.sum(2)?.sum(1)?;
    let mut log_q: Option<Tensor> = None;
    for p in &post {
        let n = p.mean.dim(2)?;
        let sq = ((&p.sample - &p.mean)?.sqr()? * p.log_var.neg()?.exp()?)?;
        let lq = (sq + &p.log_var)?.sum(2)?.sum(1)?.affine(-0.5, -0.5 * LN_2PI * (n * x.dim(1)?) as f64)?;
        log_q = Some(match log_q {
            Some(acc) => (acc + lq)?,
            None => lq,
        });
    }
    let samples: Vec<Tensor> = post.iter().map(|p| p.sample.clone()).collect();
    let mut log_p: Option<Tensor> = None;
    for lp in model.prior_log_density_tensor(&samples)? {
        let lp = lp.sum(1)?;
        log_p = Some(match log_p {
            Some(acc) => (acc + lp)?,
            None => lp,
        });
    }
    let kl = (log_q.expect("at least one layer") - log_p.expect("at least one layer"))?;
    Ok((recon, kl))
}

/// ELBO terms of a batch of (model-space) observations with seeded
/// reparameterisation noise.
pub fn elbo_terms(model: &ChildModel, observations: ArrayView3<f64>, noise_seed: u64) -> Result<ElboTerms> {
    let (recon, kl) = per_sequence_terms(model, observations, noise_seed)?;
    let n = recon.len() as f64;
    Ok(ElboTerms { recon: recon.iter().sum::<f64>() / n, kl: kl.iter().sum::<f64>() / n })
}

/// Per-sequence reconstruction and KL terms.
pub fn per_sequence_terms(model: &ChildModel, observations: ArrayView3<f64>, noise_seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, t, d) = observations.dim();
    if d != model.config().obs_dim || b == 0 || t == 0 {
        return Err(Error::Shape(format!("batch {:?} does not fit the model", observations.dim())));
    }
    let x = to_tensor(observations, model.dtype())?;
    let noise = model.draw_noise(b, t, &mut rng::chacha(noise_seed))?;
    let (recon, kl) = elbo_tensors(model, &x, &noise)?;
    let v = |t: Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
    Ok((v(recon)?, v(kl)?))
}

/// One autodiff-versus-finite-difference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub parameter: String,
    pub index: usize,
    pub autodiff: f64,
    pub finite_difference: f64,
    /// `|fd - ad| / max(|fd|, |ad|, 1e-4)`.
    pub relative_error: f64,
}

/// Compares the autodiff gradient of `recon + kl` (batch means, fixed
/// reparameterisation noise) with central differences at `count` randomly
/// picked parameter entries. Parameters are restored afterwards. Meaningful
/// for `F64` models.
pub fn gradient_check(model: &ChildModel, observations: ArrayView3<f64>, noise_seed: u64, count: usize, pick_seed: u64) -> Result<Vec<GradientCheck>> {
    let (b, t, _) = observations.dim();
    let x = to_tensor(observations, model.dtype())?;
    let noise = model.draw_noise(b, t, &mut rng::chacha(noise_seed))?;
    let loss = || -> Result<Tensor> {
        let (r, k) = elbo_tensors(model, &x, &noise)?;
        Ok((r.mean_all()? + k.mean_all()?)?)
    };
    let grads = loss()?.backward()?;
    let vars = model.named_parameters();
    let mut pick = rng::chacha(pick_seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count.max(1) {
            return Err(Error::Numerical("no parameters receive gradients".into()));
        }
        let (name, var) = &vars[pick.random_range(0..vars.len())];
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let k = pick.random_range(0..g.len());
        let mut v = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let orig = v[k];
        let h = 1e-6 * orig.abs().max(1.0);
        let mut eval = |val: f64| -> Result<f64> {
            v[k] = val;
            let t = Tensor::from_slice(&v, var.dims(), &candle_core::Device::Cpu)?.to_dtype(model.dtype())?;
            var.set(&t)?;
            Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
        };
        let fd = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
        eval(orig)?;
        out.push(GradientCheck {
            parameter: name.clone(),
            index: k,
            autodiff: g[k],
            finite_difference: fd,
            relative_error: (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-4),
        });
    }
    Ok(out)
}

/// Pooled MCC between posterior means and true latents (all layers).
pub fn latent_mcc(stack: &LatentStack, truth: &[Array3<f64>]) -> Result<f64> {
    let est = flatten_layers(&stack.mean);
    let tru = flatten_layers(truth);
    Ok(compute_mcc(tru.view(), est.view(), Correlation::Pearson)?.mcc)
}

/// `[N, T, n_l]` layers to `[N * T, sum n_l]`.
pub(crate) fn flatten_layers(layers: &[Array3<f64>]) -> Array2<f64> {
    let all = LatentStack::concat(layers);
    let (n, t, d) = all.dim();
    all.to_shape((n * t, d)).expect("reshape keeps element count").into_owned()
}

pub struct Trainer {
    pub state: TrainState,
    train_obs: Array3<f64>,
    val_obs: Array3<f64>,
    val_truth: Vec<Array3<f64>>,
}

impl Trainer {
    /// Splits off the validation sequences, fits the observation scaling and
    /// initialises the model from the training seed.
    pub fn new(series: &GroundTruthSeries, model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mc = config.adapt_model(model_config);
        mc.validate()?;
        let (train_obs, val_obs, val_truth) = split(series, config.validation_sequences, &mc)?;
        let normalizer = ObsNormalizer::fit(train_obs.view(), config.obs_scale_target);
        let model = ChildModel::new(mc, rng::substream(config.seed, "init"), config.precision.dtype())?;
        let optimizer = Adam::new(model.named_parameters(), config.learning_rate)?;
        let state = TrainState {
            model,
            optimizer,
            config: config.clone(),
            normalizer,
            step: 0,
            epoch: 0,
            metrics: Vec::new(),
            best: None,
        };
        Ok(Self::with_state(state, train_obs, val_obs, val_truth))
    }

    /// Continues from a saved state on the same dataset.
    pub fn resume(series: &GroundTruthSeries, state: TrainState) -> Result<Self> {
        let (train_obs, val_obs, val_truth) = split(series, state.config.validation_sequences, state.model.config())?;
        Ok(Self::with_state(state, train_obs, val_obs, val_truth))
    }

    fn with_state(state: TrainState, train_obs: Array3<f64>, val_obs: Array3<f64>, val_truth: Vec<Array3<f64>>) -> Self {
        let train_obs = state.normalizer.apply(train_obs.view());
        let val_obs = state.normalizer.apply(val_obs.view());
        Trainer { state, train_obs, val_obs, val_truth }
    }

    pub fn validation_observations(&self) -> ArrayView3<'_, f64> {
        self.val_obs.view()
    }

    fn batches_per_epoch(&self) -> usize {
        self.train_obs.dim().0.div_ceil(self.state.config.batch_size)
    }

    fn kl_weight(&self) -> f64 {
        let c = &self.state.config;
        match c.variant {
            Variant::NoKl => 0.0,
            _ => {
                let warmup = c.kl_warmup_fraction * (c.epochs * self.batches_per_epoch()) as f64;
                if warmup <= 0.0 {
                    c.beta
                } else {
                    c.beta * ((self.state.step + 1) as f64 / warmup).min(1.0)
                }
            }
        }
    }

    /// Pooled validation MCC of the current parameters.
    pub fn validation_mcc(&self) -> Result<Option<f64>> {
        if self.val_obs.dim().0 == 0 {
            return Ok(None);
        }
        let stack = self.state.model.encode_context(self.val_obs.view())?;
        Ok(Some(latent_mcc(&stack, &self.val_truth)?))
    }

    /// One pass over the shuffled training sequences.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let cfg = self.state.config.clone();
        let epoch = self.state.epoch;
        let (n, t, d) = self.train_obs.dim();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::chacha_stream(rng::substream(cfg.seed, "shuffle"), epoch as u64));
        let noise_root = rng::substream(cfg.seed, "noise");
        let dtype = self.state.model.dtype();
        let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let b = idx.len();
            let mut buf: Vec<f64> = Vec::with_capacity(b * t * d);
            for &i in idx {
                buf.extend(self.train_obs.slice(s![i, .., ..]).iter());
            }
            let x = Tensor::from_vec(buf, (b, t, d), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
            let model = &self.state.model;
            let noise = model.draw_noise(b, t, &mut rng::chacha_stream(noise_root, self.state.step))?;
            let (recon, kl) = elbo_tensors(model, &x, &noise)?;
            let recon = recon.mean_all()?;
            let kl = kl.mean_all()?;
            let weight = self.kl_weight();
            let loss = if weight > 0.0 { (&recon + kl.affine(weight, 0.0)?)? } else { recon.clone() };
            let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
            let (r, k, l) = (scalar(&recon)?, scalar(&kl)?, scalar(&loss)?);
            if !l.is_finite() || l.abs() > cfg.divergence_threshold || !k.is_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged at epoch {epoch}, step {}: recon {r}, kl {k}, loss {l}",
                    self.state.step
                )));
            }
            let grads = loss.backward()?;
            let vars = model.named_parameters();
            let norm = Adam::grad_norm(vars, &grads)?;
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at step {}", self.state.step)));
            }
            let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            self.state.optimizer.step(vars, &grads, scale)?;
            self.state.step += 1;
            recon_sum += r * b as f64;
            kl_sum += k * b as f64;
        }
        let val_mcc = self.validation_mcc()?;
        let (recon, kl) = (recon_sum / n as f64, kl_sum / n as f64);
        let metrics = EpochMetrics {
            epoch,
            recon,
            kl,
            elbo: -(recon + kl),
            val_mcc,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.state.epoch += 1;
        if let Some(v) = val_mcc {
            if self.state.best.as_ref().is_none_or(|b| v > b.val_mcc) {
                self.state.best = Some(BestSnapshot { epoch, val_mcc: v, params: self.state.model.export_parameters()? });
            }
        }
        self.state.metrics.push(metrics.clone());
        Ok(metrics)
    }

    /// Trains until the configured epoch count. With an output directory,
    /// appends each epoch to `metrics.jsonl`, writes `checkpoint_last` at the
    /// configured cadence and at the end, and `checkpoint_best` whenever the
    /// validation score improves. On divergence the last good parameters are
    /// restored and written before the error is returned.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.state.epoch < self.state.config.epochs {
            let good = self.state.model.export_parameters()?;
            let good_opt = (self.state.optimizer.first.clone(), self.state.optimizer.second.clone(), self.state.optimizer.steps);
            let good_step = self.state.step;
            let best_before = self.state.best.as_ref().map(|b| b.epoch);
            let m = match self.run_epoch() {
                Ok(m) => m,
                Err(e @ Error::Numerical(_)) => {
                    self.state.model.import_parameters(&good)?;
                    (self.state.optimizer.first, self.state.optimizer.second, self.state.optimizer.steps) = good_opt;
                    self.state.step = good_step;
                    if let Some(dir) = out_dir {
                        save_checkpoint(&self.state, &dir.join("checkpoint_last_good.safetensors"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(dir) = out_dir {
                append_metrics(&dir.join("metrics.jsonl"), &m)?;
                if self.state.best.as_ref().map(|b| b.epoch) != best_before {
                    save_checkpoint(&self.state, &dir.join("checkpoint_best.safetensors"))?;
                }
                let every = self.state.config.checkpoint_every;
                let done = self.state.epoch == self.state.config.epochs;
                if done || (every > 0 && self.state.epoch % every == 0) {
                    save_checkpoint(&self.state, &dir.join("checkpoint_last.safetensors"))?;
                }
            }
        }
        Ok(())
    }
}

fn append_metrics(path: &PathBuf, m: &EpochMetrics) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(path, e))
}

#[allow(clippy::type_complexity)]
fn split(series: &GroundTruthSeries, val: usize, mc: &ModelConfig) -> Result<(Array3<f64>, Array3<f64>, Vec<Array3<f64>>)> {
    let n = series.num_sequences();
    if n <= val {
        return Err(Error::Shape(format!("{n} sequences leave nothing to train on after {val} validation sequences")));
    }
    if series.obs_dim() != mc.obs_dim {
        return Err(Error::Shape(format!("dataset has {} features, model expects {}", series.obs_dim(), mc.obs_dim)));
    }
    if series.layer_dims() != mc.dims_bottom_up() {
        return Err(Error::Shape("dataset latent layers do not match the model".into()));
    }
    let cut = n - val;
    let train = series.observations.slice(s![..cut, .., ..]).to_owned();
    let val_obs = series.observations.slice(s![cut.., .., ..]).to_owned();
    let truth = (0..series.num_layers())
        .map(|l| series.layer(l).slice(s![cut.., .., ..]).to_owned())
        .collect();
    Ok((train, val_obs, truth))
}

/// Convenience wrapper: builds a trainer and runs it to completion.
pub fn train(series: &GroundTruthSeries, model_config: &ModelConfig, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainState> {
    let mut trainer = Trainer::new(series, model_config, config)?;
    trainer.run(out_dir)?;
    Ok(trainer.state)
}

#[cfg(test)]
mod tests;
