use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::mcc::{compute_mcc, Correlation};
use super::score::correlational_score;
use crate::error::{Error, Result};
use crate::model::{ChildModel, LatentStack, ObsNormalizer};
use crate::process::GroundTruthSeries;
use crate::train::flatten_layers;

/// Identifiability summary of one set of estimated latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correlation: Correlation,
    /// MCC over all components of all layers, assigned jointly.
    pub mcc_overall: f64,
    /// MCC within each layer, bottom layer first.
    pub mcc_per_layer: Vec<f64>,
    /// Pooled assignment: `permutation[j]` is the true component matched to
    /// estimated component `j`, both indexed bottom layer first.
    pub permutation: Vec<usize>,
    /// Pooled `|correlation|` matrix, rows true, columns estimated.
    pub corr_matrix: Array2<f64>,
    pub layer_permutations: Vec<Vec<usize>>,
    /// True when the pooled assignment matches some estimated component
    /// to a true component of another layer.
    pub cross_layer_leakage: bool,
    pub correlational_score: Option<f64>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-layer and pooled MCC of `estimates` (bottom layer first, each
/// `[N, T, n_l]`) against the true latents of `series`.
pub fn evaluate_latents(series: &GroundTruthSeries, estimates: &[Array3<f64>], method: Correlation) -> Result<EvalReport> {
    let dims = series.layer_dims();
    if estimates.len() != dims.len() {
        return Err(Error::Shape(format!(
            "series has {} latent layers, estimates have {}",
            dims.len(),
            estimates.len()
        )));
    }
    let (n, t) = (series.num_sequences(), series.seq_length());
    for (l, (e, &d)) in estimates.iter().zip(&dims).enumerate() {
        if e.dim() != (n, t, d) {
            return Err(Error::Shape(format!("layer {l}: expected estimates of shape {:?}, got {:?}", (n, t, d), e.dim())));
        }
    }
    let truth: Vec<Array3<f64>> = (0..dims.len()).map(|l| series.layer(l)).collect();
    let mut warnings = Vec::new();
    let mut mcc_per_layer = Vec::with_capacity(dims.len());
    let mut layer_permutations = Vec::with_capacity(dims.len());
    for (l, (tr, est)) in truth.iter().zip(estimates).enumerate() {
        let r = compute_mcc(
            flatten_layers(std::slice::from_ref(tr)).view(),
            flatten_layers(std::slice::from_ref(est)).view(),
            method,
        )?;
        warnings.extend(r.warnings.into_iter().map(|w| format!("layer {l}: {w}")));
        mcc_per_layer.push(r.mcc);
        layer_permutations.push(r.permutation);
    }
    let pooled = compute_mcc(flatten_layers(&truth).view(), flatten_layers(estimates).view(), method)?;
    let layer_of: Vec<usize> = dims.iter().enumerate().flat_map(|(l, &d)| std::iter::repeat_n(l, d)).collect();
    let cross_layer_leakage = pooled
        .permutation
        .iter()
        .enumerate()
        .any(|(j, &i)| layer_of[j] != layer_of[i]);
    if cross_layer_leakage {
        warnings.push("pooled assignment matches components across layers".into());
    }
    Ok(EvalReport {
        correlation: method,
        mcc_overall: pooled.mcc,
        mcc_per_layer,
        permutation: pooled.permutation,
        corr_matrix: pooled.corr_matrix,
        layer_permutations,
        cross_layer_leakage,
        correlational_score: None,
        warnings,
    })
}

/// [`evaluate_latents`] on the posterior means of `latents`.
pub fn compute_mcc_per_layer(series: &GroundTruthSeries, latents: &LatentStack, method: Correlation) -> Result<EvalReport> {
    evaluate_latents(series, &latents.mean, method)
}

/// Correlational score between `series` and `num_sequences` sequences
/// sampled from the model and mapped back to observation units.
pub fn generation_score(
    model: &ChildModel,
    normalizer: &ObsNormalizer,
    series: &GroundTruthSeries,
    num_sequences: usize,
    seed: u64,
) -> Result<f64> {
    let (_, x) = model.generate(num_sequences, series.seq_length(), seed)?;
    correlational_score(series.observations.view(), normalizer.invert(x.view()).view())
}

/// Encodes `series` with `model` and scores the posterior means; adds the
/// correlational score of `generated` fresh sequences when nonzero.
pub fn evaluate_model(
    model: &ChildModel,
    normalizer: &ObsNormalizer,
    series: &GroundTruthSeries,
    method: Correlation,
    generated: usize,
    seed: u64,
) -> Result<EvalReport> {
    let stack = model.encode_context(normalizer.apply(series.observations.view()).view())?;
    let mut report = compute_mcc_per_layer(series, &stack, method)?;
    if generated > 0 {
        report.correlational_score = Some(generation_score(model, normalizer, series, generated, seed)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{build_process, preset};

    fn series(name: &str, n: usize) -> GroundTruthSeries {
        let spec = preset(name).unwrap();
        let p = build_process(&spec).unwrap();
        p.sample_series(n, spec.default_seq_length(), 5).unwrap()
    }

    #[test]
    fn ground_truth_scores_one_everywhere() {
        let s = series("A", 40);
        let truth: Vec<_> = (0..2).map(|l| s.layer(l)).collect();
        let r = evaluate_latents(&s, &truth, Correlation::Pearson).unwrap();
        assert!((r.mcc_overall - 1.0).abs() < 1e-12);
        assert!(r.mcc_per_layer.iter().all(|m| (m - 1.0).abs() < 1e-12));
        assert!(!r.cross_layer_leakage);
        assert_eq!(r.permutation, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn swapped_layers_flag_leakage() {
        let mut spec = preset("A").unwrap();
        spec.dims_per_layer = vec![2, 2];
        spec.obs_dim = None;
        let p = build_process(&spec).unwrap();
        let s = p.sample_series(60, spec.default_seq_length(), 5).unwrap();
        let swapped = vec![s.layer(1), s.layer(0)];
        let r = evaluate_latents(&s, &swapped, Correlation::Pearson).unwrap();
        assert!((r.mcc_overall - 1.0).abs() < 1e-12);
        assert!(r.mcc_per_layer.iter().all(|&m| m < 0.9), "{:?}", r.mcc_per_layer);
        assert!(r.cross_layer_leakage);
        assert_eq!(r.permutation, vec![2, 3, 0, 1]);
    }

    #[test]
    fn layer_mismatch_is_an_error() {
        let s = series("A", 10);
        assert!(evaluate_latents(&s, &[s.layer(0)], Correlation::Pearson).is_err());
        assert!(evaluate_latents(&s, &[s.layer(0), s.layer(0)], Correlation::Pearson).is_err());
    }

    #[test]
    fn report_json_round_trip() {
        let s = series("A", 10);
        let truth: Vec<_> = (0..2).map(|l| s.layer(l)).collect();
        let r = evaluate_latents(&s, &truth, Correlation::Spearman).unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
