use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChildModel, ObsNormalizer};

/// Share of the base window's RMS a feature must move to count as moved.
pub const MOVEMENT_THRESHOLD: f64 = 0.1;

/// Steps at which the edited component is overwritten.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditScope {
    #[default]
    AllSteps,
    Step(usize),
}

/// Decoded sequences for a sweep of one latent component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interpolation {
    /// Layer index, bottom layer = 0.
    pub layer: usize,
    pub component: usize,
    pub scope: EditScope,
    pub grid: Vec<f64>,
    /// Reconstruction of the unedited window, `[T, obs_dim]`, observation units.
    pub base: Array2<f64>,
    /// One `[T, obs_dim]` series per grid value, observation units.
    pub series: Vec<Array2<f64>>,
    /// Per-feature RMS change against `base` over all grid values and
    /// steps, in normalised units.
    pub feature_change: Vec<f64>,
    /// Features whose change exceeds [`MOVEMENT_THRESHOLD`] times the RMS of
    /// the normalised window.
    pub moved_features: usize,
}

impl Interpolation {
    /// CSV with columns `grid_value,t,feature,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("grid_value,t,feature,value\n");
        for (g, x) in self.grid.iter().zip(&self.series) {
            for ((t, f), v) in x.indexed_iter() {
                let _ = writeln!(out, "{g},{t},{f},{v}");
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Latent path after setting component `component` of `layer` to `value` at
/// the steps in `scope`. Lower layers keep their inferred noise: each lower latent is
/// re-solved so that its prior flow returns the noise it had before the
/// edit, given the edited history and parent. Steps whose inputs did not
/// change keep their values exactly.
pub fn edit_latents(
    model: &ChildModel,
    latents: &[Array2<f64>],
    layer: usize,
    component: usize,
    scope: EditScope,
    value: f64,
) -> Result<Vec<Array2<f64>>> {
    let tau = model.config().lag;
    let mut edited = latents.to_vec();
    match scope {
        EditScope::AllSteps => edited[layer].column_mut(component).fill(value),
        EditScope::Step(t) => edited[layer][[t, component]] = value,
    }
    let steps = latents[0].nrows();
    let top = latents.len() - 1;
    for l in (0..layer).rev() {
        for t in tau..steps {
            let parent_changed = edited[l + 1].row(t) != latents[l + 1].row(t);
            let history_changed = (1..=tau).any(|k| edited[l].row(t - k) != latents[l].row(t - k));
            if !parent_changed && !history_changed {
                continue;
            }
            let history = |z: &Array2<f64>| -> Vec<Vec<f64>> { (1..=tau).map(|k| z.row(t - k).to_vec()).collect() };
            let parent = |z: &[Array2<f64>]| (l < top).then(|| z[l + 1].row(t).to_vec());
            let old_hist = history(&latents[l]);
            let old_refs: Vec<&[f64]> = old_hist.iter().map(|v| v.as_slice()).collect();
            let old_parent = parent(latents);
            let noise = model
                .prior_noise_and_jacobian(l, &latents[l].row(t).to_vec(), &old_refs, old_parent.as_deref())?
                .noise;
            let new_hist = history(&edited[l]);
            let new_refs: Vec<&[f64]> = new_hist.iter().map(|v| v.as_slice()).collect();
            let new_parent = parent(&edited);
            let z = model.invert_prior(l, &noise, &new_refs, new_parent.as_deref())?;
            edited[l].row_mut(t).assign(&ndarray::Array1::from(z));
        }
    }
    Ok(edited)
}

/// Encodes `window` (`[T, obs_dim]`, observation units), sweeps component
/// `component` of `layer` (bottom = 0) over `grid` and decodes each edit.
pub fn interpolate_latent(
    model: &ChildModel,
    normalizer: &ObsNormalizer,
    window: ArrayView2<f64>,
    layer: usize,
    component: usize,
    scope: EditScope,
    grid: &[f64],
) -> Result<Interpolation> {
    let dims = model.config().dims_bottom_up();
    if layer >= dims.len() {
        return Err(Error::Config(format!("layer {layer} out of range; the model has {} layers", dims.len())));
    }
    if component >= dims[layer] {
        return Err(Error::Config(format!(
            "component {component} out of range; layer {layer} has {} components",
            dims[layer]
        )));
    }
    if grid.is_empty() {
        return Err(Error::Config("interpolation grid is empty".into()));
    }
    if window.ncols() != model.config().obs_dim {
        return Err(Error::Shape(format!(
            "window has {} features, the model expects {}",
            window.ncols(),
            model.config().obs_dim
        )));
    }
    if let EditScope::Step(t) = scope {
        if t >= window.nrows() {
            return Err(Error::Config(format!("step {t} out of range; the window has {} steps", window.nrows())));
        }
    }
    let x = normalizer.apply(window.insert_axis(Axis(0)));
    let stack = model.encode_context(x.view())?;
    let latents: Vec<Array2<f64>> = stack.mean.iter().map(|m| m.index_axis(Axis(0), 0).to_owned()).collect();
    let decode = |bottom: &Array2<f64>| -> Result<Array3<f64>> { model.decode(bottom.view().insert_axis(Axis(0))) };
    let base_norm = decode(&latents[0])?;
    let mut series = Vec::with_capacity(grid.len());
    let (steps, features) = window.dim();
    let mut sq_change = vec![0.0; features];
    for &g in grid {
        let edited = edit_latents(model, &latents, layer, component, scope, g)?;
        let out = decode(&edited[0])?;
        for ((_, t, f), v) in out.indexed_iter() {
            let d = v - base_norm[[0, t, f]];
            sq_change[f] += d * d;
        }
        series.push(normalizer.invert(out.view()).slice_move(s![0, .., ..]));
    }
    let count = (grid.len() * steps) as f64;
    let feature_change: Vec<f64> = sq_change.iter().map(|s| (s / count).sqrt()).collect();
    let signal_rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let moved_features = feature_change.iter().filter(|&&c| c > MOVEMENT_THRESHOLD * signal_rms).count();
    Ok(Interpolation {
        layer,
        component,
        scope,
        grid: grid.to_vec(),
        base: normalizer.invert(base_norm.view()).slice_move(s![0, .., ..]),
        series,
        feature_change,
        moved_features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use candle_core::DType;

    fn model() -> ChildModel {
        let cfg = ModelConfig {
            num_layers: 2,
            dims_per_layer: vec![1, 4],
            obs_dim: 4,
            receptive_half_width: 2,
            ..ModelConfig::default()
        };
        ChildModel::new(cfg, 3, DType::F64).unwrap()
    }

    fn window() -> Array2<f64> {
        Array2::from_shape_fn((10, 4), |(t, f)| ((t * 4 + f) as f64 * 0.37).sin())
    }

    fn latents(m: &ChildModel) -> Vec<Array2<f64>> {
        m.encode_context(window().view().insert_axis(Axis(0)))
            .unwrap()
            .mean
            .iter()
            .map(|a| a.index_axis(Axis(0), 0).to_owned())
            .collect()
    }

    #[test]
    fn original_value_reproduces_reconstruction() {
        let m = model();
        let norm = ObsNormalizer { offset: vec![0.5; 4], scale: vec![3.0; 4] };
        let w = window();
        let x = norm.apply(w.view().insert_axis(Axis(0)));
        let stack = m.encode_context(x.view()).unwrap();
        for (layer, comp) in [(1, 0), (0, 2)] {
            let orig = stack.mean[layer][[0, 4, comp]];
            let r = interpolate_latent(&m, &norm, w.view(), layer, comp, EditScope::Step(4), &[orig]).unwrap();
            assert_eq!(r.series[0], r.base);
            assert!(r.feature_change.iter().all(|&c| c == 0.0));
        }
        let recon = norm.invert(m.decode(stack.mean[0].view()).unwrap().view()).slice_move(s![0, .., ..]);
        let r = interpolate_latent(&m, &norm, w.view(), 1, 0, EditScope::AllSteps, &[0.0]).unwrap();
        assert_eq!(r.base, recon);
    }

    #[test]
    fn unchanged_inputs_keep_lower_layers_bitwise() {
        let m = model();
        let latents = latents(&m);
        let mut top = latents.clone();
        top[1].column_mut(0).fill(0.25);
        let edited = edit_latents(&m, &top, 1, 0, EditScope::AllSteps, 0.25).unwrap();
        assert_eq!(edited, top);
    }

    #[test]
    fn abduction_preserves_lower_noise() {
        let m = model();
        let latents = latents(&m);
        let edited = edit_latents(&m, &latents, 1, 0, EditScope::AllSteps, 1.5).unwrap();
        for t in 1..10 {
            let noise = |z: &[Array2<f64>]| {
                m.prior_noise_and_jacobian(0, &z[0].row(t).to_vec(), &[&z[0].row(t - 1).to_vec()], Some(&z[1].row(t).to_vec()))
                    .unwrap()
                    .noise
            };
            for (a, b) in noise(&latents).iter().zip(noise(&edited)) {
                assert!((a - b).abs() < 1e-8, "step {t}: {a} vs {b}");
            }
        }
        assert_ne!(edited[0], latents[0]);
    }

    #[test]
    fn bottom_edit_leaves_upper_layers() {
        let m = model();
        let latents = latents(&m);
        let edited = edit_latents(&m, &latents, 0, 1, EditScope::AllSteps, -2.0).unwrap();
        assert_eq!(edited[1], latents[1]);
        assert!(edited[0].column(1).iter().all(|&v| v == -2.0));
        for c in [0, 2, 3] {
            assert_eq!(edited[0].column(c), latents[0].column(c));
        }
    }

    #[test]
    fn grid_cardinality_and_csv() {
        let m = model();
        let norm = ObsNormalizer { offset: vec![1.0; 4], scale: vec![2.0; 4] };
        let grid = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let r = interpolate_latent(&m, &norm, window().view(), 1, 0, EditScope::AllSteps, &grid).unwrap();
        assert_eq!(r.series.len(), 5);
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("grid_value,t,feature,value"));
        assert_eq!(lines.count(), 5 * 10 * 4);
        assert_eq!(r.feature_change.len(), 4);
    }

    #[test]
    fn out_of_range_component_is_rejected() {
        let m = model();
        let norm = ObsNormalizer::identity(4);
        let run = |l, c, scope, g: &[f64]| interpolate_latent(&m, &norm, window().view(), l, c, scope, g);
        assert!(run(1, 1, EditScope::AllSteps, &[0.0]).is_err());
        assert!(run(2, 0, EditScope::AllSteps, &[0.0]).is_err());
        assert!(run(0, 0, EditScope::AllSteps, &[]).is_err());
        assert!(run(0, 0, EditScope::Step(10), &[0.0]).is_err());
    }
}
