use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_assignment;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correlation {
    #[default]
    Pearson,
    /// Pearson on ranks; invariant under strictly monotone component maps.
    Spearman,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MccResult {
    pub mcc: f64,
    /// `permutation[j]` is the true component matched to estimated component `j`.
    pub permutation: Vec<usize>,
    /// `|corr(true_i, est_j)|`, rows true, columns estimated.
    pub corr_matrix: Array2<f64>,
    pub warnings: Vec<String>,
}

/// Average ranks (ties share the mean rank), 0-based.
fn ranks(col: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..col.len()).collect();
    idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
    let mut out = vec![0.0; col.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && col[idx[end]] == col[idx[start]] {
            end += 1;
        }
        let r = (start + end - 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = r;
        }
        start = end;
    }
    out
}

/// Centred columns scaled to unit norm; `None` for zero-variance columns.
pub(crate) fn standardized_columns(data: ArrayView2<f64>) -> Vec<Option<Vec<f64>>> {
    data.axis_iter(Axis(1))
        .map(|col| {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let centred: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let norm = centred.iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm > 1e-12 * (1.0 + mean.abs()) * n.sqrt() && norm.is_finite())
                .then(|| centred.into_iter().map(|v| v / norm).collect())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Absolute correlation matrix between the columns of `a` (rows) and `b`.
pub fn abs_correlation_matrix(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    method: Correlation,
    warnings: &mut Vec<String>,
) -> Array2<f64> {
    let prepare = |m: ArrayView2<f64>| match method {
        Correlation::Pearson => m.to_owned(),
        Correlation::Spearman => {
            let mut r = m.to_owned();
            for mut col in r.axis_iter_mut(Axis(1)) {
                let rk = ranks(&col.to_vec());
                col.iter_mut().zip(rk).for_each(|(c, v)| *c = v);
            }
            r
        }
    };
    let sa = standardized_columns(prepare(a).view());
    let sb = standardized_columns(prepare(b).view());
    for (name, cols) in [("true", &sa), ("estimated", &sb)] {
        for (i, c) in cols.iter().enumerate() {
            if c.is_none() {
                warnings.push(format!("{name} component {i} has zero variance; its correlations are set to 0"));
            }
        }
    }
    Array2::from_shape_fn((sa.len(), sb.len()), |(i, j)| match (&sa[i], &sb[j]) {
        (Some(x), Some(y)) => dot(x, y).abs().min(1.0),
        _ => 0.0,
    })
}

/// Mean correlation coefficient after optimal one-to-one alignment.
pub fn compute_mcc(
    z_true: ArrayView2<f64>,
    z_est: ArrayView2<f64>,
    method: Correlation,
) -> Result<MccResult> {
    let (s, d) = z_true.dim();
    if z_est.dim() != (s, d) {
        return Err(Error::Shape(format!(
            "true latents are {:?} but estimates are {:?}",
            z_true.dim(),
            z_est.dim()
        )));
    }
    if s < 3 {
        return Err(Error::Shape(format!("MCC needs at least 3 samples, got {s}")));
    }
    if d == 0 {
        return Err(Error::Shape("MCC needs at least one component".into()));
    }
    let mut warnings = Vec::new();
    let corr = abs_correlation_matrix(z_true, z_est, method, &mut warnings);
    // rows: estimated, columns: true
    let weights: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| corr[[i, j]]).collect()).collect();
    let (permutation, total) = max_weight_assignment(&weights);
    Ok(MccResult {
        mcc: total / d as f64,
        permutation,
        corr_matrix: corr,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(s: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::chacha(seed);
        Array2::from_shape_fn((s, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn self_correlation_is_one() {
        let z = gaussian(200, 4, 1);
        let r = compute_mcc(z.view(), z.view(), Correlation::Pearson).unwrap();
        assert!((r.mcc - 1.0).abs() < 1e-12);
        assert_eq!(r.permutation, vec![0, 1, 2, 3]);
    }

    #[test]
    fn recovers_permutation_under_affine_maps() {
        let z = gaussian(500, 4, 2);
        let perm = [2usize, 0, 3, 1];
        let mut rng = crate::rng::chacha(3);
        let mut est = Array2::zeros((500, 4));
        for j in 0..4 {
            let a: f64 = rng.random_range(0.1..5.0);
            let b: f64 = rng.random_range(-3.0..3.0);
            for t in 0..500 {
                est[[t, j]] = a * z[[t, perm[j]]] + b;
            }
        }
        let r = compute_mcc(z.view(), est.view(), Correlation::Pearson).unwrap();
        assert!((r.mcc - 1.0).abs() < 1e-9);
        assert_eq!(r.permutation, perm.to_vec());
    }

    #[test]
    fn spearman_survives_monotone_nonlinearity() {
        let z = gaussian(300, 3, 4);
        let est = z.mapv(|v| v.powi(3) + v.exp());
        let p = compute_mcc(z.view(), est.view(), Correlation::Pearson).unwrap();
        let s = compute_mcc(z.view(), est.view(), Correlation::Spearman).unwrap();
        assert!(p.mcc < 0.99);
        assert!((s.mcc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_column_warns() {
        let mut est = gaussian(50, 2, 5);
        est.column_mut(1).fill(3.0);
        let z = gaussian(50, 2, 6);
        let r = compute_mcc(z.view(), est.view(), Correlation::Pearson).unwrap();
        assert_eq!(r.corr_matrix[[0, 1]], 0.0);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn errors_on_bad_shapes() {
        let a = gaussian(10, 2, 0);
        let b = gaussian(10, 3, 0);
        assert!(compute_mcc(a.view(), b.view(), Correlation::Pearson).is_err());
        let c = gaussian(2, 2, 0);
        assert!(compute_mcc(c.view(), c.view(), Correlation::Pearson).is_err());
    }

    #[test]
    fn ties_get_average_rank() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![2.5, 0.0, 2.5, 1.0]);
    }
}
