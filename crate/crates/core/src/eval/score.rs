use ndarray::{Array2, ArrayView3, Axis};

use super::mcc::standardized_columns;
use crate::error::{Error, Result};

/// Feature-by-feature Pearson correlation of a `[N, T, n]` set, pooled over
/// sequences and time. Zero-variance features correlate as 0 (diagonal 1).
pub fn pooled_correlation(series: ArrayView3<f64>) -> Array2<f64> {
    let (n, t, f) = series.dim();
    let flat = series
        .to_owned()
        .into_shape_with_order((n * t, f))
        .expect("contiguous reshape");
    let cols = standardized_columns(flat.view());
    Array2::from_shape_fn((f, f), |(i, j)| {
        if i == j {
            return 1.0;
        }
        match (&cols[i], &cols[j]) {
            (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            _ => 0.0,
        }
    })
}

/// Summed absolute difference between the pooled correlation matrices of a
/// real and a generated set.
pub fn correlational_score(real: ArrayView3<f64>, generated: ArrayView3<f64>) -> Result<f64> {
    if real.len_of(Axis(2)) != generated.len_of(Axis(2)) {
        return Err(Error::Shape(format!(
            "real data has {} features, generated has {}",
            real.len_of(Axis(2)),
            generated.len_of(Axis(2))
        )));
    }
    let a = pooled_correlation(real);
    let b = pooled_correlation(generated);
    Ok((&a - &b).mapv(f64::abs).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, t: usize, f: usize, seed: u64) -> Array3<f64> {
        let mut rng = crate::rng::chacha(seed);
        Array3::from_shape_fn((n, t, f), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identical_sets_score_zero() {
        let x = noise(10, 20, 3, 1);
        assert_eq!(correlational_score(x.view(), x.view()).unwrap(), 0.0);
    }

    #[test]
    fn symmetric() {
        let a = noise(5, 10, 3, 1);
        let b = noise(5, 10, 3, 2);
        let ab = correlational_score(a.view(), b.view()).unwrap();
        let ba = correlational_score(b.view(), a.view()).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn feature_count_mismatch() {
        let a = noise(2, 5, 3, 1);
        let b = noise(2, 5, 2, 1);
        assert!(correlational_score(a.view(), b.view()).is_err());
    }
}
