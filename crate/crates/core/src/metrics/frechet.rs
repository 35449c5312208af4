//! Gaussian summaries of feature sets and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{contract, Result};

/// Tolerance for symmetry and for negative eigenvalues.
pub const PSD_TOL: f64 = 1e-6;

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    /// Sample mean and unbiased covariance of at least two feature vectors.
    pub fn from_features(features: &[Vec<f32>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return contract(format!("need at least 2 feature vectors, got {n}"));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return contract("feature vectors must share a non-zero length");
        }
        let x = DMatrix::from_fn(n, d, |i, j| f64::from(features[i][j]));
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut centered = x;
        for j in 0..d {
            let m = mean[j];
            centered.column_mut(j).iter_mut().for_each(|v| *v -= m);
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(GaussianSummary { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks that the covariance is symmetric and positive semi-definite within tolerance.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.shape() != (d, d) {
            return contract(format!(
                "covariance is {:?} for a {d}-dim mean",
                self.cov.shape()
            ));
        }
        let scale = self.cov.amax().max(1.0);
        if (&self.cov - self.cov.transpose()).amax() > PSD_TOL * scale {
            return contract("covariance is not symmetric");
        }
        let min_eig = SymmetricEigen::new(self.cov.clone()).eigenvalues.min();
        if min_eig < -PSD_TOL * scale {
            return contract(format!("covariance has eigenvalue {min_eig}"));
        }
        Ok(())
    }
}

/// Square root of a symmetric PSD matrix, clipping small negative eigenvalues to 0.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the
/// cross term computed as `tr sqrt(S1^(1/2) S2 S1^(1/2))`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return contract(format!(
            "summaries have dimensions {} and {}",
            a.dim(),
            b.dim()
        ));
    }
    a.validate()?;
    b.validate()?;
    let s1 = sqrt_psd(&a.cov);
    let inner = &s1 * &b.cov * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d2 = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d2.max(0.0))
}

/// Fréchet distance between the Gaussian summaries of two feature sets.
pub fn feature_distance(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<f64> {
    frechet_distance(
        &GaussianSummary::from_features(a)?,
        &GaussianSummary::from_features(b)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn summary(mean: &[f64], cov: &[f64]) -> GaussianSummary {
        let d = mean.len();
        GaussianSummary {
            mean: DVector::from_row_slice(mean),
            cov: DMatrix::from_row_slice(d, d, cov),
        }
    }

    #[test]
    fn identical_summaries_are_at_distance_zero() {
        let g = summary(&[1.0, 2.0], &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_distance(&g, &g).unwrap() < 1e-9);
    }

    #[test]
    fn mean_shift_with_equal_covariance() {
        let a = summary(&[0.0, 0.0], &[2.0, 0.3, 0.3, 1.0]);
        let b = summary(&[3.0, -1.0], &[2.0, 0.3, 0.3, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_case_by_hand() {
        // tr(S1 + S2) = 10; (S1 S2)^(1/2) = diag(2, 2) so the cross term is 2 * 4 = 8.
        let a = summary(&[0.0, 0.0], &[1.0, 0.0, 0.0, 4.0]);
        let b = summary(&[0.0, 0.0], &[4.0, 0.0, 0.0, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn one_dimensional_gaussians() {
        // Closed form in 1-D: (m1 - m2)^2 + (s1 - s2)^2 with standard deviations s.
        let a = summary(&[1.0], &[9.0]);
        let b = summary(&[-1.0], &[4.0]);
        assert!((frechet_distance(&a, &b).unwrap() - (4.0 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn non_psd_and_asymmetric_inputs_are_rejected() {
        let good = summary(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let neg = summary(&[0.0, 0.0], &[1.0, 0.0, 0.0, -0.5]);
        let asym = summary(&[0.0, 0.0], &[1.0, 0.4, 0.0, 1.0]);
        assert!(frechet_distance(&good, &neg).is_err());
        assert!(frechet_distance(&asym, &good).is_err());
        assert!(frechet_distance(&good, &summary(&[0.0], &[1.0])).is_err());
    }

    #[test]
    fn summary_of_known_samples() {
        let g = GaussianSummary::from_features(&[vec![1.0, 0.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(g.mean.as_slice(), &[2.0, 1.0]);
        assert_eq!(g.cov, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
        assert!(GaussianSummary::from_features(&[vec![1.0]]).is_err());
    }

    fn arb_summary(d: usize) -> impl Strategy<Value = GaussianSummary> {
        (
            proptest::collection::vec(-3.0f64..3.0, d),
            proptest::collection::vec(-1.0f64..1.0, d * d),
        )
            .prop_map(move |(m, a)| {
                let a = DMatrix::from_row_slice(d, d, &a);
                GaussianSummary {
                    mean: DVector::from_row_slice(&m),
                    cov: &a * a.transpose() + DMatrix::identity(d, d) * 0.01,
                }
            })
    }

    proptest! {
        #[test]
        fn symmetric_and_non_negative(a in arb_summary(3), b in arb_summary(3)) {
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        }
    }
}
