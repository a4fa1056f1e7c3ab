//! Multinormal and Gaussian-mixture log-densities and mixture moments.
//!
//! All densities are natural logs. Values are clamped at
//! [`LOG_DENSITY_MIN`] so that `exp` of a returned log-density never
//! underflows to zero, which keeps the scaled forward pass finite; each
//! clamp is counted for diagnostics.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{smallest_eigenvalue, GaussianComponent, GaussianMixture};

/// Smallest representable log-density: below this, `exp` underflows in f64.
pub const LOG_DENSITY_MIN: f64 = -745.0;

const LN_2PI: f64 = 1.8378770664093453;

static UNDERFLOW_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of log-density evaluations clamped at [`LOG_DENSITY_MIN`] since
/// the last reset.
pub fn underflow_clamp_count() -> u64 {
    UNDERFLOW_CLAMPS.load(Ordering::Relaxed)
}

pub fn reset_underflow_clamp_count() {
    UNDERFLOW_CLAMPS.store(0, Ordering::Relaxed);
}

fn clamp_log_density(v: f64) -> f64 {
    if v < LOG_DENSITY_MIN {
        UNDERFLOW_CLAMPS.fetch_add(1, Ordering::Relaxed);
        LOG_DENSITY_MIN
    } else {
        v
    }
}

/// A component with its covariance factorized once, for repeated evaluation.
#[derive(Debug, Clone)]
pub(crate) struct PreparedComponent {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl PreparedComponent {
    pub(crate) fn new(comp: &GaussianComponent) -> Result<Self> {
        let n = comp.dim();
        if comp.cov.nrows() != n || comp.cov.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "covariance shape",
                expected: n,
                found: comp.cov.nrows(),
            });
        }
        let chol = comp.cov.clone().cholesky().ok_or_else(|| {
            Error::NotPositiveDefinite {
                min_eigenvalue: smallest_eigenvalue(&comp.cov),
            }
        })?;
        let chol_l = chol.l();
        let log_det_half: f64 = chol_l.diagonal().iter().map(|d| d.ln()).sum();
        Ok(Self {
            mean: comp.mean.clone(),
            chol_l,
            log_norm: -0.5 * (n as f64) * LN_2PI - log_det_half,
        })
    }

    /// Unclamped log-density at `x`; `x` must have the component's dimension.
    pub(crate) fn logpdf(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let z = self
            .chol_l
            .solve_lower_triangular(&diff)
            .expect("cholesky factor is nonsingular");
        self.log_norm - 0.5 * z.norm_squared()
    }

    pub(crate) fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Log of the multinormal density of `x` under `comp`, via a Cholesky
/// factorization for both the determinant and the quadratic form. Uses the
/// general `(2*pi)^(n/2)` normalizer so every dimension is handled.
pub fn multinormal_logpdf(x: &DVector<f64>, comp: &GaussianComponent) -> Result<f64> {
    if x.len() != comp.dim() {
        return Err(Error::DimensionMismatch {
            context: "multinormal_logpdf",
            expected: comp.dim(),
            found: x.len(),
        });
    }
    let prepared = PreparedComponent::new(comp)?;
    Ok(clamp_log_density(prepared.logpdf(x)))
}

pub(crate) fn prepare_mixture(gm: &GaussianMixture) -> Result<Vec<PreparedComponent>> {
    gm.components.iter().map(PreparedComponent::new).collect()
}

/// Max-shifted log-sum over weighted component log-densities.
pub(crate) fn logsumexp_weighted(
    x: &DVector<f64>,
    weights: &DVector<f64>,
    comps: &[PreparedComponent],
) -> f64 {
    let terms: Vec<f64> = comps
        .iter()
        .zip(weights.iter())
        .map(|(c, &w)| w.ln() + c.logpdf(x))
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Log of the mixture density `sum_k c_k p_k(x)`, computed via a max-shifted
/// log-sum to avoid underflow.
pub fn gm_logpdf(x: &DVector<f64>, gm: &GaussianMixture) -> Result<f64> {
    if x.len() != gm.dim() {
        return Err(Error::DimensionMismatch {
            context: "gm_logpdf",
            expected: gm.dim(),
            found: x.len(),
        });
    }
    let comps = prepare_mixture(gm)?;
    Ok(clamp_log_density(logsumexp_weighted(x, &gm.weights, &comps)))
}

/// Overall mean and covariance of a mixture:
/// `mean = sum_k c_k u_k`,
/// `cov  = sum_k c_k (Sigma_k + (u_k - mean)(u_k - mean)^T)`.
pub fn gm_moments(gm: &GaussianMixture) -> (DVector<f64>, DMatrix<f64>) {
    let n = gm.dim();
    let mut mean = DVector::zeros(n);
    for (c, &w) in gm.components.iter().zip(gm.weights.iter()) {
        mean += &c.mean * w;
    }
    let mut cov = DMatrix::zeros(n, n);
    for (c, &w) in gm.components.iter().zip(gm.weights.iter()) {
        let d = &c.mean - &mean;
        cov += (&c.cov + &d * d.transpose()) * w;
    }
    (mean, cov)
}

/// Variance-floor magnitude for a data set: `scale` times the median
/// diagonal entry of the population (1/T) covariance of the observations.
pub fn floor_epsilon(obs: &[DVector<f64>], scale: f64) -> f64 {
    if obs.is_empty() {
        return 0.0;
    }
    let n = obs[0].len();
    let t = obs.len() as f64;
    let mut mean = DVector::zeros(n);
    for o in obs {
        mean += o;
    }
    mean /= t;
    let mut diag: Vec<f64> = (0..n)
        .map(|d| obs.iter().map(|o| (o[d] - mean[d]).powi(2)).sum::<f64>() / t)
        .collect();
    diag.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        diag[n / 2]
    } else {
        0.5 * (diag[n / 2 - 1] + diag[n / 2])
    };
    scale * median
}

/// Regularize a covariance by adding `eps` to the diagonal.
pub fn apply_variance_floor(cov: &mut DMatrix<f64>, eps: f64) {
    for d in 0..cov.nrows() {
        cov[(d, d)] += eps;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{paper_mixtures, table5_returns};
    use approx::assert_relative_eq;

    #[test]
    fn standard_normal_at_mean() {
        let comp = GaussianComponent::scalar(0.0, 1.0);
        let x = DVector::from_element(1, 0.0);
        assert_relative_eq!(
            multinormal_logpdf(&x, &comp).unwrap(),
            -0.9189385332046727,
            max_relative = 1e-12
        );
    }

    #[test]
    fn identity_covariance_at_mean_any_dim() {
        let n = 3;
        let comp = GaussianComponent {
            mean: DVector::from_vec(vec![0.4, -1.0, 2.0]),
            cov: DMatrix::identity(n, n),
        };
        let ld = multinormal_logpdf(&comp.mean.clone(), &comp).unwrap();
        assert_relative_eq!(ld, -(n as f64) / 2.0 * LN_2PI, max_relative = 1e-12);
    }

    #[test]
    fn scalar_density_matches_independent_oracle() {
        // oracle: direct evaluation of the univariate normal density formula
        let (x, mu, sd) = (0.012_f64, 0.148_f64, 0.045_f64);
        let oracle = -(sd * (2.0 * std::f64::consts::PI).sqrt()).ln()
            - 0.5 * ((x - mu) / sd).powi(2);
        assert_relative_eq!(oracle, -2.3847593242397687, max_relative = 1e-14);
        let comp = GaussianComponent::scalar(mu, sd * sd);
        let got = multinormal_logpdf(&DVector::from_element(1, x), &comp).unwrap();
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
    }

    #[test]
    fn single_component_mixture_reduces_exactly() {
        let comp = GaussianComponent::scalar(0.1, 0.5);
        let gm = GaussianMixture::single(comp.clone());
        let x = DVector::from_element(1, -0.3);
        let a = gm_logpdf(&x, &gm).unwrap();
        let b = multinormal_logpdf(&x, &comp).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equal_identical_components_reduce_to_component() {
        let comp = GaussianComponent::scalar(0.2, 0.3);
        let gm = GaussianMixture::new(vec![0.5, 0.5], vec![comp.clone(), comp.clone()]);
        let x = DVector::from_element(1, 0.55);
        assert_relative_eq!(
            gm_logpdf(&x, &gm).unwrap(),
            multinormal_logpdf(&x, &comp).unwrap(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn mixture_matches_linear_space_oracle() {
        // state-1 mixture of the S&P calibration, evaluated at x = 0.13;
        // oracle sums the two weighted scalar densities in linear space
        let gm = paper_mixtures().remove(0);
        let x = 0.13_f64;
        let pdf = |mu: f64, sd: f64| {
            (-0.5 * ((x - mu) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
        };
        let oracle = (0.88 * pdf(0.13, 0.045) + 0.12 * pdf(0.28, 0.28)).ln();
        assert_relative_eq!(oracle, 2.073128922740643, max_relative = 1e-14);
        let got = gm_logpdf(&DVector::from_element(1, x), &gm).unwrap();
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
    }

    #[test]
    fn overall_moments_match_tables() {
        let mixtures = paper_mixtures();
        let (mean1, cov1) = gm_moments(&mixtures[0]);
        // 0.88 * 13.0 + 0.12 * 28.0 = 14.8 %/yr
        assert_relative_eq!(mean1[0] * 100.0, 14.8, max_relative = 1e-12);
        // law-of-total-variance oracle: sqrt(0.88*4.5^2 + 0.12*28^2
        //   + 0.88*(13-14.8)^2 + 0.12*(28-14.8)^2) = 11.647...
        let std1 = (cov1[(0, 0)]).sqrt() * 100.0;
        assert_relative_eq!(std1, 11.647317287684748, max_relative = 1e-10);
        assert!((std1 - 11.6).abs() < 0.1);
    }

    #[test]
    fn single_component_moments_are_the_component() {
        let comp = GaussianComponent::scalar(0.07, 0.02);
        let gm = GaussianMixture::single(comp.clone());
        let (mean, cov) = gm_moments(&gm);
        assert_eq!(mean[0], 0.07);
        assert_eq!(cov[(0, 0)], 0.02);
    }

    #[test]
    fn mixture_density_integrates_to_one() {
        // Simpson quadrature over +-10 overall std on scalar mixtures
        for gm in paper_mixtures() {
            let (mean, cov) = gm_moments(&gm);
            let (m, s) = (mean[0], cov[(0, 0)].sqrt());
            let (lo, hi) = (m - 10.0 * s, m + 10.0 * s);
            let n = 20_000;
            let h = (hi - lo) / n as f64;
            let f = |x: f64| {
                gm_logpdf(&DVector::from_element(1, x), &gm)
                    .unwrap()
                    .exp()
            };
            let mut total = f(lo) + f(hi);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                total += w * f(lo + i as f64 * h);
            }
            total *= h / 3.0;
            assert!((total - 1.0).abs() < 1e-3, "integral {total}");
        }
    }

    #[test]
    fn component_permutation_leaves_density_unchanged() {
        let gm = paper_mixtures().remove(0);
        let swapped = GaussianMixture::new(
            vec![gm.weights[1], gm.weights[0]],
            vec![gm.components[1].clone(), gm.components[0].clone()],
        );
        for &x in &table5_returns() {
            let xv = DVector::from_element(1, x);
            let a = gm_logpdf(&xv, &gm).unwrap();
            let b = gm_logpdf(&xv, &swapped).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let comp = GaussianComponent::scalar(0.0, 1.0);
        let x = DVector::from_vec(vec![0.0, 1.0]);
        assert!(matches!(
            multinormal_logpdf(&x, &comp),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn non_pd_covariance_reports_smallest_eigenvalue() {
        let comp = GaussianComponent::scalar(0.0, -2.0);
        match multinormal_logpdf(&DVector::from_element(1, 0.0), &comp) {
            Err(Error::NotPositiveDefinite { min_eigenvalue }) => {
                assert!((min_eigenvalue - (-2.0)).abs() < 1e-12)
            }
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn deep_tail_is_clamped_and_counted() {
        reset_underflow_clamp_count();
        let comp = GaussianComponent::scalar(0.0, 1e-6);
        let x = DVector::from_element(1, 1e3);
        let ld = multinormal_logpdf(&x, &comp).unwrap();
        assert_eq!(ld, LOG_DENSITY_MIN);
        assert!(underflow_clamp_count() >= 1);
    }

    #[test]
    fn floor_epsilon_is_median_diagonal_scaled() {
        let obs: Vec<DVector<f64>> = [1.0_f64, 2.0, 3.0, 4.0]
            .iter()
            .map(|&v| DVector::from_vec(vec![v, 10.0 * v]))
            .collect();
        // population variances: 1.25 and 125; median of {1.25, 125} = 63.125
        let eps = floor_epsilon(&obs, 1e-6);
        assert_relative_eq!(eps, 63.125e-6, max_relative = 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn symmetric_about_the_mean(
                mu in -5.0..5.0f64,
                var in 0.1..4.0f64,
                x in -10.0..10.0f64,
            ) {
                let comp = GaussianComponent::scalar(mu, var);
                let a = multinormal_logpdf(&DVector::from_element(1, x), &comp).unwrap();
                let b = multinormal_logpdf(
                    &DVector::from_element(1, 2.0 * mu - x),
                    &comp,
                )
                .unwrap();
                prop_assert!((a - b).abs() < 1e-10);
            }

            #[test]
            fn mixture_density_never_nan(
                x in -50.0..50.0f64,
                w in 0.01..0.99f64,
                m1 in -1.0..1.0f64,
                m2 in -1.0..1.0f64,
                v1 in 1e-4..1.0f64,
                v2 in 1e-4..1.0f64,
            ) {
                let gm = GaussianMixture::new(
                    vec![w, 1.0 - w],
                    vec![
                        GaussianComponent::scalar(m1, v1),
                        GaussianComponent::scalar(m2, v2),
                    ],
                );
                let ld = gm_logpdf(&DVector::from_element(1, x), &gm).unwrap();
                prop_assert!(ld.is_finite());
                prop_assert!(ld >= LOG_DENSITY_MIN);
            }
        }
    }
}
