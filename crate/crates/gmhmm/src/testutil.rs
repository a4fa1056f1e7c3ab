//! Shared fixtures for unit tests: the fitted S&P 500 model and the two
//! annual return series it was validated on.

use crate::model::{
    GaussianComponent, GaussianMixture, GmHmm, InitialDistribution, ObservationSeq,
    TransitionMatrix,
};

pub fn paper_mixtures() -> Vec<GaussianMixture> {
    vec![
        GaussianMixture::new(
            vec![0.88, 0.12],
            vec![
                GaussianComponent::scalar(0.13, 0.002025), // std 4.5 %/yr
                GaussianComponent::scalar(0.28, 0.0784),   // std 28.0 %/yr
            ],
        ),
        GaussianMixture::new(
            vec![0.99, 0.01],
            vec![
                GaussianComponent::scalar(-0.048, 0.003136), // std 5.6 %/yr
                GaussianComponent::scalar(0.014, 1.21),      // std 110.0 %/yr
            ],
        ),
    ]
}

/// The fitted two-regime, two-component model for the 1976-1996 S&P 500
/// calibration.
pub fn paper_model() -> GmHmm {
    GmHmm {
        trans: TransitionMatrix::from_rows(&[vec![0.78, 0.22], vec![0.82, 0.18]]),
        pi: InitialDistribution::new(vec![1e-6, 1.0 - 1e-6]),
        emissions: paper_mixtures(),
    }
}

/// Annual S&P 500 log returns 1976-1996 (decimal fractions).
pub fn table5_returns() -> Vec<f64> {
    vec![
        0.012, -0.134, 0.113, 0.134, 0.126, -0.073, 0.188, 0.117, 0.095, 0.165, 0.258, -0.065,
        0.146, 0.101, 0.044, 0.173, 0.071, 0.093, -0.024, 0.302, 0.212,
    ]
}

pub fn table5_seq() -> ObservationSeq {
    ObservationSeq::from_scalars(&table5_returns()).unwrap()
}

/// In-sample regime sequence (1-based) for 1976-1996.
pub fn table5_regimes() -> Vec<usize> {
    vec![2, 2, 1, 1, 1, 2, 1, 1, 1, 1, 1, 2, 1, 1, 1, 1, 1, 1, 2, 1, 1]
}

/// Annual S&P 500 log returns 1997-2007 (decimal fractions).
pub fn table6_returns() -> Vec<f64> {
    vec![
        0.221, 0.266, 0.086, -0.021, -0.189, -0.278, 0.279, 0.043, 0.080, 0.116, -0.026,
    ]
}

pub fn table6_seq() -> ObservationSeq {
    ObservationSeq::from_scalars(&table6_returns()).unwrap()
}

/// Out-of-sample regime sequence (1-based) for 1997-2007.
pub fn table6_regimes() -> Vec<usize> {
    vec![1, 1, 1, 2, 2, 1, 1, 1, 1, 1, 2]
}
