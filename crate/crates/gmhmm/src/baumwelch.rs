//! EM calibration of a Gaussian-mixture HMM: M-step re-estimation,
//! convergence loop with a monotone-likelihood guard, and the
//! sign-split/moment initialization heuristics.

use nalgebra::{DMatrix, DVector};

use crate::density::{apply_variance_floor, floor_epsilon};
use crate::error::{Error, Result};
use crate::inference::{posteriors, Posteriors};
use crate::model::{
    validate_model, GaussianComponent, GaussianMixture, GmHmm, InitialDistribution,
    ObservationSeq, TransitionMatrix,
};
use crate::sim::CounterRng;

/// EM iterations may lose at most this much log-likelihood to rounding; any
/// larger decrease is treated as a numerical bug and reported as an error.
pub const MONOTONICITY_SLACK: f64 = 1e-8;

/// Posterior mass below which a state (or mixture component) is considered
/// starved and re-estimation refuses to continue.
const OCCUPANCY_MIN: f64 = 1e-12;

const RESTART_TAG: u64 = 0x5245_5354; // "REST"

/// Settings for [`fit`].
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Maximum EM iterations.
    pub max_iters: usize,
    /// Stop once `|delta log-likelihood| / max(|log-likelihood|, 1)` falls
    /// below this.
    pub rel_tol: f64,
    /// Variance floor scale; the floor is this times the median diagonal of
    /// the data covariance, added to every re-estimated covariance.
    pub variance_floor_scale: f64,
    /// Seed for randomized restarts.
    pub seed: u64,
    /// Additional randomized restarts beyond the given initialization; the
    /// run with the best final log-likelihood wins, lowest index on ties.
    pub restarts: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-7,
            variance_floor_scale: 1e-6,
            seed: 0,
            restarts: 0,
        }
    }
}

/// Outcome of an EM run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: GmHmm,
    /// log p(O|M) per iteration, starting with the initial model;
    /// non-decreasing within [`MONOTONICITY_SLACK`] per step.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace never empty")
    }
}

/// One M-step: re-estimate `{A, B, pi}` from posteriors computed on the same
/// `(model, observations)` pair. Re-estimated covariances get the variance
/// floor `eps` added to their diagonals.
pub fn m_step(o: &ObservationSeq, post: &Posteriors, eps: f64) -> Result<GmHmm> {
    let t_len = o.len();
    if t_len < 2 || post.xi.len() != t_len - 1 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: t_len,
        });
    }
    let r = post.gamma.ncols();
    let n = o.dim();

    // pi_i = gamma_1(i)
    let pi = InitialDistribution {
        pi: DVector::from_fn(r, |i, _| post.gamma[(0, i)]),
    };

    // a_ij = sum_t xi_t(i,j) / sum_t gamma_t(i), sums over t = 1..T-1
    let mut a = DMatrix::zeros(r, r);
    for i in 0..r {
        let occupancy: f64 = (0..t_len - 1).map(|t| post.gamma[(t, i)]).sum();
        if occupancy < OCCUPANCY_MIN {
            return Err(Error::StarvedState { state: i + 1 });
        }
        for j in 0..r {
            let transitions: f64 = post.xi.iter().map(|x| x[(i, j)]).sum();
            a[(i, j)] = transitions / occupancy;
        }
    }

    // mixture updates per state
    let mut emissions = Vec::with_capacity(r);
    for j in 0..r {
        let gmix = &post.gamma_mix[j];
        let k_len = gmix.ncols();
        let mass_per_comp: Vec<f64> =
            (0..k_len).map(|k| (0..t_len).map(|t| gmix[(t, k)]).sum()).collect();
        let total: f64 = mass_per_comp.iter().sum();
        if total < OCCUPANCY_MIN || mass_per_comp.iter().any(|&d| d < OCCUPANCY_MIN) {
            return Err(Error::StarvedState { state: j + 1 });
        }

        let mut weights = Vec::with_capacity(k_len);
        let mut components = Vec::with_capacity(k_len);
        for k in 0..k_len {
            weights.push(mass_per_comp[k] / total);

            let mut mean = DVector::zeros(n);
            for t in 0..t_len {
                mean += &o.obs[t] * gmix[(t, k)];
            }
            mean /= mass_per_comp[k];

            let mut cov = DMatrix::zeros(n, n);
            for t in 0..t_len {
                let d = &o.obs[t] - &mean;
                cov += (&d * d.transpose()) * gmix[(t, k)];
            }
            cov /= mass_per_comp[k];
            apply_variance_floor(&mut cov, eps);

            components.push(GaussianComponent { mean, cov });
        }
        emissions.push(GaussianMixture::new(weights, components));
    }

    Ok(GmHmm {
        trans: TransitionMatrix { a },
        pi,
        emissions,
    })
}

fn fit_once(o: &ObservationSeq, init: &GmHmm, cfg: &FitConfig, eps: f64) -> Result<FitReport> {
    let mut model = init.clone();
    let mut post = posteriors(&model, o)?;
    let mut trace = vec![post.log_likelihood];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=cfg.max_iters {
        let new_model = m_step(o, &post, eps)?;
        let new_post = posteriors(&new_model, o)?;
        let prev = *trace.last().expect("non-empty");
        let curr = new_post.log_likelihood;
        trace.push(curr);
        iterations = iter;
        model = new_model;
        post = new_post;

        if curr < prev - MONOTONICITY_SLACK {
            return Err(Error::MonotonicityViolated {
                iteration: iter,
                previous: prev,
                current: curr,
            });
        }
        if (curr - prev).abs() / prev.abs().max(1.0) < cfg.rel_tol {
            converged = true;
            break;
        }
    }

    Ok(FitReport {
        model,
        loglik_trace: trace,
        iterations,
        converged,
    })
}

fn perturbed_init(init: &GmHmm, coord_stds: &[f64], rng: &mut CounterRng) -> GmHmm {
    let mut m = init.clone();
    for gm in &mut m.emissions {
        for comp in &mut gm.components {
            for d in 0..comp.mean.len() {
                comp.mean[d] += (2.0 * rng.next_f64() - 1.0) * 0.25 * coord_stds[d];
            }
        }
    }
    m
}

/// Alternate E and M steps from `init` until the relative log-likelihood
/// improvement drops below `cfg.rel_tol` or `cfg.max_iters` is reached.
///
/// With `cfg.restarts > 0`, additional runs start from copies of `init`
/// whose component means are perturbed by up to a quarter of the
/// per-coordinate sample standard deviation (seeded); the best final
/// log-likelihood wins, lowest run index on ties. Each run is deterministic
/// given `(data, init, cfg)`.
pub fn fit(o: &ObservationSeq, init: &GmHmm, cfg: &FitConfig) -> Result<FitReport> {
    validate_model(init).into_result()?;
    if init.dim() != o.dim() {
        return Err(Error::DimensionMismatch {
            context: "model vs observation dimension",
            expected: init.dim(),
            found: o.dim(),
        });
    }
    if o.len() < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: o.len(),
        });
    }
    let eps = floor_epsilon(&o.obs, cfg.variance_floor_scale);
    let coord_stds = per_coordinate_sample_std(o);

    let mut best: Option<FitReport> = None;
    let mut first_err: Option<Error> = None;
    for run in 0..=cfg.restarts {
        let start = if run == 0 {
            init.clone()
        } else {
            let mut rng = CounterRng::substream(cfg.seed, RESTART_TAG, run as u64);
            perturbed_init(init, &coord_stds, &mut rng)
        };
        match fit_once(o, &start, cfg, eps) {
            Ok(report) => {
                let better = best
                    .as_ref()
                    .map_or(true, |b| report.final_loglik() > b.final_loglik());
                if better {
                    best = Some(report);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some(report) => Ok(report),
        None => Err(first_err.expect("at least one run attempted")),
    }
}

/// Initial regime-1 probability from the first observed return: 0.5 at zero,
/// rising linearly toward 1 as the return approaches one sample standard
/// deviation above zero (clamped), falling symmetrically for negative
/// returns. Remaining states share the leftover mass equally. A zero or
/// non-finite sample standard deviation yields the uniform distribution.
pub fn init_pi(first_return: f64, sample_std: f64, r: usize) -> InitialDistribution {
    assert!(r >= 1, "need at least one regime");
    if !(sample_std > 0.0) || !sample_std.is_finite() {
        return InitialDistribution::uniform(r);
    }
    let p1 = if first_return > 0.0 {
        0.5 + 0.5 * (first_return / sample_std).clamp(0.0, 1.0)
    } else {
        0.5 * (1.0 + first_return / sample_std).clamp(0.0, 1.0)
    };
    if r == 1 {
        return InitialDistribution::new(vec![1.0]);
    }
    let rest = (1.0 - p1) / (r - 1) as f64;
    let mut pi = vec![rest; r];
    pi[0] = p1;
    InitialDistribution::new(pi)
}

/// Economically motivated starting transition matrix: the two-regime case is
/// `[[0.6, 0.4], [0.7, 0.3]]` (persistent up state, quick reversion from the
/// down state); for other R the 0.6 self-weight and 0.7 return-to-state-1
/// weight are kept and the residue spread uniformly.
pub fn init_transition(r: usize) -> TransitionMatrix {
    assert!(r >= 1, "need at least one regime");
    match r {
        1 => TransitionMatrix::from_rows(&[vec![1.0]]),
        2 => TransitionMatrix::from_rows(&[vec![0.6, 0.4], vec![0.7, 0.3]]),
        _ => {
            let mut rows = Vec::with_capacity(r);
            let mut first = vec![0.4 / (r - 1) as f64; r];
            first[0] = 0.6;
            rows.push(first);
            for _ in 1..r {
                let mut row = vec![0.3 / (r - 1) as f64; r];
                row[0] = 0.7;
                rows.push(row);
            }
            TransitionMatrix::from_rows(&rows)
        }
    }
}

fn per_coordinate_sample_std(o: &ObservationSeq) -> Vec<f64> {
    let n = o.dim();
    let t = o.len();
    (0..n)
        .map(|d| {
            if t < 2 {
                return 0.0;
            }
            let mean = o.obs.iter().map(|x| x[d]).sum::<f64>() / t as f64;
            let ss = o.obs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>();
            (ss / (t - 1) as f64).sqrt()
        })
        .collect()
}

fn moments_of(indices: &[usize], o: &ObservationSeq) -> (DVector<f64>, DMatrix<f64>) {
    let n = o.dim();
    let count = indices.len() as f64;
    let mut mean = DVector::zeros(n);
    for &i in indices {
        mean += &o.obs[i];
    }
    mean /= count;
    let mut cov = DMatrix::zeros(n, n);
    for &i in indices {
        let d = &o.obs[i] - &mean;
        cov += &d * d.transpose();
    }
    cov /= count - 1.0;
    (mean, cov)
}

fn moment_split_mixture(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    k: usize,
    eps: f64,
) -> GaussianMixture {
    let n = mean.len();
    let sd = DVector::from_fn(n, |d, _| cov[(d, d)].max(0.0).sqrt());
    let mut components = Vec::with_capacity(k);
    for ki in 0..k {
        let offset = if k == 1 {
            0.0
        } else {
            0.5 * (2.0 * ki as f64 - (k - 1) as f64) / (k - 1) as f64
        };
        let mut comp_cov = cov.clone();
        apply_variance_floor(&mut comp_cov, eps);
        components.push(GaussianComponent {
            mean: mean + &sd * offset,
            cov: comp_cov,
        });
    }
    GaussianMixture::new(vec![1.0 / k as f64; k], components)
}

/// Per-state starting mixtures: the data is split by the sign of the first
/// coordinate for R = 2 (positive returns to state 1), by descending
/// quantiles of the first coordinate for larger R, and each split is fitted
/// with a deterministic moment split — K components at the split mean offset
/// by up to half a split standard deviation, equal weights, all sharing the
/// split covariance. A split with fewer than n + 1 points falls back to the
/// global moments for that state, with a warning.
pub fn init_emissions(
    o: &ObservationSeq,
    r: usize,
    k: usize,
    floor_eps: f64,
) -> Result<Vec<GaussianMixture>> {
    assert!(r >= 1 && k >= 1, "need at least one regime and one component");
    let t_len = o.len();
    if t_len < 2 {
        return Err(Error::InsufficientData {
            required: 2,
            actual: t_len,
        });
    }
    let n = o.dim();

    let splits: Vec<Vec<usize>> = if r == 1 {
        vec![(0..t_len).collect()]
    } else if r == 2 {
        let pos: Vec<usize> = (0..t_len).filter(|&t| o.obs[t][0] > 0.0).collect();
        let non_pos: Vec<usize> = (0..t_len).filter(|&t| o.obs[t][0] <= 0.0).collect();
        vec![pos, non_pos]
    } else {
        let mut order: Vec<usize> = (0..t_len).collect();
        order.sort_by(|&a, &b| o.obs[b][0].partial_cmp(&o.obs[a][0]).unwrap());
        (0..r)
            .map(|g| {
                let lo = g * t_len / r;
                let hi = (g + 1) * t_len / r;
                order[lo..hi].to_vec()
            })
            .collect()
    };

    let all: Vec<usize> = (0..t_len).collect();
    let global = moments_of(&all, o);
    let mut mixtures = Vec::with_capacity(r);
    for (j, split) in splits.iter().enumerate() {
        let (mean, cov) = if split.len() < n + 1 {
            log::warn!(
                "state {} split has {} points (< n + 1 = {}); falling back to global moments",
                j + 1,
                split.len(),
                n + 1
            );
            global.clone()
        } else {
            moments_of(split, o)
        };
        mixtures.push(moment_split_mixture(&mean, &cov, k, floor_eps));
    }
    Ok(mixtures)
}

/// Full starting model for [`fit`]: `init_pi` from the first return,
/// `init_transition`, and `init_emissions` with the variance floor derived
/// from the data.
pub fn initial_model(o: &ObservationSeq, r: usize, k: usize, floor_scale: f64) -> Result<GmHmm> {
    if o.is_empty() {
        return Err(Error::EmptySequence);
    }
    let first = o.obs[0][0];
    let s = per_coordinate_sample_std(o)[0];
    let eps = floor_epsilon(&o.obs, floor_scale);
    Ok(GmHmm {
        trans: init_transition(r),
        pi: init_pi(first, s, r),
        emissions: init_emissions(o, r, k, eps)?,
    })
}
