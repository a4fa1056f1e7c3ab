//! Forward, backward, likelihood, posterior, and Viterbi computations over a
//! fixed model.
//!
//! The forward and backward recursions are run with per-step sum
//! normalization: every unscaled step is divided by its sum, the divisor is
//! recorded in `scales`, and `log p(O|M) = sum_t ln scales[t]`. This keeps
//! every stored quantity in a sane floating-point range for arbitrarily long
//! sequences while matching the textbook recursions term for term. Viterbi
//! runs fully in log space instead and needs no scaling.

use nalgebra::{DMatrix, DVector};

use crate::density::{logsumexp_weighted, prepare_mixture, LOG_DENSITY_MIN};
use crate::error::{Error, Result};
use crate::model::{GmHmm, ObservationSeq, StateSequence};

/// Scaled trellis: forward/backward variables, per-step normalizers, and the
/// log-likelihood they imply.
#[derive(Debug, Clone)]
pub struct TrellisResult {
    pub log_likelihood: f64,
    /// T x R; each row sums to 1 under the scaling convention.
    pub alpha_hat: DMatrix<f64>,
    /// T x R; last row is all ones (unscaled termination convention).
    pub beta_hat: DMatrix<f64>,
    /// Length T, strictly positive.
    pub scales: DVector<f64>,
}

/// Output of the forward pass alone.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub log_likelihood: f64,
    pub alpha_hat: DMatrix<f64>,
    pub scales: DVector<f64>,
}

/// State, pairwise-state, and state-component posteriors given the full
/// observation sequence.
#[derive(Debug, Clone)]
pub struct Posteriors {
    /// gamma[(t, i)] = p(q_t = i | O, M).
    pub gamma: DMatrix<f64>,
    /// xi[t][(i, j)] = p(q_t = i, q_{t+1} = j | O, M); length T-1.
    pub xi: Vec<DMatrix<f64>>,
    /// gamma_mix[j][(t, k)] = p(q_t = j, component k | O, M); one T x K_j
    /// matrix per regime.
    pub gamma_mix: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

/// Most likely regime path and its joint log-probability with the data.
#[derive(Debug, Clone)]
pub struct DecodedPath {
    pub path: StateSequence,
    /// log of max over Q of p(O, Q | M); never exceeds the log-likelihood.
    pub log_joint: f64,
}

/// Per-step emission log-densities, computed once per pass.
pub(crate) struct EmissionTable {
    /// log_b[(t, j)] = ln b_j(O_t), clamped at `LOG_DENSITY_MIN`.
    pub log_b: DMatrix<f64>,
    /// log_comp[j][(t, k)] = ln(c_jk p_jk(O_t)), unclamped.
    pub log_comp: Vec<DMatrix<f64>>,
}

pub(crate) fn emission_table(m: &GmHmm, o: &ObservationSeq) -> Result<EmissionTable> {
    if o.obs.is_empty() {
        return Err(Error::EmptySequence);
    }
    if m.dim() != o.dim() {
        return Err(Error::DimensionMismatch {
            context: "model vs observation dimension",
            expected: m.dim(),
            found: o.dim(),
        });
    }
    let (t_len, r) = (o.len(), m.r());
    let mut log_b = DMatrix::zeros(t_len, r);
    let mut log_comp = Vec::with_capacity(r);
    for (j, gm) in m.emissions.iter().enumerate() {
        let comps = prepare_mixture(gm)?;
        let k = gm.k();
        let mut lc = DMatrix::zeros(t_len, k);
        for (t, x) in o.obs.iter().enumerate() {
            for (ki, comp) in comps.iter().enumerate() {
                lc[(t, ki)] = gm.weights[ki].ln() + comp.logpdf(x);
            }
            let lse = logsumexp_weighted(x, &gm.weights, &comps);
            log_b[(t, j)] = lse.max(LOG_DENSITY_MIN);
        }
        log_comp.push(lc);
    }
    Ok(EmissionTable { log_b, log_comp })
}

fn forward_with_table(m: &GmHmm, table: &EmissionTable) -> Result<ForwardResult> {
    let (t_len, r) = (table.log_b.nrows(), m.r());
    let mut alpha_hat = DMatrix::zeros(t_len, r);
    let mut scales = DVector::zeros(t_len);

    for i in 0..r {
        alpha_hat[(0, i)] = m.pi.pi[i] * table.log_b[(0, i)].exp();
    }
    for t in 1..=t_len {
        let t = t - 1;
        if t > 0 {
            for j in 0..r {
                let mut acc = 0.0;
                for i in 0..r {
                    acc += alpha_hat[(t - 1, i)] * m.trans.a[(i, j)];
                }
                alpha_hat[(t, j)] = acc * table.log_b[(t, j)].exp();
            }
        }
        let scale: f64 = (0..r).map(|i| alpha_hat[(t, i)]).sum();
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "forward normalizer is {scale} at step {}",
                t + 1
            )));
        }
        for i in 0..r {
            alpha_hat[(t, i)] /= scale;
        }
        scales[t] = scale;
    }
    let log_likelihood = scales.iter().map(|s| s.ln()).sum();
    Ok(ForwardResult {
        log_likelihood,
        alpha_hat,
        scales,
    })
}

/// Forward pass: scaled forward variables, per-step normalizers, and
/// `log p(O|M)`. Costs Theta(R^2 T) plus one density evaluation per
/// (state, step).
pub fn forward(m: &GmHmm, o: &ObservationSeq) -> Result<ForwardResult> {
    let table = emission_table(m, o)?;
    forward_with_table(m, &table)
}

fn backward_with_table(
    m: &GmHmm,
    table: &EmissionTable,
    scales: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (t_len, r) = (table.log_b.nrows(), m.r());
    if scales.len() != t_len {
        return Err(Error::ScaleLengthMismatch {
            expected: t_len,
            found: scales.len(),
        });
    }
    let mut beta_hat = DMatrix::zeros(t_len, r);
    for i in 0..r {
        beta_hat[(t_len - 1, i)] = 1.0;
    }
    for t in (0..t_len - 1).rev() {
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..r {
                acc += m.trans.a[(i, j)] * table.log_b[(t + 1, j)].exp() * beta_hat[(t + 1, j)];
            }
            beta_hat[(t, i)] = acc / scales[t + 1];
        }
    }
    Ok(beta_hat)
}

/// Backward pass under the scaling produced by [`forward`] on the same
/// `(m, o)`: termination `beta_T(i) = 1`, each earlier step divided by
/// `scales[t + 1]`.
pub fn backward(m: &GmHmm, o: &ObservationSeq, scales: &DVector<f64>) -> Result<DMatrix<f64>> {
    let table = emission_table(m, o)?;
    backward_with_table(m, &table, scales)
}

/// Both passes over a single emission table.
pub fn forward_backward(m: &GmHmm, o: &ObservationSeq) -> Result<TrellisResult> {
    let table = emission_table(m, o)?;
    let fwd = forward_with_table(m, &table)?;
    let beta_hat = backward_with_table(m, &table, &fwd.scales)?;
    Ok(TrellisResult {
        log_likelihood: fwd.log_likelihood,
        alpha_hat: fwd.alpha_hat,
        beta_hat,
        scales: fwd.scales,
    })
}

/// `log p(O|M)`: thin wrapper over the forward pass.
pub fn loglikelihood(m: &GmHmm, o: &ObservationSeq) -> Result<f64> {
    Ok(forward(m, o)?.log_likelihood)
}

/// Full posterior decomposition used by the Baum-Welch M-step.
///
/// For a single observation (T = 1) `xi` is empty and `gamma` is the
/// normalized product of the initial distribution and the emission
/// densities.
pub fn posteriors(m: &GmHmm, o: &ObservationSeq) -> Result<Posteriors> {
    let table = emission_table(m, o)?;
    let fwd = forward_with_table(m, &table)?;
    let beta_hat = backward_with_table(m, &table, &fwd.scales)?;
    let (t_len, r) = (o.len(), m.r());

    let mut gamma = DMatrix::zeros(t_len, r);
    for t in 0..t_len {
        let mut sum = 0.0;
        for i in 0..r {
            let g = fwd.alpha_hat[(t, i)] * beta_hat[(t, i)];
            gamma[(t, i)] = g;
            sum += g;
        }
        for i in 0..r {
            gamma[(t, i)] /= sum;
        }
    }

    let mut xi = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len.saturating_sub(1) {
        let mut m_t = DMatrix::zeros(r, r);
        for i in 0..r {
            for j in 0..r {
                m_t[(i, j)] = fwd.alpha_hat[(t, i)]
                    * m.trans.a[(i, j)]
                    * table.log_b[(t + 1, j)].exp()
                    * beta_hat[(t + 1, j)]
                    / fwd.scales[t + 1];
            }
        }
        xi.push(m_t);
    }

    let mut gamma_mix = Vec::with_capacity(r);
    for (j, gm) in m.emissions.iter().enumerate() {
        let k = gm.k();
        let mut gmix = DMatrix::zeros(t_len, k);
        for t in 0..t_len {
            for ki in 0..k {
                gmix[(t, ki)] =
                    gamma[(t, j)] * (table.log_comp[j][(t, ki)] - table.log_b[(t, j)]).exp();
            }
        }
        gamma_mix.push(gmix);
    }

    Ok(Posteriors {
        gamma,
        xi,
        gamma_mix,
        log_likelihood: fwd.log_likelihood,
    })
}

/// Most likely regime path by max-product dynamic programming in log space.
/// Ties break toward the lower regime index, deterministically.
pub fn viterbi(m: &GmHmm, o: &ObservationSeq) -> Result<DecodedPath> {
    let table = emission_table(m, o)?;
    let (t_len, r) = (o.len(), m.r());

    let log_a = m.trans.a.map(f64::ln);
    let mut delta = DMatrix::zeros(t_len, r);
    let mut back = vec![vec![0usize; r]; t_len];

    for i in 0..r {
        delta[(0, i)] = m.pi.pi[i].ln() + table.log_b[(0, i)];
    }
    for t in 1..t_len {
        for j in 0..r {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for i in 0..r {
                let v = delta[(t - 1, i)] + log_a[(i, j)];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            delta[(t, j)] = best + table.log_b[(t, j)];
            back[t][j] = arg;
        }
    }

    let mut best = f64::NEG_INFINITY;
    let mut last = 0usize;
    for i in 0..r {
        if delta[(t_len - 1, i)] > best {
            best = delta[(t_len - 1, i)];
            last = i;
        }
    }
    let mut states = vec![0usize; t_len];
    states[t_len - 1] = last;
    for t in (0..t_len - 1).rev() {
        states[t] = back[t + 1][states[t + 1]];
    }
    Ok(DecodedPath {
        path: StateSequence { states },
        log_joint: best,
    })
}
