//! Seeded simulation of regime paths and observations from a model.
//!
//! Randomness comes from an explicitly specified counter-based generator so
//! that a port in another language can reproduce the same distributions (and
//! this implementation reproduces itself bit for bit):
//!
//! * the n-th output of a stream with key `k` is
//!   `mix64(k + n * 0x9E3779B97F4A7C15)` where `mix64` is the SplitMix64
//!   finalizer;
//! * a stream key is `mix64(seed ^ tag)`, and an indexed sub-stream key is
//!   `mix64(mix64(seed ^ tag) + index * 0x9E3779B97F4A7C15)`;
//! * the regime path is drawn from the `STATE_TAG` stream, one draw per
//!   step, and each observation from its own per-step `EMISSION_TAG`
//!   sub-stream (so the draws consumed by one emission never shift another);
//! * uniforms are the top 53 bits scaled to [0, 1); Gaussian pairs use the
//!   Marsaglia polar method; multinormal draws are `mean + L z` with `L` the
//!   Cholesky factor of the covariance.

use nalgebra::DVector;

use crate::density::prepare_mixture;
use crate::error::Result;
use crate::model::{validate_model, GmHmm, ObservationSeq, StateSequence};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const STATE_TAG: u64 = 0x5354_4154_4553; // "STATES"
const EMISSION_TAG: u64 = 0x454D_4954; // "EMIT"

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based pseudo-random stream; see the module docs for the exact
/// output rule.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
    spare_gaussian: Option<f64>,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        Self {
            key,
            counter: 0,
            spare_gaussian: None,
        }
    }

    /// Stream identified by `(seed, tag)`.
    pub fn stream(seed: u64, tag: u64) -> Self {
        Self::new(mix64(seed ^ tag))
    }

    /// Indexed sub-stream of `(seed, tag)`.
    pub fn substream(seed: u64, tag: u64, index: u64) -> Self {
        Self::new(mix64(
            mix64(seed ^ tag).wrapping_add(index.wrapping_mul(GOLDEN_GAMMA)),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Marsaglia polar method.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let scale = (-2.0 * s.ln() / s).sqrt();
                self.spare_gaussian = Some(v * scale);
                return u * scale;
            }
        }
    }

    /// Index drawn from a probability vector: the smallest k with
    /// `p_0 + ... + p_k > u`.
    pub fn next_categorical(&mut self, probs: &DVector<f64>) -> usize {
        let u = self.next_f64();
        let mut acc = 0.0;
        for (k, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        probs.len() - 1
    }
}

/// A simulated regime path with its observations.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub states: StateSequence,
    pub obs: ObservationSeq,
    pub seed: u64,
}

/// Draw `q_1 ~ pi`, `q_{t+1} ~ A[q_t]`, and each observation from the
/// regime's mixture (component by weight, then a multinormal draw).
/// Fully reproducible from `seed`.
pub fn simulate(m: &GmHmm, t_len: usize, seed: u64) -> Result<SimOutput> {
    validate_model(m).into_result()?;
    if t_len == 0 {
        return Err(crate::error::Error::EmptySequence);
    }
    let n = m.dim();

    // Cholesky factors per (state, component)
    let mut factors = Vec::with_capacity(m.r());
    for gm in &m.emissions {
        let _ = prepare_mixture(gm)?; // PD check with a useful error
        let per_comp: Vec<_> = gm
            .components
            .iter()
            .map(|c| c.cov.clone().cholesky().expect("checked above").l())
            .collect();
        factors.push(per_comp);
    }

    let mut state_rng = CounterRng::stream(seed, STATE_TAG);
    let mut states = Vec::with_capacity(t_len);
    let mut q = state_rng.next_categorical(&m.pi.pi);
    states.push(q);
    for _ in 1..t_len {
        let row = m.trans.a.row(q).transpose();
        q = state_rng.next_categorical(&row);
        states.push(q);
    }

    let mut obs = Vec::with_capacity(t_len);
    for (t, &qt) in states.iter().enumerate() {
        let mut rng = CounterRng::substream(seed, EMISSION_TAG, t as u64);
        let gm = &m.emissions[qt];
        let k = rng.next_categorical(&gm.weights);
        let z = DVector::from_fn(n, |_, _| rng.next_gaussian());
        let x = &gm.components[k].mean + &factors[qt][k] * z;
        obs.push(x);
    }

    Ok(SimOutput {
        states: StateSequence { states },
        obs: ObservationSeq { obs, labels: None },
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        GaussianComponent, GaussianMixture, InitialDistribution, TransitionMatrix,
    };

    fn degenerate_model() -> GmHmm {
        GmHmm {
            trans: TransitionMatrix::from_rows(&[vec![1.0]]),
            pi: InitialDistribution::new(vec![1.0]),
            emissions: vec![GaussianMixture::single(GaussianComponent::scalar(
                0.0, 1e-12,
            ))],
        }
    }

    #[test]
    fn degenerate_model_pins_state_and_collapses_obs() {
        let out = simulate(&degenerate_model(), 50, 9).unwrap();
        assert!(out.states.states.iter().all(|&s| s == 0));
        assert!(out.obs.obs.iter().all(|o| o[0].abs() < 1e-4));
    }

    #[test]
    fn absorbing_start_stays_in_state_one() {
        let m = GmHmm {
            trans: TransitionMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            pi: InitialDistribution::new(vec![1.0, 0.0]),
            emissions: vec![
                GaussianMixture::single(GaussianComponent::scalar(0.0, 1.0)),
                GaussianMixture::single(GaussianComponent::scalar(5.0, 1.0)),
            ],
        };
        let out = simulate(&m, 200, 1234).unwrap();
        assert!(out.states.states.iter().all(|&s| s == 0));
    }

    #[test]
    fn same_seed_is_bit_identical_and_seeds_differ() {
        let m = crate::testutil::paper_model();
        let a = simulate(&m, 64, 7).unwrap();
        let b = simulate(&m, 64, 7).unwrap();
        assert_eq!(a.states.states, b.states.states);
        for (x, y) in a.obs.obs.iter().zip(&b.obs.obs) {
            assert_eq!(x[0].to_bits(), y[0].to_bits());
        }
        let c = simulate(&m, 64, 8).unwrap();
        assert_ne!(a.obs.obs[0][0].to_bits(), c.obs.obs[0][0].to_bits());
    }

    #[test]
    fn uniform_output_covers_unit_interval() {
        let mut rng = CounterRng::stream(3, 77);
        let vals: Vec<f64> = (0..4096).map(|_| rng.next_f64()).collect();
        assert!(vals.iter().all(|&v| (0.0..1.0).contains(&v)));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 0.5).abs() < 0.03);
    }

    #[test]
    fn gaussian_moments_are_sane() {
        let mut rng = CounterRng::stream(11, 5);
        let n = 200_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.next_gaussian();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn categorical_respects_cumulative_rule() {
        let probs = DVector::from_vec(vec![0.2, 0.5, 0.3]);
        let mut counts = [0usize; 3];
        let mut rng = CounterRng::stream(21, 4);
        let n = 100_000;
        for _ in 0..n {
            counts[rng.next_categorical(&probs)] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!((freq - probs[k]).abs() < 0.01, "component {k}: {freq}");
        }
    }
}
