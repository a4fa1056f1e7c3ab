//! Model parameter types shared by every other module, their validation,
//! and the JSON serialization schema.
//!
//! Regime indices are 0-based everywhere inside the library; the CLI and
//! all file formats render them 1-based.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for stochasticity and symmetry checks. Far below
/// estimation noise, above accumulated rounding over sequences up to 1e6 steps.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Row-stochastic matrix of regime transition probabilities
/// `a[(i, j)] = p(q_{t+1} = j | q_t = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub a: DMatrix<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        Self {
            a: DMatrix::from_fn(r, c, |i, j| rows[i][j]),
        }
    }

    /// Number of regimes.
    pub fn r(&self) -> usize {
        self.a.nrows()
    }
}

/// Probabilities of the regime at t = 1, `pi[i] = p(q_1 = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialDistribution {
    pub pi: DVector<f64>,
}

impl InitialDistribution {
    pub fn new(pi: Vec<f64>) -> Self {
        Self {
            pi: DVector::from_vec(pi),
        }
    }

    pub fn uniform(r: usize) -> Self {
        Self {
            pi: DVector::from_element(r, 1.0 / r as f64),
        }
    }
}

/// One multinormal mixture component: mean log-return vector and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianComponent {
    pub fn scalar(mean: f64, var: f64) -> Self {
        Self {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-regime emission law: a convex mixture of multinormal components.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: DVector<f64>,
    pub components: Vec<GaussianComponent>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<GaussianComponent>) -> Self {
        Self {
            weights: DVector::from_vec(weights),
            components,
        }
    }

    /// Single-component mixture (the plain-Gaussian case).
    pub fn single(component: GaussianComponent) -> Self {
        Self {
            weights: DVector::from_element(1, 1.0),
            components: vec![component],
        }
    }

    /// Number of mixture components.
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, GaussianComponent::dim)
    }
}

/// Full model `{A, B, pi}`: transition matrix, per-regime Gaussian mixtures,
/// initial regime probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct GmHmm {
    pub trans: TransitionMatrix,
    pub pi: InitialDistribution,
    pub emissions: Vec<GaussianMixture>,
}

impl GmHmm {
    /// Number of regimes.
    pub fn r(&self) -> usize {
        self.trans.r()
    }

    /// Observation dimension.
    pub fn dim(&self) -> usize {
        self.emissions.first().map_or(0, GaussianMixture::dim)
    }

    /// Same model with the initial distribution replaced.
    pub fn with_pi(&self, pi: InitialDistribution) -> Self {
        Self {
            trans: self.trans.clone(),
            pi,
            emissions: self.emissions.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&ModelFile::from_model(self)?)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Sequence of T observation vectors, optionally labelled (e.g. by year).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeq {
    pub obs: Vec<DVector<f64>>,
    pub labels: Option<Vec<String>>,
}

impl ObservationSeq {
    pub fn new(obs: Vec<DVector<f64>>, labels: Option<Vec<String>>) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let n = obs[0].len();
        for (t, o) in obs.iter().enumerate() {
            if o.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "observation sequence",
                    expected: n,
                    found: o.len(),
                });
            }
            let _ = t;
        }
        if let Some(ref l) = labels {
            if l.len() != obs.len() {
                return Err(Error::DimensionMismatch {
                    context: "observation labels",
                    expected: obs.len(),
                    found: l.len(),
                });
            }
        }
        Ok(Self { obs, labels })
    }

    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(
            values.iter().map(|&v| DVector::from_element(1, v)).collect(),
            None,
        )
    }

    /// Sequence length T.
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Observation dimension n.
    pub fn dim(&self) -> usize {
        self.obs[0].len()
    }

    /// First coordinate of every observation (the return series for n = 1).
    pub fn first_coords(&self) -> Vec<f64> {
        self.obs.iter().map(|o| o[0]).collect()
    }
}

/// Regime indices, 0-based. Use [`StateSequence::one_based`] for output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSequence {
    pub states: Vec<usize>,
}

impl StateSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// 1-based regime indices as used by the CLI and file formats.
    pub fn one_based(&self) -> Vec<usize> {
        self.states.iter().map(|&s| s + 1).collect()
    }
}

/// One failed model constraint: the field, the constraint, and how far off.
#[derive(Debug, Clone)]
pub struct Violation {
    pub field: String,
    pub constraint: String,
    pub residual: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} (residual {:e})",
            self.field, self.constraint, self.residual
        )
    }
}

/// Verdict of [`validate_model`]: ok, or the list of violations.
#[derive(Debug, Clone, Default)]
pub struct Validation {
    pub violations: Vec<Violation>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: String, constraint: &str, residual: f64) {
        self.violations.push(Violation {
            field,
            constraint: constraint.to_string(),
            residual,
        });
    }

    /// Turn the verdict into a `Result`, for callers that cannot proceed
    /// with an invalid model.
    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidModel(self))
        }
    }
}

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "  {v}")?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of the model and reports each failure
/// with the offending field and measured residual. Idempotent and
/// side-effect free.
pub fn validate_model(m: &GmHmm) -> Validation {
    let mut v = Validation::default();
    let r = m.trans.a.nrows();

    if r == 0 {
        v.push("transition".into(), "R >= 1", 0.0);
        return v;
    }
    if m.trans.a.ncols() != r {
        v.push(
            "transition".into(),
            "matrix must be square",
            (m.trans.a.ncols() as f64) - (r as f64),
        );
        return v;
    }

    for i in 0..r {
        let mut sum = 0.0;
        for j in 0..r {
            let a = m.trans.a[(i, j)];
            if !(0.0..=1.0).contains(&a) || !a.is_finite() {
                v.push(
                    format!("transition[{}][{}]", i + 1, j + 1),
                    "entry in [0, 1]",
                    if a.is_finite() { a.clamp(-1.0, 2.0) - a.clamp(0.0, 1.0) } else { f64::NAN },
                );
            }
            sum += a;
        }
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            v.push(
                format!("transition row {}", i + 1),
                &format!("row sum {sum} != 1"),
                (sum - 1.0).abs(),
            );
        }
    }

    if m.pi.pi.len() != r {
        v.push(
            "pi".into(),
            "length equals R",
            m.pi.pi.len() as f64 - r as f64,
        );
    } else {
        let mut sum = 0.0;
        for (i, &p) in m.pi.pi.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                v.push(format!("pi[{}]", i + 1), "entry in [0, 1]", p);
            }
            sum += p;
        }
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            v.push(
                "pi".into(),
                &format!("sum {sum} != 1"),
                (sum - 1.0).abs(),
            );
        }
    }

    if m.emissions.len() != r {
        v.push(
            "emissions".into(),
            "one mixture per regime",
            m.emissions.len() as f64 - r as f64,
        );
        return v;
    }

    let n = m.dim();
    for (j, gm) in m.emissions.iter().enumerate() {
        let k = gm.k();
        if k == 0 || gm.components.len() != k {
            v.push(
                format!("mixtures[{}]", j + 1),
                "weights and components must agree and K >= 1",
                gm.components.len() as f64 - k as f64,
            );
            continue;
        }
        let mut wsum = 0.0;
        for (ki, &w) in gm.weights.iter().enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                v.push(
                    format!("mixtures[{}].weights[{}]", j + 1, ki + 1),
                    "weight >= 0",
                    w,
                );
            }
            wsum += w;
        }
        if (wsum - 1.0).abs() > STOCHASTIC_TOL {
            v.push(
                format!("mixtures[{}].weights", j + 1),
                &format!("sum {wsum} != 1"),
                (wsum - 1.0).abs(),
            );
        }
        for (ki, c) in gm.components.iter().enumerate() {
            let field = format!("mixtures[{}].components[{}]", j + 1, ki + 1);
            if c.dim() != n {
                v.push(
                    format!("{field}.mean"),
                    "all components share dimension n",
                    c.dim() as f64 - n as f64,
                );
                continue;
            }
            if c.cov.nrows() != n || c.cov.ncols() != n {
                v.push(
                    format!("{field}.cov"),
                    "covariance is n x n",
                    c.cov.nrows() as f64 - n as f64,
                );
                continue;
            }
            let mut asym: f64 = 0.0;
            for a in 0..n {
                for b in (a + 1)..n {
                    asym = asym.max((c.cov[(a, b)] - c.cov[(b, a)]).abs());
                }
            }
            if asym > STOCHASTIC_TOL {
                v.push(
                    format!("{field}.cov"),
                    "symmetric within 1e-9",
                    asym,
                );
                continue;
            }
            if c.cov.iter().any(|x| !x.is_finite()) {
                v.push(format!("{field}.cov"), "entries finite", f64::NAN);
                continue;
            }
            if c.cov.clone().cholesky().is_none() {
                let min_eig = smallest_eigenvalue(&c.cov);
                v.push(
                    format!("{field}.cov"),
                    "positive definite",
                    min_eig,
                );
            }
        }
    }
    v
}

/// Smallest eigenvalue of a symmetric matrix (used for diagnostics).
pub fn smallest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    // symmetrize first so SymmetricEigen sees exact symmetry
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

// --- JSON schema ------------------------------------------------------------
//
// {
//   "R": 2, "n": 1, "K": 2,
//   "transition": [row-major R*R],
//   "pi": [R],
//   "mixtures": [ { "weights": [K], "means": [[n]; K], "covs": [[row-major n*n]; K] }; R ]
// }
//
// serde_json writes floats in the shortest form that round-trips exactly.

#[derive(Debug, Serialize, Deserialize)]
struct MixtureFile {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    #[serde(rename = "R")]
    r: usize,
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    transition: Vec<f64>,
    pi: Vec<f64>,
    mixtures: Vec<MixtureFile>,
}

impl ModelFile {
    fn from_model(m: &GmHmm) -> Result<Self> {
        let r = m.r();
        let n = m.dim();
        let k = m.emissions.first().map_or(0, GaussianMixture::k);
        for gm in &m.emissions {
            if gm.k() != k {
                return Err(Error::InvalidParameter(
                    "model file format requires the same K for every regime".into(),
                ));
            }
        }
        let transition = (0..r)
            .flat_map(|i| (0..r).map(move |j| (i, j)))
            .map(|(i, j)| m.trans.a[(i, j)])
            .collect();
        let mixtures = m
            .emissions
            .iter()
            .map(|gm| MixtureFile {
                weights: gm.weights.iter().cloned().collect(),
                means: gm
                    .components
                    .iter()
                    .map(|c| c.mean.iter().cloned().collect())
                    .collect(),
                covs: gm
                    .components
                    .iter()
                    .map(|c| {
                        (0..n)
                            .flat_map(|a| (0..n).map(move |b| (a, b)))
                            .map(|(a, b)| c.cov[(a, b)])
                            .collect()
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            r,
            n,
            k,
            transition,
            pi: m.pi.pi.iter().cloned().collect(),
            mixtures,
        })
    }

    fn into_model(self) -> Result<GmHmm> {
        let (r, n, k) = (self.r, self.n, self.k);
        if r == 0 || n == 0 || k == 0 {
            return Err(Error::InvalidParameter(
                "model file requires R, n, K >= 1".into(),
            ));
        }
        if self.transition.len() != r * r {
            return Err(Error::InvalidParameter(format!(
                "transition has {} entries, expected {}",
                self.transition.len(),
                r * r
            )));
        }
        if self.pi.len() != r {
            return Err(Error::InvalidParameter(format!(
                "pi has {} entries, expected {}",
                self.pi.len(),
                r
            )));
        }
        if self.mixtures.len() != r {
            return Err(Error::InvalidParameter(format!(
                "{} mixtures, expected {}",
                self.mixtures.len(),
                r
            )));
        }
        let trans = TransitionMatrix {
            a: DMatrix::from_fn(r, r, |i, j| self.transition[i * r + j]),
        };
        let mut emissions = Vec::with_capacity(r);
        for (j, mix) in self.mixtures.into_iter().enumerate() {
            if mix.weights.len() != k || mix.means.len() != k || mix.covs.len() != k {
                return Err(Error::InvalidParameter(format!(
                    "mixture {} does not have K = {} weights/means/covs",
                    j + 1,
                    k
                )));
            }
            let mut components = Vec::with_capacity(k);
            for (ki, (mean, cov)) in mix.means.into_iter().zip(mix.covs).enumerate() {
                if mean.len() != n || cov.len() != n * n {
                    return Err(Error::InvalidParameter(format!(
                        "mixture {} component {} has wrong dimension",
                        j + 1,
                        ki + 1
                    )));
                }
                components.push(GaussianComponent {
                    mean: DVector::from_vec(mean),
                    cov: DMatrix::from_fn(n, n, |a, b| cov[a * n + b]),
                });
            }
            emissions.push(GaussianMixture {
                weights: DVector::from_vec(mix.weights),
                components,
            });
        }
        let model = GmHmm {
            trans,
            pi: InitialDistribution::new(self.pi),
            emissions,
        };
        validate_model(&model).into_result()?;
        Ok(model)
    }
}
