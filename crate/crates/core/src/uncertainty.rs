//! Per-sample uncertainty scores.
//!
//! Two estimators are provided. The exact one evaluates the trace
//! `Tr((ψ ⊗ x xᵀ) M⁻¹)` (coreset) or `Tr((φ ⊗ x xᵀ) M⁻¹)` (active learning)
//! against a factorized Fisher information. The ensemble one fits `M` models
//! on disjoint probe shards (or bootstrap resamples) and replaces `M⁻¹` by the
//! sample covariance of their logits; multiplied by the per-member training
//! size it approximates the exact quantity.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CopsError, Result};
use crate::model::{
    dot, phi_from_probs, probabilities_unchecked, score_from_probs, Coefficients, Dataset, FisherInfo,
};
use crate::solver::{fit_mle, FitConfig};

/// Negative quadratic forms down to this magnitude are treated as round-off.
const ROUND_OFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// One member per disjoint, equally sized shard of a shuffled probe set.
    IndependentSplits,
    /// One member per with-replacement resample of the full probe set.
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Labels known: scores use `ψ(β; x, y)`.
    Coreset,
    /// Labels unknown: scores use `φ(β; x)`.
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    Ensemble,
}

/// Models fitted on probe data, plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnsembleDoc", into = "EnsembleDoc")]
pub struct ProbeEnsemble {
    members: Vec<Coefficients>,
    mean: Coefficients,
    probe_size: usize,
    mode: EnsembleMode,
}

#[derive(Serialize, Deserialize)]
struct EnsembleDoc {
    mode: EnsembleMode,
    probe_size: usize,
    members: Vec<Coefficients>,
}

impl TryFrom<EnsembleDoc> for ProbeEnsemble {
    type Error = CopsError;

    fn try_from(doc: EnsembleDoc) -> Result<Self> {
        ProbeEnsemble::from_members(doc.members, doc.probe_size, doc.mode)
    }
}

impl From<ProbeEnsemble> for EnsembleDoc {
    fn from(e: ProbeEnsemble) -> Self {
        EnsembleDoc {
            mode: e.mode,
            probe_size: e.probe_size,
            members: e.members,
        }
    }
}

impl ProbeEnsemble {
    pub fn from_members(members: Vec<Coefficients>, probe_size: usize, mode: EnsembleMode) -> Result<Self> {
        if members.len() < 2 {
            return Err(CopsError::invalid(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        if probe_size == 0 {
            return Err(CopsError::invalid("ensemble probe_size must be positive"));
        }
        let mean = Coefficients::mean(&members)?;
        Ok(Self {
            members,
            mean,
            probe_size,
            mode,
        })
    }

    pub fn members(&self) -> &[Coefficients] {
        &self.members
    }

    /// `β̃`, the member average.
    pub fn mean(&self) -> &Coefficients {
        &self.mean
    }

    /// Training-set size `n'` of each member.
    pub fn probe_size(&self) -> usize {
        self.probe_size
    }

    pub fn mode(&self) -> EnsembleMode {
        self.mode
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn classes(&self) -> usize {
        self.mean.classes()
    }

    pub fn dim(&self) -> usize {
        self.mean.dim()
    }
}

/// Fits `m` probe models. Member `i` of a bootstrap ensemble draws its
/// resample from a generator seeded with `seed + i`; independent splits
/// shuffle once with `seed` and cut `m` equal shards (the remainder of
/// `n / m` is left unused).
pub fn train_ensemble(
    probe: &Dataset,
    m: usize,
    mode: EnsembleMode,
    seed: u64,
    config: &FitConfig,
) -> Result<ProbeEnsemble> {
    if m < 2 {
        return Err(CopsError::invalid(format!("ensemble size must be >= 2, got {m}")));
    }
    probe.require_labels()?;
    let n = probe.len();
    let min_size = probe.classes() + probe.dim();
    let (member_rows, probe_size): (Vec<Vec<usize>>, usize) = match mode {
        EnsembleMode::IndependentSplits => {
            let shard = n / m;
            if shard < min_size {
                return Err(CopsError::invalid(format!(
                    "probe set of {n} rows cannot be split into {m} shards of at least K + d = {min_size} rows"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            (idx.chunks_exact(shard).take(m).map(<[usize]>::to_vec).collect(), shard)
        }
        EnsembleMode::Bootstrap => {
            if n < min_size {
                return Err(CopsError::invalid(format!(
                    "probe set of {n} rows is smaller than K + d = {min_size}"
                )));
            }
            let rows = (0..m)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                })
                .collect();
            (rows, n)
        }
    };
    let members = member_rows
        .par_iter()
        .map(|rows| {
            let report = fit_mle(&probe.select(rows), config)?;
            if !report.converged {
                log::warn!(
                    "probe member did not converge (gradient norm {:.3e})",
                    report.final_grad_norm
                );
            }
            Ok(report.beta)
        })
        .collect::<Result<Vec<_>>>()?;
    ProbeEnsemble::from_members(members, probe_size, mode)
}

/// `Σ_M(x)`, the `K × K` sample covariance (divisor `M − 1`) of member logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCovariance(pub DMatrix<f64>);

pub fn logit_covariance(ensemble: &ProbeEnsemble, x: &[f64]) -> Result<LogitCovariance> {
    CopsError::check_dim("feature vector", ensemble.dim(), x.len())?;
    Ok(LogitCovariance(logit_covariance_unchecked(ensemble, x)))
}

fn logit_covariance_unchecked(ensemble: &ProbeEnsemble, x: &[f64]) -> DMatrix<f64> {
    let k = ensemble.classes();
    let m = ensemble.size();
    // Deviations are taken relative to the first member, then re-centered.
    let anchor = ensemble.members[0].logits(x);
    let shifts: Vec<Vec<f64>> = ensemble
        .members
        .iter()
        .map(|member| (0..k).map(|c| dot(member.row(c), x) - anchor[c]).collect())
        .collect();
    let mut center = vec![0.0; k];
    for d in &shifts {
        for (c, v) in center.iter_mut().zip(d) {
            *c += v / m as f64;
        }
    }
    let mut cov = DMatrix::zeros(k, k);
    for d in &shifts {
        for a in 0..k {
            for b in 0..k {
                cov[(a, b)] += (d[a] - center[a]) * (d[b] - center[b]);
            }
        }
    }
    cov / (m - 1) as f64
}

fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for a in 0..v.len() {
        for b in 0..v.len() {
            acc += v[a] * m[(a, b)] * v[b];
        }
    }
    acc
}

fn clamp_round_off(u: f64) -> f64 {
    debug_assert!(u >= -ROUND_OFF * (1.0 + u.abs()), "quadratic form went negative: {u}");
    u.max(0.0)
}

fn check_label(classes: usize, y: usize) -> Result<()> {
    if y > classes {
        return Err(CopsError::invalid(format!("label {y} outside [0, {classes}]")));
    }
    Ok(())
}

/// `Tr(ψ(β̃; x, y) Σ_M(x)) = sᵀ Σ_M(x) s`.
pub fn ensemble_score_coreset(ensemble: &ProbeEnsemble, x: &[f64], y: usize) -> Result<f64> {
    CopsError::check_dim("feature vector", ensemble.dim(), x.len())?;
    check_label(ensemble.classes(), y)?;
    Ok(ensemble.coreset_score(x, y))
}

/// `Tr(φ(β̃; x) Σ_M(x))`.
pub fn ensemble_score_active(ensemble: &ProbeEnsemble, x: &[f64]) -> Result<f64> {
    CopsError::check_dim("feature vector", ensemble.dim(), x.len())?;
    Ok(ensemble.active_score(x))
}

/// Default relative ridge: `1e-10 · Tr(M) / (Kd)`.
pub fn default_ridge(info: &FisherInfo) -> f64 {
    1e-10 * info.matrix.trace() / info.matrix.nrows() as f64
}

/// Exact scorer holding a Cholesky factor of `M_X + ridge · I`.
#[derive(Debug, Clone)]
pub struct ExactScorer {
    beta: Coefficients,
    factor: Cholesky<f64, Dyn>,
}

impl ExactScorer {
    /// `ridge = None` selects [`default_ridge`].
    pub fn new(beta: Coefficients, info: &FisherInfo, ridge: Option<f64>) -> Result<Self> {
        let kd = beta.len();
        CopsError::check_dim("Fisher information", kd, info.matrix.nrows())?;
        let ridge = ridge.unwrap_or_else(|| default_ridge(info));
        if !(ridge >= 0.0) {
            return Err(CopsError::invalid("ridge must be nonnegative"));
        }
        let mut m = info.matrix.clone();
        for i in 0..kd {
            m[(i, i)] += ridge;
        }
        let factor = m.cholesky().ok_or_else(|| {
            CopsError::SingularInformation(format!(
                "Cholesky factorization failed with ridge {ridge:.3e}"
            ))
        })?;
        Ok(Self { beta, factor })
    }

    pub fn beta(&self) -> &Coefficients {
        &self.beta
    }

    /// `(v ⊗ x)ᵀ (M + ridge·I)⁻¹ (v ⊗ x)`.
    fn inverse_form(&self, v: &[f64], x: &[f64]) -> f64 {
        let z = DVector::from_iterator(v.len() * x.len(), v.iter().flat_map(|&a| x.iter().map(move |&b| a * b)));
        let solved = self.factor.solve(&z);
        z.dot(&solved)
    }
}

/// Sampling-score source shared by the exact and ensemble estimators.
pub trait UncertaintyEstimator: Sync {
    fn estimator(&self) -> Estimator;
    fn classes(&self) -> usize;
    fn dim(&self) -> usize;
    /// Score for a labeled sample. Inputs are assumed validated.
    fn coreset_score(&self, x: &[f64], y: usize) -> f64;
    /// Score for an unlabeled sample. Inputs are assumed validated.
    fn active_score(&self, x: &[f64]) -> f64;
    /// Factor putting raw scores on the exact-trace scale (`n'` for an
    /// ensemble, 1 for the exact estimator).
    fn calibration(&self) -> f64;
}

impl UncertaintyEstimator for ProbeEnsemble {
    fn estimator(&self) -> Estimator {
        Estimator::Ensemble
    }

    fn classes(&self) -> usize {
        self.mean.classes()
    }

    fn dim(&self) -> usize {
        self.mean.dim()
    }

    fn coreset_score(&self, x: &[f64], y: usize) -> f64 {
        let p = probabilities_unchecked(&self.mean, x);
        let s = score_from_probs(&p, y);
        clamp_round_off(quad_form(&logit_covariance_unchecked(self, x), &s))
    }

    fn active_score(&self, x: &[f64]) -> f64 {
        let p = probabilities_unchecked(&self.mean, x);
        let phi = phi_from_probs(&p);
        let sigma = logit_covariance_unchecked(self, x);
        clamp_round_off(phi.component_mul(&sigma).sum())
    }

    fn calibration(&self) -> f64 {
        self.probe_size as f64
    }
}

impl UncertaintyEstimator for ExactScorer {
    fn estimator(&self) -> Estimator {
        Estimator::Exact
    }

    fn classes(&self) -> usize {
        self.beta.classes()
    }

    fn dim(&self) -> usize {
        self.beta.dim()
    }

    fn coreset_score(&self, x: &[f64], y: usize) -> f64 {
        let p = probabilities_unchecked(&self.beta, x);
        clamp_round_off(self.inverse_form(&score_from_probs(&p, y), x))
    }

    fn active_score(&self, x: &[f64]) -> f64 {
        let p = probabilities_unchecked(&self.beta, x);
        let eig = SymmetricEigen::new(phi_from_probs(&p));
        let mut total = 0.0;
        for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= 0.0 {
                continue;
            }
            let v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            total += lambda * self.inverse_form(&v, x);
        }
        clamp_round_off(total)
    }

    fn calibration(&self) -> f64 {
        1.0
    }
}

/// `Tr((ψ ⊗ x xᵀ)(M + ridge·I)⁻¹)`, factorizing on every call. Use
/// [`ExactScorer`] to score many samples against one matrix.
pub fn exact_score_coreset(
    beta: &Coefficients,
    info: &FisherInfo,
    x: &[f64],
    y: usize,
    ridge: Option<f64>,
) -> Result<f64> {
    CopsError::check_dim("feature vector", beta.dim(), x.len())?;
    check_label(beta.classes(), y)?;
    Ok(ExactScorer::new(beta.clone(), info, ridge)?.coreset_score(x, y))
}

/// `Tr((φ ⊗ x xᵀ)(M + ridge·I)⁻¹)`.
pub fn exact_score_active(beta: &Coefficients, info: &FisherInfo, x: &[f64], ridge: Option<f64>) -> Result<f64> {
    CopsError::check_dim("feature vector", beta.dim(), x.len())?;
    Ok(ExactScorer::new(beta.clone(), info, ridge)?.active_score(x))
}

/// Per-sample uncertainty values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub u: Vec<f64>,
    pub kind: ScoreKind,
    pub estimator: Estimator,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.u.iter_mut().for_each(|v| *v *= factor);
        self
    }
}

/// Scores every row of `data`. Coreset scores need labels; active scores
/// ignore them.
pub fn score_dataset<E: UncertaintyEstimator + ?Sized>(
    estimator: &E,
    data: &Dataset,
    kind: ScoreKind,
) -> Result<ScoreSet> {
    CopsError::check_dim("dataset dimension", estimator.dim(), data.dim())?;
    CopsError::check_dim("dataset classes", estimator.classes(), data.classes())?;
    let u = match kind {
        ScoreKind::Coreset => {
            let labels = data.require_labels()?;
            (0..data.len())
                .into_par_iter()
                .map(|i| estimator.coreset_score(data.x(i), labels[i]))
                .collect()
        }
        ScoreKind::Active => (0..data.len())
            .into_par_iter()
            .map(|i| estimator.active_score(data.x(i)))
            .collect(),
    };
    Ok(ScoreSet {
        u,
        kind,
        estimator: estimator.estimator(),
    })
}
