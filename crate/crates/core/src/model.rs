//! Softmax-regression calculus.
//!
//! Classes are indexed `0..=K`; class 0 is the reference class whose
//! coefficient row is pinned at zero. A [`Coefficients`] value stores the
//! remaining `K` rows `β₁..β_K`, each of length `d`, concatenated row by row.
//! That concatenation is the canonical vectorization used everywhere a
//! `Kd`-vector or a `Kd × Kd` matrix appears: entry `k·d + j` of a gradient is
//! the derivative with respect to coordinate `j` of `β_{k+1}`, and block
//! `(k, l)` of a Hessian is `φ_{kl} · x xᵀ`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CopsError, Result};

/// Relative eigenvalue threshold below which a Fisher information matrix is
/// flagged as numerically singular.
pub const NEAR_SINGULAR_RATIO: f64 = 1e-10;

/// `K × d` coefficient matrix for the non-reference classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CoefficientRows", into = "CoefficientRows")]
pub struct Coefficients {
    classes: usize,
    dim: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CoefficientRows(Vec<Vec<f64>>);

impl TryFrom<CoefficientRows> for Coefficients {
    type Error = CopsError;

    fn try_from(rows: CoefficientRows) -> Result<Self> {
        Coefficients::from_rows(&rows.0)
    }
}

impl From<Coefficients> for CoefficientRows {
    fn from(c: Coefficients) -> Self {
        CoefficientRows((0..c.classes).map(|k| c.row(k).to_vec()).collect())
    }
}

impl Coefficients {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            values: vec![0.0; classes * dim],
        }
    }

    /// Builds coefficients from the canonical vectorization `[β₁; …; β_K]`.
    pub fn from_vec(classes: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(CopsError::invalid("coefficients need K >= 1 and d >= 1"));
        }
        CopsError::check_dim("coefficient vector", classes * dim, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CopsError::invalid("coefficients must be finite"));
        }
        Ok(Self {
            classes,
            dim,
            values,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let classes = rows.len();
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(classes * dim);
        for row in rows {
            CopsError::check_dim("coefficient row", dim, row.as_ref().len())?;
            values.extend_from_slice(row.as_ref());
        }
        Self::from_vec(classes, dim, values)
    }

    /// Number of non-reference classes `K`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Length of the canonical vectorization, `K·d`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row `β_{k+1}` (zero-based over the non-reference classes).
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// The `K` non-reference logits `xᵀβₖ`.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes).map(|k| dot(self.row(k), x)).collect()
    }

    /// Arithmetic mean of a non-empty set of coefficient matrices of equal shape.
    pub fn mean(members: &[Coefficients]) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| CopsError::invalid("mean of an empty coefficient set"))?;
        let mut acc = vec![0.0; first.len()];
        for m in members {
            CopsError::check_dim("ensemble member classes", first.classes, m.classes)?;
            CopsError::check_dim("ensemble member dimension", first.dim, m.dim)?;
            for (a, v) in acc.iter_mut().zip(&m.values) {
                *a += v;
            }
        }
        let count = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= count);
        Self::from_vec(first.classes, first.dim, acc)
    }

    pub fn max_abs_diff(&self, other: &Coefficients) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &Coefficients) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn check_features(&self, x: &[f64]) -> Result<()> {
        CopsError::check_dim("feature vector", self.dim, x.len())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y > self.classes {
            return Err(CopsError::invalid(format!(
                "label {y} outside [0, {}]",
                self.classes
            )));
        }
        Ok(())
    }
}

/// Feature rows with optional categorical labels.
///
/// Rows are stored flat in row-major order. A dataset without labels is the
/// unlabeled pool of the active-learning setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn labeled(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let ds = Self::unlabeled(dim, classes, features)?;
        CopsError::check_dim("label column", ds.len(), labels.len())?;
        if let Some(bad) = labels.iter().find(|&&y| y > classes) {
            return Err(CopsError::invalid(format!(
                "label {bad} outside [0, {classes}]"
            )));
        }
        Ok(Self {
            labels: Some(labels),
            ..ds
        })
    }

    pub fn unlabeled(dim: usize, classes: usize, features: Vec<f64>) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(CopsError::invalid("dataset needs d >= 1 and K >= 1"));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(CopsError::invalid(format!(
                "feature buffer of length {} is not a multiple of d = {dim}",
                features.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(CopsError::invalid(format!(
                "non-finite feature in row {}",
                pos / dim
            )));
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(classes: usize, rows: &[R], labels: Option<Vec<usize>>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut features = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            CopsError::check_dim("feature row", dim, row.as_ref().len())?;
            features.extend_from_slice(row.as_ref());
        }
        match labels {
            Some(l) => Self::labeled(dim, classes, features, l),
            None => Self::unlabeled(dim, classes, features),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Rows at `indices`, in order, duplicates kept.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.x(i));
        }
        Self {
            dim: self.dim,
            classes: self.classes,
            features,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Number of distinct labels present (0 for an unlabeled dataset).
    pub fn distinct_classes(&self) -> usize {
        let Some(labels) = &self.labels else { return 0 };
        let mut seen = vec![false; self.classes + 1];
        labels.iter().for_each(|&y| seen[y] = true);
        seen.into_iter().filter(|&s| s).count()
    }

    pub(crate) fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| CopsError::invalid("operation requires a labeled dataset"))
    }
}

/// Probabilities `p₀..p_K` of all `K + 1` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities(Vec<f64>);

impl ClassProbabilities {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Probability of the reference class.
    pub fn reference(&self) -> f64 {
        self.0[0]
    }

    /// `p₁..p_K`.
    pub fn non_reference(&self) -> &[f64] {
        &self.0[1..]
    }
}

/// `φ(β; x) = diag(p) − p pᵀ` over the non-reference classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiMatrix(pub DMatrix<f64>);

/// `ψ(β; x, y) = s sᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiMatrix(pub DMatrix<f64>);

/// Averaged Fisher information `M_X(β; S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
    pub n: usize,
    /// Set when the smallest eigenvalue is below `1e-10` times the largest.
    pub near_singular: bool,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fills `logp` (length `K + 1`) with log-probabilities and returns the
/// log-partition `log Σₗ exp(xᵀβₗ)`.
pub(crate) fn log_softmax_into(beta: &Coefficients, x: &[f64], logp: &mut [f64]) -> f64 {
    logp[0] = 0.0;
    for k in 0..beta.classes {
        logp[k + 1] = dot(beta.row(k), x);
    }
    let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logp.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    logp.iter_mut().for_each(|z| *z -= lse);
    lse
}

pub(crate) fn probabilities_into(beta: &Coefficients, x: &[f64], p: &mut [f64]) {
    log_softmax_into(beta, x, p);
    p.iter_mut().for_each(|z| *z = z.exp());
}

pub(crate) fn probabilities_unchecked(beta: &Coefficients, x: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; beta.classes + 1];
    probabilities_into(beta, x, &mut p);
    p
}

/// Cross entropy from a precomputed log-probability vector.
pub(crate) fn loss_unchecked(beta: &Coefficients, x: &[f64], y: usize, scratch: &mut [f64]) -> f64 {
    log_softmax_into(beta, x, scratch);
    -scratch[y]
}

pub fn class_probabilities(beta: &Coefficients, x: &[f64]) -> Result<ClassProbabilities> {
    beta.check_features(x)?;
    Ok(ClassProbabilities(probabilities_unchecked(beta, x)))
}

/// `−log p_y(β; x)`, evaluated as `logsumexp(logits) − logit_y`.
pub fn cross_entropy(beta: &Coefficients, x: &[f64], y: usize) -> Result<f64> {
    beta.check_features(x)?;
    beta.check_label(y)?;
    let mut scratch = vec![0.0; beta.classes + 1];
    Ok(loss_unchecked(beta, x, y, &mut scratch))
}

fn check_compatible(beta: &Coefficients, data: &Dataset) -> Result<()> {
    CopsError::check_dim("dataset dimension", beta.dim, data.dim)?;
    CopsError::check_dim("dataset classes", beta.classes, data.classes)
}

/// `(1/n) Σ wᵢ ℓᵢ`, with `wᵢ = 1` when no weights are given.
pub fn dataset_loss(beta: &Coefficients, data: &Dataset, weights: Option<&[f64]>) -> Result<f64> {
    check_compatible(beta, data)?;
    let labels = data.require_labels()?;
    if data.is_empty() {
        return Err(CopsError::invalid("loss of an empty dataset"));
    }
    if let Some(w) = weights {
        CopsError::check_dim("weight vector", data.len(), w.len())?;
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(CopsError::invalid("weights must be finite and nonnegative"));
        }
    }
    let mut scratch = vec![0.0; beta.classes + 1];
    let total: f64 = data
        .rows()
        .zip(labels)
        .enumerate()
        .map(|(i, (x, &y))| {
            let w = weights.map_or(1.0, |w| w[i]);
            if w == 0.0 {
                0.0
            } else {
                w * loss_unchecked(beta, x, y, &mut scratch)
            }
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// `sₖ = δₖ(y) − pₖ` for `k = 1..K`.
pub fn score_vector(beta: &Coefficients, x: &[f64], y: usize) -> Result<Vec<f64>> {
    beta.check_features(x)?;
    beta.check_label(y)?;
    let p = probabilities_unchecked(beta, x);
    Ok(score_from_probs(&p, y))
}

pub(crate) fn score_from_probs(p: &[f64], y: usize) -> Vec<f64> {
    (1..p.len())
        .map(|k| if k == y { 1.0 - p[k] } else { -p[k] })
        .collect()
}

/// Gradient of the cross entropy, `−s ⊗ x`.
pub fn loss_gradient(beta: &Coefficients, x: &[f64], y: usize) -> Result<Vec<f64>> {
    let s = score_vector(beta, x, y)?;
    Ok(s.iter()
        .flat_map(|&sk| x.iter().map(move |&xj| -sk * xj))
        .collect())
}

pub(crate) fn phi_from_probs(p: &[f64]) -> DMatrix<f64> {
    let k = p.len() - 1;
    DMatrix::from_fn(k, k, |a, b| {
        let (pa, pb) = (p[a + 1], p[b + 1]);
        if a == b {
            pa - pa * pa
        } else {
            -pa * pb
        }
    })
}

pub fn phi(beta: &Coefficients, x: &[f64]) -> Result<PhiMatrix> {
    beta.check_features(x)?;
    Ok(PhiMatrix(phi_from_probs(&probabilities_unchecked(beta, x))))
}

pub fn psi(beta: &Coefficients, x: &[f64], y: usize) -> Result<PsiMatrix> {
    let s = nalgebra::DVector::from_vec(score_vector(beta, x, y)?);
    Ok(PsiMatrix(&s * s.transpose()))
}

/// Adds `scale · (φ ⊗ x xᵀ)` into `out` using the canonical block layout.
pub(crate) fn add_kron_outer(out: &mut DMatrix<f64>, phi: &DMatrix<f64>, x: &[f64], scale: f64) {
    let d = x.len();
    let k = phi.nrows();
    for a in 0..k {
        for b in 0..k {
            let f = scale * phi[(a, b)];
            if f == 0.0 {
                continue;
            }
            for i in 0..d {
                let fi = f * x[i];
                for j in 0..d {
                    out[(a * d + i, b * d + j)] += fi * x[j];
                }
            }
        }
    }
}

/// Hessian of the cross entropy, `φ(β; x) ⊗ x xᵀ`. Independent of the label.
pub fn loss_hessian(beta: &Coefficients, x: &[f64]) -> Result<DMatrix<f64>> {
    let phi = phi(beta, x)?.0;
    let n = beta.len();
    let mut out = DMatrix::zeros(n, n);
    add_kron_outer(&mut out, &phi, x, 1.0);
    Ok(out)
}

/// `M_X(β; S) = (1/n) Σᵢ φ(β; xᵢ) ⊗ xᵢxᵢᵀ`. Labels, if present, are ignored.
pub fn fisher_info(beta: &Coefficients, data: &Dataset) -> Result<FisherInfo> {
    check_compatible(beta, data)?;
    if data.is_empty() {
        return Err(CopsError::invalid("Fisher information of an empty dataset"));
    }
    let kd = beta.len();
    let mut m = DMatrix::zeros(kd, kd);
    let mut p = vec![0.0; beta.classes + 1];
    for x in data.rows() {
        probabilities_into(beta, x, &mut p);
        add_kron_outer(&mut m, &phi_from_probs(&p), x, 1.0);
    }
    m /= data.len() as f64;
    // Symmetrize away accumulated round-off.
    let m = (&m + m.transpose()) * 0.5;
    let near_singular = is_near_singular(&m);
    if near_singular {
        log::warn!(
            "Fisher information ({kd}x{kd}) is near-singular; the inverse will rely on the ridge"
        );
    }
    Ok(FisherInfo {
        matrix: m,
        n: data.len(),
        near_singular,
    })
}

fn is_near_singular(m: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    !(max > 0.0) || min < NEAR_SINGULAR_RATIO * max
}
