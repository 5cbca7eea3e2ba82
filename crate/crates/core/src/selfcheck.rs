//! Built-in numerical checks: algebraic identities, finite differences, the
//! square-root optimality oracle and the ensemble/exact score correspondence.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::model::{
    class_probabilities, cross_entropy, fisher_info, loss_gradient, loss_hessian, phi, psi, Coefficients, Dataset,
};
use crate::solver::{fit_mle, FitConfig};
use crate::uncertainty::{train_ensemble, EnsembleMode, ExactScorer, UncertaintyEstimator};

/// Fixed seed for the deterministic identity suites.
const IDENTITY_SEED: u64 = 0x005e_ed1d;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
}

impl Bound {
    fn holds(self, v: f64) -> bool {
        match self {
            Bound::AtMost(t) => v <= t,
            Bound::AtLeast(t) => v >= t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub bound: Bound,
    pub measured: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &'static str, bound: Bound, measured: f64) -> Self {
        Self {
            name,
            bound,
            measured,
            passed: bound.holds(measured),
        }
    }

    pub fn line(&self) -> String {
        let bound = match self.bound {
            Bound::AtMost(t) => format!("<= {t:e}"),
            Bound::AtLeast(t) => format!(">= {t}"),
        };
        format!(
            "{:<28} {:<12} measured {:<24e} {}",
            self.name,
            bound,
            self.measured,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn random_instance(rng: &mut ChaCha8Rng, k: usize, d: usize) -> (Coefficients, Vec<f64>, usize) {
    let beta = Coefficients::from_vec(k, d, normal_vec(rng, k * d, 1.0 / (d as f64).sqrt())).expect("shape");
    let x = normal_vec(rng, d, 1.0);
    let y = rng.random_range(0..=k);
    (beta, x, y)
}

const SHAPES: [(usize, usize); 9] = [(1, 1), (1, 3), (1, 8), (2, 1), (2, 3), (2, 8), (5, 1), (5, 3), (5, 8)];

/// Largest `|Σ_y p_y ψ(y) − φ|` entry over random instances of every shape.
pub fn phi_psi_identity_error(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(IDENTITY_SEED);
    let mut worst: f64 = 0.0;
    for &(k, d) in &SHAPES {
        for _ in 0..instances {
            let (beta, x, _) = random_instance(&mut rng, k, d);
            let p = class_probabilities(&beta, &x).unwrap();
            let mut avg = DMatrix::zeros(k, k);
            for (y, py) in p.as_slice().iter().enumerate() {
                avg += psi(&beta, &x, y).unwrap().0 * *py;
            }
            worst = worst.max((avg - phi(&beta, &x).unwrap().0).amax());
        }
    }
    worst
}

/// Worst relative error of the analytic gradient against central
/// differences with step `1e-5`.
pub fn gradient_fd_error(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(IDENTITY_SEED ^ 1);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &(k, d) in &SHAPES {
        for _ in 0..instances {
            let (beta, x, y) = random_instance(&mut rng, k, d);
            let g = loss_gradient(&beta, &x, y).unwrap();
            let fd: Vec<f64> = (0..k * d)
                .map(|j| {
                    let shift = |delta: f64| {
                        let mut v = beta.as_slice().to_vec();
                        v[j] += delta;
                        cross_entropy(&Coefficients::from_vec(k, d, v).unwrap(), &x, y).unwrap()
                    };
                    (shift(h) - shift(-h)) / (2.0 * h)
                })
                .collect();
            worst = worst.max(relative_error(&g, &fd));
        }
    }
    worst
}

/// Worst relative (Frobenius) error of the Hessian against central
/// differences of the analytic gradient.
pub fn hessian_fd_error(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(IDENTITY_SEED ^ 2);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &(k, d) in &SHAPES {
        for _ in 0..instances {
            let (beta, x, y) = random_instance(&mut rng, k, d);
            let hess = loss_hessian(&beta, &x).unwrap();
            let mut fd = DMatrix::zeros(k * d, k * d);
            for j in 0..k * d {
                let grad_at = |delta: f64| {
                    let mut v = beta.as_slice().to_vec();
                    v[j] += delta;
                    loss_gradient(&Coefficients::from_vec(k, d, v).unwrap(), &x, y).unwrap()
                };
                let (up, down) = (grad_at(h), grad_at(-h));
                for i in 0..k * d {
                    fd[(i, j)] = (up[i] - down[i]) / (2.0 * h);
                }
            }
            worst = worst.max(relative_error(hess.as_slice(), fd.as_slice()));
        }
    }
    worst
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

/// Largest deviation of `Σ_l φ_kl` from `p_k p_0`.
pub fn phi_row_sum_error(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(IDENTITY_SEED ^ 3);
    let mut worst: f64 = 0.0;
    for &(k, d) in &SHAPES {
        for _ in 0..instances {
            let (beta, x, _) = random_instance(&mut rng, k, d);
            let p = class_probabilities(&beta, &x).unwrap();
            let f = phi(&beta, &x).unwrap().0;
            for a in 0..k {
                let sum: f64 = f.row(a).iter().sum();
                worst = worst.max((sum - p.non_reference()[a] * p.reference()).abs());
            }
        }
    }
    worst
}

/// Most negative eigenvalue of φ and ψ (0 when all are nonnegative).
pub fn psd_violation(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(IDENTITY_SEED ^ 4);
    let mut worst: f64 = 0.0;
    for &(k, d) in &SHAPES {
        for _ in 0..instances {
            let (beta, x, y) = random_instance(&mut rng, k, d);
            for m in [phi(&beta, &x).unwrap().0, psi(&beta, &x, y).unwrap().0] {
                let min = SymmetricEigen::new(m).eigenvalues.min();
                worst = worst.max(-min);
            }
        }
    }
    worst
}

/// Fraction of random distributions whose `Σu²/π` is strictly above the
/// value at `π ∝ u`. Returns `None` if any comes in below it.
pub fn sqrt_optimality_fraction(points: usize, draws: usize, seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<f64> = (0..points).map(|_| rng.random_range(0.01..1.0)).collect();
    let objective = |pi: &[f64]| u.iter().zip(pi).map(|(a, p)| a * a / p).sum::<f64>();
    let total: f64 = u.iter().sum();
    let best = objective(&u.iter().map(|a| a / total).collect::<Vec<_>>());
    let mut worse = 0;
    for _ in 0..draws {
        let e: Vec<f64> = (0..points).map(|_| Exp1.sample(&mut rng)).collect();
        let s: f64 = e.iter().sum();
        let pi: Vec<f64> = e.iter().map(|v| v / s).collect();
        let value = objective(&pi);
        if value < best * (1.0 - 1e-12) {
            return None;
        }
        if value > best {
            worse += 1;
        }
    }
    Some(worse as f64 / draws as f64)
}

/// Largest relative gap between the Kronecker-form exact scores and their
/// closed binary forms `(δ₁ − p₁)²·xᵀM⁻¹x` and `p₁(1 − p₁)·xᵀM⁻¹x`.
pub fn binary_corollary_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(1..=5);
        let n = 40;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
        let data = Dataset::from_rows(1, &rows, None).unwrap();
        let beta = Coefficients::from_vec(1, d, normal_vec(&mut rng, d, 0.5)).unwrap();
        let info = fisher_info(&beta, &data).unwrap();
        let inv = info.matrix.clone().try_inverse().expect("information is invertible");
        let scorer = ExactScorer::new(beta.clone(), &info, Some(0.0)).unwrap();
        let x = normal_vec(&mut rng, d, 1.0);
        let y = rng.random_range(0..=1usize);
        let q = (DMatrix::from_row_slice(1, d, &x) * &inv * DMatrix::from_column_slice(d, 1, &x))[(0, 0)];
        let p1 = class_probabilities(&beta, &x).unwrap().non_reference()[0];
        let delta = if y == 1 { 1.0 } else { 0.0 };
        let coreset_closed = (delta - p1).powi(2) * q;
        let active_closed = p1 * (1.0 - p1) * q;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
        worst = worst
            .max(rel(scorer.coreset_score(&x, y), coreset_closed))
            .max(rel(scorer.active_score(&x), active_closed));
    }
    worst
}

/// Setup for comparing calibrated ensemble scores with exact scores.
#[derive(Debug, Clone)]
pub struct CorrespondenceSetup {
    pub classes: usize,
    pub dim: usize,
    pub shards: usize,
    pub shard_size: usize,
    pub reference_size: usize,
    pub eval_points: usize,
}

impl Default for CorrespondenceSetup {
    fn default() -> Self {
        Self {
            classes: 2,
            dim: 3,
            shards: 200,
            shard_size: 5000,
            reference_size: 200_000,
            eval_points: 500,
        }
    }
}

/// Well-specified softmax data with standard normal features.
pub fn synthetic_softmax(beta: &Coefficients, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let d = beta.dim();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = normal_vec(rng, d, 1.0);
        let p = class_probabilities(beta, &x).unwrap();
        let mut t: f64 = rng.random();
        let mut y = p.as_slice().len() - 1;
        for (c, pc) in p.as_slice().iter().enumerate() {
            if t < *pc {
                y = c;
                break;
            }
            t -= pc;
        }
        features.extend_from_slice(&x);
        labels.push(y);
    }
    Dataset::labeled(d, beta.classes(), features, labels).unwrap()
}

/// Median relative gap `|n'·u_ensemble − u_exact| / u_exact` for coreset and
/// active scores.
pub fn correspondence_errors(setup: &CorrespondenceSetup, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (setup.classes, setup.dim);
    let beta_star = Coefficients::from_vec(k, d, normal_vec(&mut rng, k * d, 0.5))?;
    let probe = synthetic_softmax(&beta_star, setup.shards * setup.shard_size, &mut rng);
    let ensemble = train_ensemble(
        &probe,
        setup.shards,
        EnsembleMode::IndependentSplits,
        rng.random(),
        &FitConfig::default(),
    )?;
    let reference = synthetic_softmax(&beta_star, setup.reference_size, &mut rng);
    let beta_hat = fit_mle(&reference, &FitConfig::default())?.beta;
    let info = fisher_info(&beta_hat, &reference)?;
    let exact = ExactScorer::new(beta_hat, &info, None)?;
    let eval = synthetic_softmax(&beta_star, setup.eval_points, &mut rng);
    let scale = ensemble.calibration();
    let mut coreset = Vec::with_capacity(eval.len());
    let mut active = Vec::with_capacity(eval.len());
    for (x, &y) in eval.rows().zip(eval.labels().unwrap()) {
        let ue = exact.coreset_score(x, y);
        coreset.push((scale * ensemble.coreset_score(x, y) - ue).abs() / ue);
        let ue = exact.active_score(x);
        active.push((scale * ensemble.active_score(x) - ue).abs() / ue);
    }
    Ok((median(coreset), median(active)))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs the suite. `quick` skips the ensemble correspondence check; `seed`
/// drives only the Monte-Carlo checks.
pub fn run_selfcheck(quick: bool, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![
        CheckOutcome::new("phi_psi_label_average", Bound::AtMost(1e-12), phi_psi_identity_error(100)),
        CheckOutcome::new("gradient_finite_difference", Bound::AtMost(1e-6), gradient_fd_error(20)),
        CheckOutcome::new("hessian_finite_difference", Bound::AtMost(1e-5), hessian_fd_error(20)),
        CheckOutcome::new("phi_row_sum", Bound::AtMost(1e-12), phi_row_sum_error(100)),
        CheckOutcome::new("phi_psi_psd", Bound::AtMost(1e-12), psd_violation(100)),
        CheckOutcome::new(
            "binary_closed_form",
            Bound::AtMost(1e-10),
            binary_corollary_error(100, IDENTITY_SEED ^ 5),
        ),
    ];
    let fraction = sqrt_optimality_fraction(20, 1000, seed).unwrap_or(0.0);
    out.push(CheckOutcome::new("sqrt_ratio_optimality", Bound::AtLeast(0.99), fraction));
    if !quick {
        let (coreset, active) = correspondence_errors(&CorrespondenceSetup::default(), seed)?;
        out.push(CheckOutcome::new("ensemble_exact_coreset", Bound::AtMost(0.15), coreset));
        out.push(CheckOutcome::new("ensemble_exact_active", Bound::AtMost(0.15), active));
    }
    Ok(out)
}
