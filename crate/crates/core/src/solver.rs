//! Damped Newton fitting of softmax regression, plain and inverse-probability
//! weighted.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CopsError, Result};
use crate::model::{add_kron_outer, log_softmax_into, phi_from_probs, Coefficients, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Stop once the gradient ∞-norm of the weight-normalized objective is at
    /// or below this value.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Added to the Newton system's diagonal on every iteration.
    pub ridge: f64,
    pub step_halving_max: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 100,
            ridge: 1e-8,
            step_halving_max: 30,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) || !(self.ridge > 0.0) || self.max_iters == 0 || self.step_halving_max == 0 {
            return Err(CopsError::invalid(
                "fit config: grad_tol, ridge, max_iters and step_halving_max must all be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub beta: Coefficients,
    /// Accepted Newton steps.
    pub iterations: usize,
    /// Gradient ∞-norm of `Σ wᵢℓᵢ / Σ wᵢ` at `beta`.
    pub final_grad_norm: f64,
    pub converged: bool,
    /// `(1/n) Σ wᵢ ℓᵢ` at `beta`.
    pub final_loss: f64,
}

/// Unweighted maximum-likelihood fit, started from `β = 0`.
pub fn fit_mle(data: &Dataset, config: &FitConfig) -> Result<FitReport> {
    newton(data, None, config)
}

/// Minimizes `(1/n) Σ wᵢ ℓᵢ`. Only the argmin matters, so any positive
/// rescaling of `weights` yields the same coefficients.
pub fn fit_weighted_mle(data: &Dataset, weights: &[f64], config: &FitConfig) -> Result<FitReport> {
    newton(data, Some(weights), config)
}

struct Objective<'a> {
    data: &'a Dataset,
    labels: &'a [usize],
    weights: Option<&'a [f64]>,
    weight_sum: f64,
}

impl Objective<'_> {
    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }

    /// Weight-normalized loss `Σ wᵢℓᵢ / Σ wᵢ`.
    fn value(&self, beta: &Coefficients, scratch: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for (i, (x, &y)) in self.data.rows().zip(self.labels).enumerate() {
            let w = self.weight(i);
            if w != 0.0 {
                log_softmax_into(beta, x, scratch);
                total -= w * scratch[y];
            }
        }
        total / self.weight_sum
    }

    fn value_grad_hess(&self, beta: &Coefficients) -> (f64, DVector<f64>, DMatrix<f64>) {
        let k = beta.classes();
        let d = beta.dim();
        let mut logp = vec![0.0; k + 1];
        let mut p = vec![0.0; k + 1];
        let mut loss = 0.0;
        let mut grad = DVector::zeros(k * d);
        let mut hess = DMatrix::zeros(k * d, k * d);
        for (i, (x, &y)) in self.data.rows().zip(self.labels).enumerate() {
            let w = self.weight(i);
            if w == 0.0 {
                continue;
            }
            log_softmax_into(beta, x, &mut logp);
            loss -= w * logp[y];
            for (pk, lk) in p.iter_mut().zip(&logp) {
                *pk = lk.exp();
            }
            for c in 0..k {
                let resid = p[c + 1] - if y == c + 1 { 1.0 } else { 0.0 };
                let f = w * resid;
                for (j, xj) in x.iter().enumerate() {
                    grad[c * d + j] += f * xj;
                }
            }
            add_kron_outer(&mut hess, &phi_from_probs(&p), x, w);
        }
        let s = self.weight_sum;
        (loss / s, grad / s, hess / s)
    }
}

fn newton(data: &Dataset, weights: Option<&[f64]>, config: &FitConfig) -> Result<FitReport> {
    config.validate()?;
    let labels = data.require_labels()?;
    let n = data.len();
    if n == 0 {
        return Err(CopsError::invalid("cannot fit an empty dataset"));
    }
    let weight_sum = match weights {
        Some(w) => {
            CopsError::check_dim("weight vector", n, w.len())?;
            if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
                return Err(CopsError::invalid("weights must be finite and nonnegative"));
            }
            let s: f64 = w.iter().sum();
            if !(s > 0.0) {
                return Err(CopsError::invalid("weights are all zero"));
            }
            s
        }
        None => n as f64,
    };
    let mut seen = vec![false; data.classes() + 1];
    for (i, &y) in labels.iter().enumerate() {
        if weights.is_none_or(|w| w[i] > 0.0) {
            seen[y] = true;
        }
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(CopsError::invalid(
            "fitting requires samples of at least two distinct classes",
        ));
    }

    let objective = Objective {
        data,
        labels,
        weights,
        weight_sum,
    };
    let k = data.classes();
    let d = data.dim();
    let mut beta = Coefficients::zeros(k, d);
    let mut scratch = vec![0.0; k + 1];
    let mut iterations = 0;
    let mut converged = false;
    let (mut value, mut grad, mut hess) = objective.value_grad_hess(&beta);

    for _ in 0..config.max_iters {
        if grad.amax() <= config.grad_tol {
            converged = true;
            break;
        }
        let step = newton_direction(&hess, &grad, config.ridge)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=config.step_halving_max {
            let trial: Vec<f64> = beta
                .as_slice()
                .iter()
                .zip(step.iter())
                .map(|(b, s)| b + t * s)
                .collect();
            let trial = Coefficients::from_vec(k, d, trial)?;
            let v = objective.value(&trial, &mut scratch);
            if v <= value {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            log::debug!("line search stalled after {iterations} Newton steps");
            break;
        };
        beta = next;
        iterations += 1;
        (value, grad, hess) = objective.value_grad_hess(&beta);
    }
    if !converged {
        converged = grad.amax() <= config.grad_tol;
    }
    if !converged {
        log::warn!(
            "Newton fit stopped after {iterations} steps with gradient norm {:.3e}",
            grad.amax()
        );
    }
    Ok(FitReport {
        beta,
        iterations,
        final_grad_norm: grad.amax(),
        converged,
        final_loss: value * weight_sum / n as f64,
    })
}

fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let mut lambda = ridge;
    for _ in 0..12 {
        let mut sys = hess.clone();
        for i in 0..sys.nrows() {
            sys[(i, i)] += lambda;
        }
        if let Some(chol) = sys.cholesky() {
            return Ok(-chol.solve(grad));
        }
        lambda *= 10.0;
    }
    Err(CopsError::SingularInformation(
        "Newton system stayed indefinite after ridge escalation".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{dataset_loss, loss_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Dataset {
        Dataset::from_rows(
            1,
            &[
                [1.0, 0.2],
                [1.0, -0.4],
                [1.0, 1.3],
                [1.0, 0.9],
                [1.0, -1.1],
                [1.0, 0.1],
            ],
            Some(vec![1, 0, 1, 0, 0, 1]),
        )
        .unwrap()
    }

    fn random_multiclass(seed: u64, n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<[f64; 3]> = (0..n)
            .map(|_| [1.0, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
        Dataset::from_rows(2, &rows, Some(labels)).unwrap()
    }

    #[test]
    fn converges_to_stationary_point() {
        let data = random_multiclass(3, 300);
        let rep = fit_mle(&data, &FitConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.final_grad_norm <= 1e-8);
        // Independent check of stationarity via the per-sample gradient.
        let mut g = vec![0.0; rep.beta.len()];
        for i in 0..data.len() {
            let gi = loss_gradient(&rep.beta, data.x(i), data.y(i).unwrap()).unwrap();
            g.iter_mut().zip(gi).for_each(|(a, b)| *a += b / data.len() as f64);
        }
        assert!(g.iter().all(|v| v.abs() < 1e-8));
        let l = dataset_loss(&rep.beta, &data, None).unwrap();
        assert!((l - rep.final_loss).abs() < 1e-14);
    }

    #[test]
    fn equal_weights_match_unweighted() {
        let data = toy();
        let plain = fit_mle(&data, &FitConfig::default()).unwrap();
        let weighted = fit_weighted_mle(&data, &[3.5; 6], &FitConfig::default()).unwrap();
        assert!(plain.beta.max_abs_diff(&weighted.beta) < 1e-10);
    }

    #[test]
    fn zero_weight_deletes_sample() {
        let data = random_multiclass(5, 60);
        let mut w = vec![1.0; 60];
        w[7] = 0.0;
        let keep: Vec<usize> = (0..60).filter(|&i| i != 7).collect();
        let a = fit_weighted_mle(&data, &w, &FitConfig::default()).unwrap();
        let b = fit_mle(&data.select(&keep), &FitConfig::default()).unwrap();
        assert!(a.beta.max_abs_diff(&b.beta) < 1e-9);
    }

    #[test]
    fn weight_rescaling_leaves_argmin() {
        let data = random_multiclass(9, 120);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Vec<f64> = (0..120).map(|_| rng.random_range(0.1..5.0)).collect();
        let scaled: Vec<f64> = w.iter().map(|v| v * 2.0e5).collect();
        let a = fit_weighted_mle(&data, &w, &FitConfig::default()).unwrap();
        let b = fit_weighted_mle(&data, &scaled, &FitConfig::default()).unwrap();
        assert!(a.beta.max_abs_diff(&b.beta) < 1e-8);
    }

    #[test]
    fn single_class_is_rejected() {
        let data = Dataset::from_rows(1, &[[1.0], [2.0]], Some(vec![1, 1])).unwrap();
        assert!(matches!(fit_mle(&data, &FitConfig::default()), Err(CopsError::InvalidInput(_))));
        let unl = data.without_labels();
        assert!(fit_mle(&unl, &FitConfig::default()).is_err());
        let mixed = Dataset::from_rows(1, &[[1.0], [2.0]], Some(vec![1, 0])).unwrap();
        assert!(fit_weighted_mle(&mixed, &[1.0, 0.0], &FitConfig::default()).is_err());
        assert!(fit_weighted_mle(&mixed, &[0.0, 0.0], &FitConfig::default()).is_err());
        assert!(fit_weighted_mle(&mixed, &[1.0], &FitConfig::default()).is_err());
    }

    #[test]
    fn separable_data_reports_non_convergence() {
        let data = Dataset::from_rows(1, &[[-1.0], [-2.0], [1.0], [2.0]], Some(vec![0, 0, 1, 1])).unwrap();
        let cfg = FitConfig {
            max_iters: 5,
            ..FitConfig::default()
        };
        let rep = fit_mle(&data, &cfg).unwrap();
        assert!(!rep.converged);
        assert!(rep.final_grad_norm > cfg.grad_tol);
    }

    #[test]
    fn loss_never_increases_across_iterations() {
        let data = random_multiclass(11, 200);
        let mut last = f64::INFINITY;
        for iters in 1..8 {
            let cfg = FitConfig {
                max_iters: iters,
                ..FitConfig::default()
            };
            let rep = fit_mle(&data, &cfg).unwrap();
            assert!(rep.final_loss <= last);
            last = rep.final_loss;
        }
    }

    #[test]
    fn deterministic() {
        let data = random_multiclass(2, 150);
        let a = fit_mle(&data, &FitConfig::default()).unwrap();
        let b = fit_mle(&data, &FitConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config() {
        let cfg = FitConfig {
            ridge: 0.0,
            ..FitConfig::default()
        };
        assert!(fit_mle(&toy(), &cfg).is_err());
    }
}
