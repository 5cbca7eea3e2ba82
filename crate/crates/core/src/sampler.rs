//! Sampling plans, weighted draws, and the end-to-end selection pipelines.
//!
//! A plan carries two distributions over the source rows. `pi` drives the
//! draw and may be clipped from above at `α`. `pi_reweight` supplies the
//! inverse-probability weights and is floored from below at `β`; clipping
//! never touches it.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CopsError, Result};
use crate::model::Dataset;
use crate::solver::{fit_weighted_mle, FitConfig, FitReport};
use crate::uncertainty::{score_dataset, ScoreKind, ScoreSet, UncertaintyEstimator};

pub const DEFAULT_BETA_FLOOR: f64 = 0.1;
const HISTOGRAM_BINS: usize = 20;

/// Map from uncertainty `u` to the sampling score `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTransform {
    /// `v = √u`: the loss-optimal ratio.
    #[default]
    Sqrt,
    /// `v = u`.
    Identity,
}

impl ScoreTransform {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            ScoreTransform::Sqrt => u.sqrt(),
            ScoreTransform::Identity => u,
        }
    }
}

/// Scale on which ensemble scores enter the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// Scores as the estimator returns them.
    #[default]
    Raw,
    /// Scores multiplied by the estimator's calibration factor (the probe
    /// size for an ensemble), which puts them on the exact-trace scale.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub transform: ScoreTransform,
    pub score_scale: ScoreScale,
    /// Clip level as a multiple of the smallest positive `v`.
    pub alpha_multiplier: Option<f64>,
    /// Lower bound on `v` in the reweighting distribution.
    pub beta_floor: f64,
    pub subsample_size: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(subsample_size: usize, seed: u64) -> Self {
        Self {
            transform: ScoreTransform::Sqrt,
            score_scale: ScoreScale::Raw,
            alpha_multiplier: None,
            beta_floor: DEFAULT_BETA_FLOOR,
            subsample_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subsample_size == 0 {
            return Err(CopsError::invalid("subsample size r must be at least 1"));
        }
        if let Some(m) = self.alpha_multiplier {
            if !(m > 1.0) || !m.is_finite() {
                return Err(CopsError::invalid(format!(
                    "alpha multiplier must be a finite value > 1, got {m}"
                )));
            }
        }
        if !(self.beta_floor >= 0.0) || !self.beta_floor.is_finite() {
            return Err(CopsError::invalid("beta floor must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Draw distribution (clipped when `alpha` is set).
    pub pi: Vec<f64>,
    /// Reweighting distribution (floored, never clipped).
    pub pi_reweight: Vec<f64>,
    /// Absolute clip level on `v`, if clipping was requested.
    pub alpha: Option<f64>,
    /// All scores were zero and both distributions fell back to uniform.
    pub degenerate: bool,
}

impl SamplingPlan {
    pub fn uniform(n: usize) -> Self {
        let p = vec![1.0 / n as f64; n];
        Self {
            pi: p.clone(),
            pi_reweight: p,
            alpha: None,
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }
}

fn normalized(values: Vec<f64>) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    values.into_iter().map(|v| v / total).collect()
}

/// Builds the draw and reweighting distributions from raw scores.
pub fn make_plan(scores: &ScoreSet, config: &SamplingConfig) -> Result<SamplingPlan> {
    plan_from_values(&scores.u, config)
}

pub fn plan_from_values(u: &[f64], config: &SamplingConfig) -> Result<SamplingPlan> {
    config.validate()?;
    if u.is_empty() {
        return Err(CopsError::invalid("cannot build a plan from zero scores"));
    }
    if let Some(i) = u.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(CopsError::invalid(format!(
            "score {} at row {i} is negative or non-finite",
            u[i]
        )));
    }
    let v: Vec<f64> = u.iter().map(|&x| config.transform.apply(x)).collect();
    let min_positive = v.iter().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
    if !min_positive.is_finite() {
        log::warn!("all {} scores are zero; falling back to uniform sampling", u.len());
        return Ok(SamplingPlan {
            degenerate: true,
            ..SamplingPlan::uniform(u.len())
        });
    }
    let alpha = config.alpha_multiplier.map(|m| m * min_positive);
    let draw = match alpha {
        Some(a) => v.iter().map(|&x| x.min(a)).collect(),
        None => v.clone(),
    };
    let floor = config.beta_floor;
    let reweight = v.iter().map(|&x| x.max(floor)).collect();
    Ok(SamplingPlan {
        pi: normalized(draw),
        pi_reweight: normalized(reweight),
        alpha,
        degenerate: false,
    })
}

/// Row indices drawn with replacement and their inverse-probability weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    pub indices: Vec<usize>,
    /// `1 / pi_reweight(index)` per draw.
    pub weights: Vec<f64>,
}

impl Subsample {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn distinct(&self) -> usize {
        let mut idx = self.indices.clone();
        idx.sort_unstable();
        idx.dedup();
        idx.len()
    }
}

/// `r` independent categorical draws from `plan.pi`.
pub fn draw_subsample(plan: &SamplingPlan, n: usize, r: usize, seed: u64) -> Result<Subsample> {
    CopsError::check_dim("sampling plan", n, plan.len())?;
    CopsError::check_dim("reweighting plan", n, plan.pi_reweight.len())?;
    if r == 0 {
        return Err(CopsError::invalid("subsample size r must be at least 1"));
    }
    if plan.pi.iter().any(|p| p.is_nan()) {
        return Err(CopsError::invalid("sampling distribution contains NaN"));
    }
    let dist = WeightedIndex::new(&plan.pi)
        .map_err(|e| CopsError::invalid(format!("invalid sampling distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = (0..r).map(|_| dist.sample(&mut rng)).collect();
    let weights = indices
        .iter()
        .map(|&i| {
            let p = plan.pi_reweight[i];
            if p > 0.0 {
                Ok(1.0 / p)
            } else {
                Err(CopsError::invalid(format!(
                    "row {i} was drawn but has zero reweighting mass"
                )))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Subsample { indices, weights })
}

/// `Σᵢ vᵢ² / πᵢ`, proportional to the expected excess loss of a subsample
/// drawn from `pi` when `v` holds square-root trace scores.
pub fn subsample_objective(v: &[f64], pi: &[f64]) -> Result<f64> {
    CopsError::check_dim("probability vector", v.len(), pi.len())?;
    let mut total = 0.0;
    for (i, (&vi, &pi_i)) in v.iter().zip(pi).enumerate() {
        if vi == 0.0 {
            continue;
        }
        if !(pi_i > 0.0) {
            return Err(CopsError::invalid(format!(
                "row {i} has positive score but zero sampling mass"
            )));
        }
        total += vi * vi / pi_i;
    }
    Ok(total)
}

/// Equal-width histogram over `[0, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub upper: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: impl IntoIterator<Item = f64> + Clone, bins: usize) -> Self {
        let upper = values.clone().into_iter().fold(0.0, f64::max);
        let mut counts = vec![0; bins];
        for v in values {
            let b = if upper > 0.0 {
                ((v / upper) * bins as f64) as usize
            } else {
                0
            };
            counts[b.min(bins - 1)] += 1;
        }
        Self { upper, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// Scores over the whole source dataset.
    pub score_histogram: Histogram,
    /// Scores of the drawn rows (with multiplicity).
    pub selected_histogram: Histogram,
    /// Distinct rows whose label was used.
    pub labels_queried: usize,
    pub degenerate_scores: bool,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub subsample: Subsample,
    pub plan: SamplingPlan,
    pub fit: FitReport,
    pub report: PipelineReport,
}

/// Source of labels for rows chosen by the active-learning pipeline.
pub trait LabelOracle {
    fn label(&mut self, index: usize) -> std::result::Result<usize, String>;
}

impl<F> LabelOracle for F
where
    F: FnMut(usize) -> std::result::Result<usize, String>,
{
    fn label(&mut self, index: usize) -> std::result::Result<usize, String> {
        self(index)
    }
}

/// Coreset selection: score every labeled row, draw, and fit on the
/// weighted draw.
pub fn cops_coreset<E: UncertaintyEstimator + ?Sized>(
    data: &Dataset,
    estimator: &E,
    config: &SamplingConfig,
    fit: &FitConfig,
) -> Result<PipelineOutput> {
    let scores = scale_scores(score_dataset(estimator, data, ScoreKind::Coreset)?, estimator, config);
    coreset_from_scores(data, &scores, config, fit)
}

/// Active learning: score unlabeled rows, draw, query labels for the drawn
/// rows only, and fit.
pub fn cops_active<E: UncertaintyEstimator + ?Sized, O: LabelOracle + ?Sized>(
    data_x: &Dataset,
    oracle: &mut O,
    estimator: &E,
    config: &SamplingConfig,
    fit: &FitConfig,
) -> Result<PipelineOutput> {
    let scores = scale_scores(score_dataset(estimator, data_x, ScoreKind::Active)?, estimator, config);
    active_from_scores(data_x, oracle, &scores, config, fit)
}

fn scale_scores<E: UncertaintyEstimator + ?Sized>(scores: ScoreSet, estimator: &E, config: &SamplingConfig) -> ScoreSet {
    match config.score_scale {
        ScoreScale::Raw => scores,
        ScoreScale::Calibrated => scores.scaled(estimator.calibration()),
    }
}

/// Uniform baseline: every row equally likely, equal weights.
pub fn uniform_coreset(data: &Dataset, config: &SamplingConfig, fit: &FitConfig) -> Result<PipelineOutput> {
    let plan = SamplingPlan::uniform(data.len());
    let zeros = vec![0.0; data.len()];
    let labels = data.require_labels()?;
    run_plan(data, plan, &zeros, config, fit, |i| Ok(labels[i]))
}

pub fn coreset_from_scores(
    data: &Dataset,
    scores: &ScoreSet,
    config: &SamplingConfig,
    fit: &FitConfig,
) -> Result<PipelineOutput> {
    let labels = data.require_labels()?;
    CopsError::check_dim("score set", data.len(), scores.len())?;
    let plan = make_plan(scores, config)?;
    run_plan(data, plan, &scores.u, config, fit, |i| Ok(labels[i]))
}

pub fn active_from_scores<O: LabelOracle + ?Sized>(
    data_x: &Dataset,
    oracle: &mut O,
    scores: &ScoreSet,
    config: &SamplingConfig,
    fit: &FitConfig,
) -> Result<PipelineOutput> {
    CopsError::check_dim("score set", data_x.len(), scores.len())?;
    let plan = make_plan(scores, config)?;
    let classes = data_x.classes();
    run_plan(data_x, plan, &scores.u, config, fit, |i| {
        let y = oracle
            .label(i)
            .map_err(|reason| CopsError::Labeling { index: i, reason })?;
        if y > classes {
            return Err(CopsError::Labeling {
                index: i,
                reason: format!("label {y} outside [0, {classes}]"),
            });
        }
        Ok(y)
    })
}

fn run_plan(
    data: &Dataset,
    plan: SamplingPlan,
    u: &[f64],
    config: &SamplingConfig,
    fit: &FitConfig,
    mut label_of: impl FnMut(usize) -> Result<usize>,
) -> Result<PipelineOutput> {
    config.validate()?;
    let subsample = draw_subsample(&plan, data.len(), config.subsample_size, config.seed)?;
    let mut queried: BTreeMap<usize, usize> = BTreeMap::new();
    let mut labels = Vec::with_capacity(subsample.len());
    for &i in &subsample.indices {
        let y = match queried.get(&i) {
            Some(&y) => y,
            None => {
                let y = label_of(i)?;
                queried.insert(i, y);
                y
            }
        };
        labels.push(y);
    }
    let features = data.select(&subsample.indices).without_labels();
    let drawn = Dataset::labeled(data.dim(), data.classes(), features.features().to_vec(), labels)?;
    let fit = fit_weighted_mle(&drawn, &subsample.weights, fit)?;
    let report = PipelineReport {
        score_histogram: Histogram::build(u.iter().copied(), HISTOGRAM_BINS),
        selected_histogram: Histogram::build(subsample.indices.iter().map(|&i| u[i]), HISTOGRAM_BINS),
        labels_queried: queried.len(),
        degenerate_scores: plan.degenerate,
        alpha: plan.alpha,
    };
    Ok(PipelineOutput {
        subsample,
        plan,
        fit,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::Estimator;
    use approx::assert_abs_diff_eq;

    fn scores(u: &[f64]) -> ScoreSet {
        ScoreSet {
            u: u.to_vec(),
            kind: ScoreKind::Active,
            estimator: Estimator::Exact,
        }
    }

    fn identity(alpha: Option<f64>, floor: f64) -> SamplingConfig {
        SamplingConfig {
            transform: ScoreTransform::Identity,
            score_scale: ScoreScale::Raw,
            alpha_multiplier: alpha,
            beta_floor: floor,
            ..SamplingConfig::new(10, 0)
        }
    }

    #[test]
    fn equal_scores_give_uniform_plan() {
        let plan = make_plan(&scores(&[1.0; 4]), &SamplingConfig::new(3, 0)).unwrap();
        for (a, b) in plan.pi.iter().zip(&plan.pi_reweight) {
            assert_abs_diff_eq!(*a, 0.25, epsilon = 1e-15);
            assert_abs_diff_eq!(*b, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn clip_at_three_times_minimum() {
        let plan = make_plan(&scores(&[1.0, 2.0, 10.0]), &identity(Some(3.0), 0.0)).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, w) in plan.pi.iter().zip(want) {
            assert_abs_diff_eq!(*a, w, epsilon = 1e-15);
        }
        assert_eq!(plan.alpha, Some(3.0));
        // Reweighting is untouched by the clip.
        assert_abs_diff_eq!(plan.pi_reweight[2], 10.0 / 13.0, epsilon = 1e-15);
    }

    #[test]
    fn floor_applies_to_reweighting_only() {
        let plan = make_plan(&scores(&[0.05, 0.2, 0.75]), &identity(None, 0.1)).unwrap();
        let want = [0.1 / 1.05, 0.2 / 1.05, 0.75 / 1.05];
        for (a, w) in plan.pi_reweight.iter().zip(want) {
            assert_abs_diff_eq!(*a, w, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(plan.pi[0], 0.05, epsilon = 1e-15);
    }

    #[test]
    fn sqrt_transform_is_default() {
        let plan = make_plan(&scores(&[1.0, 4.0, 9.0]), &SamplingConfig::new(1, 0)).unwrap();
        assert_abs_diff_eq!(plan.pi[2], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn all_zero_scores_fall_back_to_uniform() {
        let plan = make_plan(&scores(&[0.0; 5]), &SamplingConfig::new(1, 0)).unwrap();
        assert!(plan.degenerate);
        assert!(plan.pi.iter().all(|&p| p == 0.2));
    }

    #[test]
    fn clip_anchors_on_smallest_positive_score() {
        let plan = make_plan(&scores(&[0.0, 1.0, 100.0]), &identity(Some(2.0), 0.0)).unwrap();
        assert_eq!(plan.alpha, Some(2.0));
        assert_abs_diff_eq!(plan.pi[2], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(plan.pi[0], 0.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(make_plan(&scores(&[1.0, -0.1]), &SamplingConfig::new(1, 0)).is_err());
        assert!(make_plan(&scores(&[1.0, f64::NAN]), &SamplingConfig::new(1, 0)).is_err());
        assert!(make_plan(&scores(&[1.0]), &SamplingConfig::new(0, 0)).is_err());
        assert!(make_plan(&scores(&[1.0]), &identity(Some(1.0), 0.1)).is_err());
        let mut plan = SamplingPlan::uniform(3);
        plan.pi[1] = f64::NAN;
        assert!(draw_subsample(&plan, 3, 2, 0).is_err());
        assert!(draw_subsample(&SamplingPlan::uniform(3), 4, 2, 0).is_err());
    }

    #[test]
    fn point_mass_draws() {
        let mut plan = SamplingPlan::uniform(4);
        plan.pi = vec![1.0, 0.0, 0.0, 0.0];
        let s = draw_subsample(&plan, 4, 50, 9).unwrap();
        assert!(s.indices.iter().all(|&i| i == 0));
        assert!(s.weights.iter().all(|&w| w == 4.0));
    }

    #[test]
    fn draws_are_seeded() {
        let plan = make_plan(&scores(&[0.2, 0.3, 0.5, 1.0]), &SamplingConfig::new(1, 0)).unwrap();
        let a = draw_subsample(&plan, 4, 100, 5).unwrap();
        let b = draw_subsample(&plan, 4, 100, 5).unwrap();
        let c = draw_subsample(&plan, 4, 100, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn objective_examples() {
        let n = 8;
        let pi = vec![1.0 / n as f64; n];
        let v = vec![0.7; n];
        assert_abs_diff_eq!(
            subsample_objective(&v, &pi).unwrap(),
            (n * n) as f64 * 0.49,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(subsample_objective(&[3.0], &[1.0]).unwrap(), 9.0, epsilon = 1e-15);
        assert!(subsample_objective(&[1.0, 2.0], &[1.0, 0.0]).is_err());
        assert_eq!(subsample_objective(&[0.0, 2.0], &[0.0, 1.0]).unwrap(), 4.0);
    }

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::build([0.0, 0.5, 1.0, 1.0], 4);
        assert_eq!(h.counts, vec![1, 0, 1, 2]);
        assert_eq!(h.upper, 1.0);
    }
}
