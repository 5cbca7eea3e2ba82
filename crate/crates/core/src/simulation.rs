//! Monte-Carlo comparison of sampling methods on corrupted binary logistic
//! data.
//!
//! Each dataset is built from a handful of feature atoms repeated many
//! times. Labels follow `P(y = 1 | x) = σ(xᵀβ* + ζ(x))`, where `ζ` is a
//! per-atom logit offset the linear model cannot represent. Learners only
//! ever see corrupted data (sampling set and probe set); the regret
//! `L(β̄; T) − L(β*; T)` is measured on a clean test set of the same shape.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CopsError, Result};
use crate::model::{dataset_loss, log_softmax_into, Coefficients, Dataset};
use crate::sampler::{
    active_from_scores, coreset_from_scores, uniform_coreset, SamplingConfig, ScoreScale, ScoreTransform,
    DEFAULT_BETA_FLOOR,
};
use crate::solver::FitConfig;
use crate::uncertainty::{
    train_ensemble, EnsembleMode, Estimator, ProbeEnsemble, ScoreKind, ScoreSet, UncertaintyEstimator,
};

/// The bundled three-atom experiment.
pub const PAPER_SIM_JSON: &str = include_str!("../configs/paper_sim.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub x: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionCase {
    pub name: String,
    /// Logit offset per atom.
    pub zeta: Vec<f64>,
}

fn default_trials() -> usize {
    50
}

fn default_ensemble_size() -> usize {
    10
}

fn default_beta_floor() -> f64 {
    DEFAULT_BETA_FLOOR
}

/// Configuration document for a full experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub atoms: Vec<Atom>,
    pub beta_star: Coefficients,
    pub cases: Vec<CorruptionCase>,
    /// Subsample size.
    pub r: usize,
    pub clip_multipliers: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default = "default_beta_floor")]
    pub beta_floor: f64,
    #[serde(default)]
    pub transform: ScoreTransform,
    #[serde(default)]
    pub score_scale: ScoreScale,
    #[serde(default)]
    pub fit: FitConfig,
}

impl ExperimentConfig {
    pub fn paper() -> Self {
        serde_json::from_str(PAPER_SIM_JSON).expect("bundled simulation config parses")
    }

    pub fn validate(&self) -> Result<()> {
        if self.cases.is_empty() {
            return Err(CopsError::invalid("config lists no corruption cases"));
        }
        if self.trials == 0 {
            return Err(CopsError::invalid("trials must be at least 1"));
        }
        let mut names: Vec<&str> = self.cases.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.cases.len() {
            return Err(CopsError::invalid("corruption case names must be unique"));
        }
        for case in &self.cases {
            self.spec_for(case)?.validate()?;
        }
        Ok(())
    }

    pub fn spec_for(&self, case: &CorruptionCase) -> Result<SimulationSpec> {
        Ok(SimulationSpec {
            atoms: self.atoms.clone(),
            beta_star: self.beta_star.clone(),
            zeta: case.zeta.clone(),
            r: self.r,
            clip_multipliers: self.clip_multipliers.clone(),
            trials: self.trials,
            seed: self.seed,
            ensemble_size: self.ensemble_size,
            beta_floor: self.beta_floor,
            transform: self.transform,
            score_scale: self.score_scale,
            fit: self.fit.clone(),
        })
    }

    /// Uniform, then vanilla and each clip level for coreset selection,
    /// then the same for active learning.
    pub fn methods(&self) -> Vec<Method> {
        let mut out = vec![Method::uniform()];
        for labels in [LabelMode::WithLabels, LabelMode::WithoutLabels] {
            out.push(Method {
                selection: Selection::Vanilla,
                labels,
            });
            for &m in &self.clip_multipliers {
                out.push(Method {
                    selection: Selection::Clip(m),
                    labels,
                });
            }
        }
        out
    }
}

/// One corruption case of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub atoms: Vec<Atom>,
    pub beta_star: Coefficients,
    pub zeta: Vec<f64>,
    pub r: usize,
    pub clip_multipliers: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub ensemble_size: usize,
    pub beta_floor: f64,
    pub transform: ScoreTransform,
    pub score_scale: ScoreScale,
    pub fit: FitConfig,
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beta_star.classes() != 1 {
            return Err(CopsError::invalid("simulation supports binary models (K = 1) only"));
        }
        if self.atoms.is_empty() {
            return Err(CopsError::invalid("simulation needs at least one atom"));
        }
        for (j, atom) in self.atoms.iter().enumerate() {
            CopsError::check_dim("atom features", self.beta_star.dim(), atom.x.len())?;
            if atom.count == 0 {
                return Err(CopsError::invalid(format!("atom {j} has count 0")));
            }
            if atom.x.iter().any(|v| !v.is_finite()) {
                return Err(CopsError::invalid(format!("atom {j} has non-finite features")));
            }
        }
        CopsError::check_dim("zeta", self.atoms.len(), self.zeta.len())?;
        if self.zeta.iter().any(|z| !z.is_finite()) {
            return Err(CopsError::invalid("zeta must be finite"));
        }
        if self.r == 0 {
            return Err(CopsError::invalid("r must be at least 1"));
        }
        if self.ensemble_size < 2 {
            return Err(CopsError::invalid("ensemble_size must be at least 2"));
        }
        for &m in &self.clip_multipliers {
            if !(m > 1.0) {
                return Err(CopsError::invalid(format!("clip multiplier {m} must exceed 1")));
            }
        }
        if !(self.beta_floor >= 0.0) {
            return Err(CopsError::invalid("beta_floor must be >= 0"));
        }
        self.fit.validate()
    }

    pub fn total_rows(&self) -> usize {
        self.atoms.iter().map(|a| a.count).sum()
    }

    /// `P(y = 1)` at atom `j`.
    pub fn positive_rate(&self, j: usize, corrupted: bool) -> f64 {
        let offset = if corrupted { self.zeta[j] } else { 0.0 };
        let logit: f64 = self.beta_star.row(0).iter().zip(&self.atoms[j].x).map(|(b, x)| b * x).sum::<f64>() + offset;
        1.0 / (1.0 + (-logit).exp())
    }
}

fn logistic_sample(spec: &SimulationSpec, seed: u64, corrupted: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.total_rows();
    let mut features = Vec::with_capacity(n * spec.beta_star.dim());
    let mut labels = Vec::with_capacity(n);
    for (j, atom) in spec.atoms.iter().enumerate() {
        let p = spec.positive_rate(j, corrupted);
        for _ in 0..atom.count {
            features.extend_from_slice(&atom.x);
            labels.push(usize::from(rng.random::<f64>() < p));
        }
    }
    Dataset::labeled(spec.beta_star.dim(), 1, features, labels).expect("validated spec yields a valid dataset")
}

/// Rows grouped by atom, labels drawn independently per row. Deterministic
/// in `seed`.
pub fn generate_dataset(spec: &SimulationSpec, seed: u64, corrupted: bool) -> Result<Dataset> {
    spec.validate()?;
    Ok(logistic_sample(spec, seed, corrupted))
}

/// `L(β̄; T) − L(β*; T)`, evaluated row by row.
pub fn regret(beta_bar: &Coefficients, beta_star: &Coefficients, test: &Dataset) -> Result<f64> {
    Ok(dataset_loss(beta_bar, test, None)? - dataset_loss(beta_star, test, None)?)
}

/// Labeled dataset collapsed to distinct `(x, y)` rows with multiplicities.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomTable {
    rows: Vec<(Vec<f64>, usize)>,
    counts: Vec<f64>,
    total: usize,
    classes: usize,
}

impl AtomTable {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let labels = data.require_labels()?;
        let mut index: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
        let mut rows = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for (x, &y) in data.rows().zip(labels) {
            let key = (x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y);
            let slot = *index.entry(key).or_insert_with(|| {
                rows.push((x.to_vec(), y));
                counts.push(0.0);
                rows.len() - 1
            });
            counts[slot] += 1.0;
        }
        Ok(Self {
            rows,
            counts,
            total: data.len(),
            classes: data.classes(),
        })
    }

    /// Draws a clean or corrupted sample directly in aggregated form: the
    /// positive count of each atom is binomial.
    pub fn sample(spec: &SimulationSpec, seed: u64, corrupted: bool) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut counts = Vec::new();
        for (j, atom) in spec.atoms.iter().enumerate() {
            let p = spec.positive_rate(j, corrupted);
            let positives = Binomial::new(atom.count as u64, p)
                .map_err(|e| CopsError::invalid(e.to_string()))?
                .sample(&mut rng) as usize;
            for (y, c) in [(0, atom.count - positives), (1, positives)] {
                if c > 0 {
                    rows.push((atom.x.clone(), y));
                    counts.push(c as f64);
                }
            }
        }
        Ok(Self {
            rows,
            counts,
            total: spec.total_rows(),
            classes: 1,
        })
    }

    /// Row-wise dataset with the same multiset of rows.
    pub fn expand(&self) -> Dataset {
        let dim = self.rows.first().map_or(0, |(x, _)| x.len());
        let mut features = Vec::with_capacity(self.total * dim);
        let mut labels = Vec::with_capacity(self.total);
        for ((x, y), &c) in self.rows.iter().zip(&self.counts) {
            for _ in 0..c as usize {
                features.extend_from_slice(x);
                labels.push(*y);
            }
        }
        Dataset::labeled(dim, self.classes, features, labels).expect("table rows share one shape")
    }

    pub fn distinct(&self) -> usize {
        self.rows.len()
    }

    /// Same value as the row-wise dataset loss.
    pub fn loss(&self, beta: &Coefficients) -> Result<f64> {
        CopsError::check_dim("dataset classes", self.classes, beta.classes())?;
        let mut scratch = vec![0.0; beta.classes() + 1];
        let mut total = 0.0;
        for ((x, y), c) in self.rows.iter().zip(&self.counts) {
            CopsError::check_dim("dataset dimension", beta.dim(), x.len())?;
            log_softmax_into(beta, x, &mut scratch);
            total -= c * scratch[*y];
        }
        Ok(total / self.total as f64)
    }

    pub fn regret(&self, beta_bar: &Coefficients, beta_star: &Coefficients) -> Result<f64> {
        Ok(self.loss(beta_bar)? - self.loss(beta_star)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Uniform,
    Vanilla,
    /// Clip at this multiple of the smallest positive sampling score.
    Clip(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Coreset selection: labels known before sampling.
    WithLabels,
    /// Active learning: labels queried after sampling.
    WithoutLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub selection: Selection,
    pub labels: LabelMode,
}

impl Method {
    pub fn uniform() -> Self {
        Self {
            selection: Selection::Uniform,
            labels: LabelMode::WithLabels,
        }
    }

    pub fn coreset(selection: Selection) -> Self {
        Self {
            selection,
            labels: LabelMode::WithLabels,
        }
    }

    pub fn active(selection: Selection) -> Self {
        Self {
            selection,
            labels: LabelMode::WithoutLabels,
        }
    }

    /// Stable identifier, e.g. `uniform`, `coreset_vanilla`, `active_clip3`.
    pub fn id(&self) -> String {
        let prefix = match self.labels {
            LabelMode::WithLabels => "coreset",
            LabelMode::WithoutLabels => "active",
        };
        match self.selection {
            Selection::Uniform => "uniform".to_string(),
            Selection::Vanilla => format!("{prefix}_vanilla"),
            Selection::Clip(m) => format!("{prefix}_clip{m}"),
        }
    }
}

const STREAM_SAMPLING: u64 = 1;
const STREAM_PROBE: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_ENSEMBLE: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of stream keys.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(base), |acc, &k| splitmix(acc ^ splitmix(k)))
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed of trial `trial` under master seed `master`.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, &[trial as u64])
}

/// Everything a trial shares across methods: the corrupted sampling set, the
/// probe ensemble and its calibrated scores, and the clean test set.
pub struct TrialContext {
    spec: SimulationSpec,
    seed: u64,
    sampling: Dataset,
    ensemble: ProbeEnsemble,
    coreset_scores: ScoreSet,
    active_scores: ScoreSet,
    test: AtomTable,
}

impl TrialContext {
    pub fn build(spec: &SimulationSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let sampling = logistic_sample(spec, derive_seed(seed, &[STREAM_SAMPLING]), true);
        let probe = logistic_sample(spec, derive_seed(seed, &[STREAM_PROBE]), true);
        let ensemble = train_ensemble(
            &probe,
            spec.ensemble_size,
            EnsembleMode::IndependentSplits,
            derive_seed(seed, &[STREAM_ENSEMBLE]),
            &spec.fit,
        )?;
        let scale = match spec.score_scale {
            ScoreScale::Raw => 1.0,
            ScoreScale::Calibrated => ensemble.calibration(),
        };
        // Rows repeat atom by atom, so each distinct (atom, label) is scored once.
        let mut coreset = Vec::with_capacity(sampling.len());
        let mut active = Vec::with_capacity(sampling.len());
        let labels = sampling.labels().expect("sampling set is labeled");
        let mut start = 0;
        for atom in &spec.atoms {
            let by_label = [
                scale * ensemble.coreset_score(&atom.x, 0),
                scale * ensemble.coreset_score(&atom.x, 1),
            ];
            let a = scale * ensemble.active_score(&atom.x);
            for &y in &labels[start..start + atom.count] {
                coreset.push(by_label[y]);
                active.push(a);
            }
            start += atom.count;
        }
        let coreset_scores = ScoreSet {
            u: coreset,
            kind: ScoreKind::Coreset,
            estimator: Estimator::Ensemble,
        };
        let active_scores = ScoreSet {
            u: active,
            kind: ScoreKind::Active,
            estimator: Estimator::Ensemble,
        };
        let test = AtomTable::sample(spec, derive_seed(seed, &[STREAM_TEST]), false)?;
        Ok(Self {
            spec: spec.clone(),
            seed,
            sampling,
            ensemble,
            coreset_scores,
            active_scores,
            test,
        })
    }

    pub fn sampling_set(&self) -> &Dataset {
        &self.sampling
    }

    pub fn ensemble(&self) -> &ProbeEnsemble {
        &self.ensemble
    }

    pub fn coreset_scores(&self) -> &ScoreSet {
        &self.coreset_scores
    }

    pub fn active_scores(&self) -> &ScoreSet {
        &self.active_scores
    }

    pub fn run(&self, method: Method) -> Result<TrialResult> {
        let spec = &self.spec;
        let alpha_multiplier = match method.selection {
            Selection::Clip(m) => Some(m),
            _ => None,
        };
        let config = SamplingConfig {
            transform: spec.transform,
            score_scale: spec.score_scale,
            alpha_multiplier,
            beta_floor: spec.beta_floor,
            subsample_size: spec.r,
            seed: derive_seed(self.seed, &[fnv1a(&method.id())]),
        };
        let output = match (method.selection, method.labels) {
            (Selection::Uniform, _) => uniform_coreset(&self.sampling, &config, &spec.fit)?,
            (_, LabelMode::WithLabels) => coreset_from_scores(&self.sampling, &self.coreset_scores, &config, &spec.fit)?,
            (_, LabelMode::WithoutLabels) => {
                let labels = self.sampling.labels().expect("sampling set is labeled");
                let mut oracle = |i: usize| -> std::result::Result<usize, String> { Ok(labels[i]) };
                active_from_scores(
                    &self.sampling.without_labels(),
                    &mut oracle,
                    &self.active_scores,
                    &config,
                    &spec.fit,
                )?
            }
        };
        let beta_bar = &output.fit.beta;
        let components: Vec<f64> = beta_bar
            .as_slice()
            .iter()
            .zip(spec.beta_star.as_slice())
            .map(|(a, b)| (a - b).abs())
            .collect();
        Ok(TrialResult {
            method: method.id(),
            param_error_l2: components.iter().map(|c| c * c).sum::<f64>().sqrt(),
            param_error_components: components,
            regret: self.test.regret(beta_bar, &spec.beta_star)?,
            converged: output.fit.converged,
            labels_queried: output.report.labels_queried,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub method: String,
    /// `|β̄ − β*|` per coordinate of the canonical vectorization.
    pub param_error_components: Vec<f64>,
    pub param_error_l2: f64,
    pub regret: f64,
    pub converged: bool,
    pub labels_queried: usize,
    /// Trial seed the result was derived from.
    pub seed: u64,
}

/// Runs one method on a freshly generated trial.
pub fn run_trial(spec: &SimulationSpec, method: Method, seed: u64) -> Result<TrialResult> {
    TrialContext::build(spec, seed)?.run(method)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                median: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, median, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub case: String,
    pub trial: usize,
    #[serde(flatten)]
    pub result: TrialResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub case: String,
    pub method: String,
    pub trial: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub case: String,
    pub method: String,
    pub completed: usize,
    pub failed: usize,
    pub regret: Summary,
    pub param_error_l2: Summary,
    pub param_error_components: Vec<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub trials: usize,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
}

impl ExperimentReport {
    /// Builds summaries from per-trial records, ordered by the given cases
    /// and methods.
    pub fn assemble(
        trials: usize,
        cases: &[String],
        methods: &[String],
        records: Vec<TrialRecord>,
        failures: Vec<TrialFailure>,
    ) -> Self {
        let mut summaries = Vec::new();
        for case in cases {
            for method in methods {
                let rows: Vec<&TrialResult> = records
                    .iter()
                    .filter(|r| &r.case == case && &r.result.method == method)
                    .map(|r| &r.result)
                    .collect();
                let failed = failures.iter().filter(|f| &f.case == case && &f.method == method).count();
                let pick = |f: &dyn Fn(&TrialResult) -> f64| Summary::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                let dims = rows.first().map_or(0, |r| r.param_error_components.len());
                summaries.push(MethodSummary {
                    case: case.clone(),
                    method: method.clone(),
                    completed: rows.len(),
                    failed,
                    regret: pick(&|r| r.regret),
                    param_error_l2: pick(&|r| r.param_error_l2),
                    param_error_components: (0..dims).map(|j| pick(&|r| r.param_error_components[j])).collect(),
                });
            }
        }
        Self {
            trials,
            summaries,
            records,
            failures,
        }
    }

    pub fn summary(&self, case: &str, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.case == case && s.method == method)
    }
}

/// Runs every case × trial × method. Trials execute in parallel; results are
/// gathered in a fixed order so the report does not depend on scheduling.
/// A failing trial is recorded and the experiment continues.
pub fn run_experiment(config: &ExperimentConfig, methods: &[Method], trials: usize, seed: u64) -> Result<ExperimentReport> {
    config.validate()?;
    if trials == 0 {
        return Err(CopsError::invalid("trials must be at least 1"));
    }
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for case in &config.cases {
        let spec = config.spec_for(case)?;
        let outcomes: Vec<Vec<(Method, Result<TrialResult>)>> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let tseed = trial_seed(seed, t);
                match TrialContext::build(&spec, tseed) {
                    Ok(ctx) => methods.iter().map(|&m| (m, ctx.run(m))).collect(),
                    Err(e) => {
                        let msg = e.to_string();
                        methods
                            .iter()
                            .map(|&m| (m, Err(CopsError::invalid(format!("trial setup failed: {msg}")))))
                            .collect()
                    }
                }
            })
            .collect();
        for (t, per_method) in outcomes.into_iter().enumerate() {
            for (method, outcome) in per_method {
                match outcome {
                    Ok(result) => records.push(TrialRecord {
                        case: case.name.clone(),
                        trial: t,
                        result,
                    }),
                    Err(e) => failures.push(TrialFailure {
                        case: case.name.clone(),
                        method: method.id(),
                        trial: t,
                        seed: trial_seed(seed, t),
                        error: e.to_string(),
                    }),
                }
            }
        }
    }
    let cases: Vec<String> = config.cases.iter().map(|c| c.name.clone()).collect();
    let ids: Vec<String> = methods.iter().map(Method::id).collect();
    Ok(ExperimentReport::assemble(trials, &cases, &ids, records, failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::paper();
        for (atom, n) in c.atoms.iter_mut().zip([200, 4000, 4000]) {
            atom.count = n;
        }
        c.r = 300;
        c
    }

    #[test]
    fn bundled_config_matches_the_three_atom_design() {
        let c = ExperimentConfig::paper();
        c.validate().unwrap();
        let xs: Vec<_> = c.atoms.iter().map(|a| (a.x.clone(), a.count)).collect();
        assert_eq!(
            xs,
            vec![(vec![1.0, 0.0], 1000), (vec![0.1, 0.1], 100_000), (vec![0.0, 1.0], 100_000)]
        );
        assert_eq!(c.beta_star.as_slice(), &[2.0, 2.0]);
        assert_eq!(c.r, 1000);
        assert_eq!(c.clip_multipliers, vec![3.0, 10.0]);
        let zetas: Vec<f64> = c.cases.iter().map(|k| k.zeta[0]).collect();
        assert_eq!(zetas, vec![0.0, -1.0, -3.0]);
        assert_eq!(c.beta_floor, 0.1);
    }

    #[test]
    fn method_ids_are_stable() {
        let ids: Vec<String> = ExperimentConfig::paper().methods().iter().map(Method::id).collect();
        assert_eq!(
            ids,
            [
                "uniform",
                "coreset_vanilla",
                "coreset_clip3",
                "coreset_clip10",
                "active_vanilla",
                "active_clip3",
                "active_clip10"
            ]
        );
    }

    #[test]
    fn generated_labels_follow_the_logistic_rate() {
        let c = ExperimentConfig::paper();
        let clean = c.spec_for(&c.cases[0]).unwrap();
        let data = generate_dataset(&clean, 17, false).unwrap();
        assert_eq!(data.len(), 201_000);
        let labels = data.labels().unwrap();
        let x2_rate = labels[1000..101_000].iter().sum::<usize>() as f64 / 100_000.0;
        let want = 1.0 / (1.0 + (-0.4f64).exp());
        assert_abs_diff_eq!(want, 0.59869, epsilon = 1e-5);
        assert!((x2_rate - want).abs() < 0.005, "{x2_rate}");

        let corrupt = c.spec_for(&c.cases[2]).unwrap();
        let data = generate_dataset(&corrupt, 17, true).unwrap();
        let x1_rate = data.labels().unwrap()[..1000].iter().sum::<usize>() as f64 / 1000.0;
        let want = 1.0 / (1.0 + 1f64.exp());
        assert_abs_diff_eq!(want, 0.26894, epsilon = 1e-5);
        assert!((x1_rate - want).abs() < 0.04, "{x1_rate}");

        assert_eq!(data, generate_dataset(&corrupt, 17, true).unwrap());
    }

    #[test]
    fn regret_examples() {
        let c = ExperimentConfig::paper();
        let spec = c.spec_for(&c.cases[0]).unwrap();
        let test = generate_dataset(&spec, 3, false).unwrap();
        assert_eq!(regret(&spec.beta_star, &spec.beta_star, &test).unwrap(), 0.0);
        let zero = Coefficients::zeros(1, 2);
        assert!(regret(&zero, &spec.beta_star, &test).unwrap() > 0.0);
        let doubled: Vec<usize> = (0..test.len()).chain(0..test.len()).collect();
        let twice = test.select(&doubled);
        assert_abs_diff_eq!(
            regret(&zero, &spec.beta_star, &test).unwrap(),
            regret(&zero, &spec.beta_star, &twice).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn atom_table_matches_row_wise_loss() {
        let c = small_config();
        let spec = c.spec_for(&c.cases[1]).unwrap();
        let data = generate_dataset(&spec, 8, true).unwrap();
        let table = AtomTable::from_dataset(&data).unwrap();
        assert_eq!(table.distinct(), 6);
        let b = Coefficients::from_rows(&[[1.3, 2.4]]).unwrap();
        assert_abs_diff_eq!(
            table.loss(&b).unwrap(),
            dataset_loss(&b, &data, None).unwrap(),
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            table.regret(&b, &spec.beta_star).unwrap(),
            regret(&b, &spec.beta_star, &data).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn sampled_table_matches_its_expansion() {
        let c = small_config();
        let spec = c.spec_for(&c.cases[2]).unwrap();
        let table = AtomTable::sample(&spec, 21, false).unwrap();
        let rows = table.expand();
        assert_eq!(rows.len(), spec.total_rows());
        let b = Coefficients::from_rows(&[[0.4, 1.7]]).unwrap();
        assert_abs_diff_eq!(
            table.regret(&b, &spec.beta_star).unwrap(),
            regret(&b, &spec.beta_star, &rows).unwrap(),
            epsilon = 1e-10
        );
        assert_eq!(table.regret(&spec.beta_star, &spec.beta_star).unwrap(), 0.0);
    }

    #[test]
    fn uniform_trial_and_label_budget() {
        let c = small_config();
        let spec = c.spec_for(&c.cases[0]).unwrap();
        let ctx = TrialContext::build(&spec, 5).unwrap();
        let u = ctx.run(Method::uniform()).unwrap();
        assert!(u.converged);
        let a = ctx.run(Method::active(Selection::Vanilla)).unwrap();
        assert!(a.labels_queried <= spec.r);
        assert_eq!(a, run_trial(&spec, Method::active(Selection::Vanilla), 5).unwrap());
    }

    #[test]
    fn single_trial_report_equals_the_trial() {
        let c = small_config();
        let methods = [Method::uniform(), Method::coreset(Selection::Clip(3.0))];
        let report = run_experiment(&c, &methods, 1, 11).unwrap();
        assert_eq!(report.records.len(), 6);
        for rec in &report.records {
            let s = report.summary(&rec.case, &rec.result.method).unwrap();
            assert_eq!(s.regret.mean, rec.result.regret);
            assert_eq!(s.regret.median, rec.result.regret);
            assert_eq!(s.regret.std, 0.0);
            assert_eq!(s.param_error_l2.mean, rec.result.param_error_l2);
        }
    }

    #[test]
    fn method_order_does_not_change_aggregates() {
        let c = small_config();
        let forward = c.methods();
        let mut backward = forward.clone();
        backward.reverse();
        let a = run_experiment(&c, &forward, 2, 4).unwrap();
        let b = run_experiment(&c, &backward, 2, 4).unwrap();
        for s in &a.summaries {
            assert_eq!(Some(s), b.summary(&s.case, &s.method));
        }
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 3.0, 2.0, 10.0]);
        assert_eq!(s.mean, 4.0);
        assert_eq!(s.median, 2.5);
        assert_abs_diff_eq!(s.std, (50.0f64 / 3.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn invalid_specs() {
        let mut c = ExperimentConfig::paper();
        c.cases[0].zeta = vec![0.0];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::paper();
        c.atoms[1].count = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::paper();
        c.clip_multipliers = vec![0.5];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::paper();
        c.beta_star = Coefficients::zeros(2, 2);
        assert!(c.validate().is_err());
    }
}
