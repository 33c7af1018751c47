//! Synthetic data, decision rules and the comparison harnesses.
//!
//! All randomness comes from ChaCha20 seeded with a `u64`. Each seed drives
//! independent streams: stream 0 builds the training instance, stream 1 the
//! held-out test set and stream 2 random initializations.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{run_with, RegressionProblem, RunOptions};
use crate::linalg::{self, Matrix};
use crate::precond::{Family, PreconditionerConfig, PreconditionerState, Window};
use crate::{Error, Result};

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normals(rng: &mut ChaCha20Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianRegressionSpec {
    pub n: usize,
    pub d: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl GaussianRegressionSpec {
    pub fn is_over_parameterized(&self) -> bool {
        self.d > self.n
    }
}

/// `X`, `w_star` and `zeta` with i.i.d. standard normal entries, the noise
/// scaled by `noise_scale`.
pub fn gen_gaussian_regression(spec: &GaussianRegressionSpec) -> Result<RegressionProblem> {
    if spec.n == 0 || spec.d == 0 {
        return Err(Error::InvalidParameter("n and d must be positive"));
    }
    let mut r = rng(spec.seed, TRAIN_STREAM);
    let x = Matrix::from_vec(spec.n, spec.d, normals(&mut r, spec.n * spec.d, 1.0))?;
    let w_star = normals(&mut r, spec.d, 1.0);
    let zeta = normals(&mut r, spec.n, spec.noise_scale);
    RegressionProblem::new(x, w_star, zeta, 0.0)
}

/// Fresh draws from the same distribution, labelled with the instance's
/// `w_star`.
pub fn gen_gaussian_test_set(spec: &GaussianRegressionSpec, w_star: &[f64], size: usize) -> Result<(Matrix, Vec<f64>)> {
    if w_star.len() != spec.d {
        return Err(Error::DimensionMismatch { expected: spec.d, found: w_star.len() });
    }
    let mut r = rng(spec.seed, TEST_STREAM);
    let x = Matrix::from_vec(size, spec.d, normals(&mut r, size * spec.d, 1.0))?;
    let noise = normals(&mut r, size, spec.noise_scale);
    let y = linalg::add(&x.matvec(w_star)?, &noise);
    Ok((x, y))
}

/// Mean of `(x^T w - y)^2` over the rows.
pub fn mean_squared_error(x: &Matrix, y: &[f64], w: &[f64]) -> Result<f64> {
    let r = linalg::sub(&x.matvec(w)?, y);
    Ok(linalg::dot(&r, &r) / y.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginClassificationSpec {
    pub n: usize,
    pub level: f64,
    pub positive_prob: f64,
    pub seed: u64,
}

impl MarginClassificationSpec {
    pub fn dim(&self) -> usize {
        6 * self.n
    }

    fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::InstanceTooSmall { n: self.n });
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidParameter("level must lie in (0, 1)"));
        }
        if !(self.positive_prob > 0.0 && self.positive_prob < 1.0) {
            return Err(Error::InvalidParameter("positive probability must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginData {
    pub x: Matrix,
    /// Labels in `{+level, -level}`.
    pub y: Vec<f64>,
}

/// Writes one sample into `row` (length `6n`) using feature slot `slot`.
/// The label sits in feature 0, features 1 and 2 are always 1, and the
/// sample's private block starts at `3 + 5 slot`: a single 1 for the
/// positive class, five 1s for the negative class.
fn fill_margin_row(row: &mut [f64], slot: usize, positive: bool, level: f64) {
    row[0] = if positive { level } else { -level };
    row[1] = 1.0;
    row[2] = 1.0;
    let start = 3 + 5 * slot;
    let width = if positive { 1 } else { 5 };
    row[start..start + width].iter_mut().for_each(|v| *v = 1.0);
}

/// Builds the feature matrix for given class memberships, sample `i`
/// using feature slot `i`.
pub fn margin_features(positive: &[bool], level: f64) -> Result<Matrix> {
    let n = positive.len();
    if n < 3 {
        return Err(Error::InstanceTooSmall { n });
    }
    let d = 6 * n;
    let mut data = vec![0.0; n * d];
    for (i, &p) in positive.iter().enumerate() {
        fill_margin_row(&mut data[i * d..(i + 1) * d], i, p, level);
    }
    Matrix::from_vec(n, d, data)
}

pub fn gen_margin_classification(spec: &MarginClassificationSpec) -> Result<MarginData> {
    spec.validate()?;
    let mut r = rng(spec.seed, TRAIN_STREAM);
    let positive: Vec<bool> = (0..spec.n).map(|_| r.random::<f64>() < spec.positive_prob).collect();
    let x = margin_features(&positive, spec.level)?;
    let y = positive.iter().map(|&p| if p { spec.level } else { -spec.level }).collect();
    Ok(MarginData { x, y })
}

/// `size` fresh samples in the training feature space. Sample `q` reuses
/// feature slot `q mod n`, so the construction is the training one with
/// fresh labels.
pub fn gen_margin_test_set(spec: &MarginClassificationSpec, size: usize) -> Result<MarginData> {
    spec.validate()?;
    let mut r = rng(spec.seed, TEST_STREAM);
    let d = spec.dim();
    let mut data = vec![0.0; size * d];
    let mut y = Vec::with_capacity(size);
    for q in 0..size {
        let positive = r.random::<f64>() < spec.positive_prob;
        fill_margin_row(&mut data[q * d..(q + 1) * d], q % spec.n, positive, spec.level);
        y.push(if positive { spec.level } else { -spec.level });
    }
    Ok(MarginData { x: Matrix::from_vec(size, d, data)?, y })
}

/// Nearest point of `{-level, +level}`; ties go to `+level`.
pub fn quant(level: f64, v: f64) -> f64 {
    if v >= 0.0 {
        level
    } else {
        -level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionRule {
    /// `quant(w[0] * y_test + w[1] + w[2])`.
    FirstThreeFeatures,
    /// `quant(x^T w)`.
    FullSignRule,
}

pub fn evaluate_classifier(w: &[f64], test: &MarginData, rule: DecisionRule, level: f64) -> Result<f64> {
    if w.len() != test.x.cols() {
        return Err(Error::DimensionMismatch { expected: test.x.cols(), found: w.len() });
    }
    if test.y.is_empty() {
        return Err(Error::InvalidParameter("empty test set"));
    }
    let predictions: Vec<f64> = match rule {
        DecisionRule::FirstThreeFeatures => test.y.iter().map(|y| quant(level, w[0] * y + w[1] + w[2])).collect(),
        DecisionRule::FullSignRule => test.x.matvec(w)?.into_iter().map(|v| quant(level, v)).collect(),
    };
    let correct = predictions.iter().zip(&test.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test.y.len() as f64)
}

/// How a method picks its constant step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Fixed(f64),
    /// `scale / (sigma_max^2 + lambda)`.
    InverseCurvature(f64),
}

impl StepSize {
    pub fn resolve(&self, problem: &RegressionProblem) -> f64 {
        match *self {
            StepSize::Fixed(eta) => eta,
            StepSize::InverseCurvature(scale) => {
                let s = problem.decomposition().sigma_max();
                scale / (s * s + problem.lambda())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Method {
    pub name: String,
    pub config: PreconditionerConfig,
    pub step: StepSize,
    pub momentum: f64,
}

impl Method {
    pub fn new(name: &str, config: PreconditionerConfig, step: StepSize) -> Self {
        Self { name: name.into(), config, step, momentum: 0.0 }
    }
}

/// A fresh state for `config`, carrying the problem's decomposition.
pub fn preconditioner_for(problem: &RegressionProblem, config: PreconditionerConfig) -> Result<PreconditionerState> {
    Ok(PreconditionerState::new(config, problem.dim())?.with_decomposition(problem.decomposition().clone()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    Gaussian { scale: f64 },
}

impl Init {
    pub fn draw(&self, seed: u64, dim: usize) -> Vec<f64> {
        match *self {
            Init::Zero => vec![0.0; dim],
            Init::Gaussian { scale } => normals(&mut rng(seed, INIT_STREAM), dim, scale),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Median,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
        }
    }

    fn apply(self, values: &[f64]) -> f64 {
        if values.is_empty() {
            return f64::NAN;
        }
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                let m = v.len() / 2;
                if v.len() % 2 == 1 {
                    v[m]
                } else {
                    0.5 * (v[m - 1] + v[m])
                }
            }
        }
    }
}

/// Metrics of one trained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Half squared residual plus ridge term.
    pub training_error: f64,
    /// Mean squared error for regression, misclassification rate for
    /// classification.
    pub test_error: f64,
    /// `||w - w_star||`, regression only.
    pub distance_to_truth: Option<f64>,
    /// Classification only.
    pub accuracy: Option<f64>,
    pub distance_to_min_norm: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub run: usize,
    pub seed: u64,
    pub metrics: Metrics,
    pub final_iterate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub aggregation: Aggregation,
    pub runs: usize,
    pub training_error: f64,
    pub test_error: f64,
    pub distance_to_truth: Option<f64>,
    pub accuracy: Option<f64>,
    pub distance_to_min_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub seeds: Vec<u64>,
    pub records: Vec<RunRecord>,
    pub summaries: Vec<MethodSummary>,
}

impl ExperimentReport {
    /// Summarizes `records` per method, in first-appearance order.
    pub fn from_records(seeds: Vec<u64>, records: Vec<RunRecord>, aggregation: Aggregation) -> Self {
        let mut names: Vec<&str> = Vec::new();
        for r in &records {
            if !names.contains(&r.method.as_str()) {
                names.push(&r.method);
            }
        }
        let summaries = names
            .iter()
            .map(|name| {
                let rows: Vec<&Metrics> = records.iter().filter(|r| r.method == *name).map(|r| &r.metrics).collect();
                let agg =
                    |f: &dyn Fn(&Metrics) -> f64| aggregation.apply(&rows.iter().map(|m| f(m)).collect::<Vec<_>>());
                let optional = |f: &dyn Fn(&Metrics) -> Option<f64>| {
                    let vals: Option<Vec<f64>> = rows.iter().map(|m| f(m)).collect();
                    vals.map(|v| aggregation.apply(&v))
                };
                MethodSummary {
                    method: String::from(*name),
                    aggregation,
                    runs: rows.len(),
                    training_error: agg(&|m| m.training_error),
                    test_error: agg(&|m| m.test_error),
                    distance_to_truth: optional(&|m| m.distance_to_truth),
                    accuracy: optional(&|m| m.accuracy),
                    distance_to_min_norm: agg(&|m| m.distance_to_min_norm),
                }
            })
            .collect();
        Self { seeds, records, summaries }
    }

    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn records_for<'a, 'm>(&'a self, method: &'m str) -> impl Iterator<Item = &'a RunRecord> + 'm
    where
        'a: 'm,
    {
        self.records.iter().filter(move |r| r.method == method)
    }
}

/// A failure tagged with the method that produced it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("method {method}: {error}")]
pub struct MethodError {
    pub method: String,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableExperimentConfig {
    pub methods: Vec<Method>,
    pub spec: GaussianRegressionSpec,
    pub lambda: f64,
    pub steps: usize,
    /// Run `r` uses data seed `spec.seed + r`.
    pub runs: usize,
    pub test_size: usize,
    pub init: Init,
    pub early_stop: Option<f64>,
}

impl TableExperimentConfig {
    /// The four regression methods compared in the Gaussian study, with
    /// untruncated gradient histories.
    pub fn standard_methods() -> Vec<Method> {
        let adagrad = |f: Family| PreconditionerConfig::new(f).with_window(Window::Unbounded);
        vec![
            Method::new("GD", PreconditionerConfig::new(Family::Identity), StepSize::InverseCurvature(1.0)),
            Method::new("AM1", adagrad(Family::DiagAdaGrad), StepSize::Fixed(0.5)),
            Method::new("AM2", adagrad(Family::DiagAdaGradSquared), StepSize::Fixed(0.05)),
            Method::new("AM3", adagrad(Family::SpanProjectedDiagAdaGrad), StepSize::Fixed(0.5)),
        ]
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|r| self.spec.seed.wrapping_add(r)).collect()
    }
}

/// Trains one method on one regression instance.
pub fn train_regression(
    problem: &RegressionProblem,
    method: &Method,
    steps: usize,
    w0: &[f64],
    early_stop: Option<f64>,
) -> core::result::Result<Vec<f64>, MethodError> {
    let tag = |error| MethodError { method: method.name.clone(), error };
    let state = preconditioner_for(problem, method.config).map_err(tag)?;
    let mut opts = RunOptions::new(method.step.resolve(problem), steps).with_momentum(method.momentum);
    opts.early_stop = early_stop;
    let traj = run_with(problem, state, &opts, w0).map_err(tag)?;
    Ok(traj.final_iterate().to_vec())
}

/// Runs a single `(method, run)` cell of a Gaussian table experiment.
pub fn run_table_cell(
    config: &TableExperimentConfig,
    method: &Method,
    run: usize,
) -> core::result::Result<RunRecord, MethodError> {
    let tag = |error| MethodError { method: method.name.clone(), error };
    let spec = GaussianRegressionSpec { seed: config.spec.seed.wrapping_add(run as u64), ..config.spec };
    let problem = gen_gaussian_regression(&spec).and_then(|p| p.with_lambda(config.lambda)).map_err(tag)?;
    let (test_x, test_y) = gen_gaussian_test_set(&spec, problem.w_star(), config.test_size).map_err(tag)?;
    let w0 = config.init.draw(spec.seed, spec.d);
    let w = train_regression(&problem, method, config.steps, &w0, config.early_stop)?;
    let min_norm = problem.decomposition().min_norm_solution(problem.y()).map_err(tag)?;
    let metrics = Metrics {
        training_error: problem.loss(&w).map_err(tag)?,
        test_error: if config.test_size == 0 {
            f64::NAN
        } else {
            mean_squared_error(&test_x, &test_y, &w).map_err(tag)?
        },
        distance_to_truth: Some(linalg::norm2(&linalg::sub(&w, problem.w_star()))),
        accuracy: None,
        distance_to_min_norm: linalg::norm2(&linalg::sub(&w, &min_norm)),
        steps: config.steps,
    };
    Ok(RunRecord { method: method.name.clone(), run, seed: spec.seed, metrics, final_iterate: w })
}

/// Every method on every run, averaged per method.
pub fn run_table_experiment(config: &TableExperimentConfig) -> core::result::Result<ExperimentReport, MethodError> {
    let mut records = Vec::new();
    for method in &config.methods {
        for run in 0..config.runs {
            records.push(run_table_cell(config, method, run)?);
        }
    }
    Ok(ExperimentReport::from_records(config.seeds(), records, Aggregation::Mean))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginExperimentConfig {
    pub methods: Vec<Method>,
    pub n: usize,
    pub level: f64,
    pub positive_prob: f64,
    pub seed: u64,
    /// Realization `r` uses seed `seed + r`.
    pub realizations: usize,
    pub steps: usize,
    pub test_size: usize,
    pub rule: DecisionRule,
}

impl MarginExperimentConfig {
    /// Gradient descent against the squared AdaGrad variant with a window
    /// of 10, both at step `1 / sigma_max^2`.
    pub fn standard_methods() -> Vec<Method> {
        vec![
            Method::new("GD", PreconditionerConfig::new(Family::Identity), StepSize::InverseCurvature(1.0)),
            Method::new(
                "AV",
                PreconditionerConfig::new(Family::DiagAdaGradSquared).with_window(Window::Bounded(10)),
                StepSize::InverseCurvature(1.0),
            ),
        ]
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.realizations as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

pub fn run_margin_cell(
    config: &MarginExperimentConfig,
    method: &Method,
    realization: usize,
) -> core::result::Result<RunRecord, MethodError> {
    let tag = |error| MethodError { method: method.name.clone(), error };
    let spec = MarginClassificationSpec {
        n: config.n,
        level: config.level,
        positive_prob: config.positive_prob,
        seed: config.seed.wrapping_add(realization as u64),
    };
    let data = gen_margin_classification(&spec).map_err(tag)?;
    let test = gen_margin_test_set(&spec, config.test_size).map_err(tag)?;
    let problem = RegressionProblem::from_labels(data.x, &data.y, 0.0).map_err(tag)?;
    let w0 = vec![0.0; spec.dim()];
    let w = train_regression(&problem, method, config.steps, &w0, None)?;
    let accuracy = evaluate_classifier(&w, &test, config.rule, config.level).map_err(tag)?;
    let min_norm = problem.w_star();
    let metrics = Metrics {
        training_error: problem.loss(&w).map_err(tag)?,
        test_error: 1.0 - accuracy,
        distance_to_truth: None,
        accuracy: Some(accuracy),
        distance_to_min_norm: linalg::norm2(&linalg::sub(&w, min_norm)),
        steps: config.steps,
    };
    Ok(RunRecord { method: method.name.clone(), run: realization, seed: spec.seed, metrics, final_iterate: w })
}

/// Every method on every realization, median per method.
pub fn run_margin_experiment(config: &MarginExperimentConfig) -> core::result::Result<ExperimentReport, MethodError> {
    let mut records = Vec::new();
    for method in &config.methods {
        for r in 0..config.realizations {
            records.push(run_margin_cell(config, method, r)?);
        }
    }
    Ok(ExperimentReport::from_records(config.seeds(), records, Aggregation::Median))
}

/// Learning rates and momenta searched when tuning the network baselines.
pub const DEFAULT_STEP_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
pub const DEFAULT_MOMENTUM_GRID: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub eta: f64,
    pub momentum: f64,
    /// Infinite when the run diverged.
    pub final_loss: f64,
    pub test_error: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub best: SweepCell,
}

/// Grid search over constant step size and heavy-ball momentum, ranked by
/// final training loss; ties go to the smaller step, then smaller momentum.
pub fn hyperparameter_sweep(
    problem: &RegressionProblem,
    config: PreconditionerConfig,
    etas: &[f64],
    momenta: &[f64],
    steps: usize,
    w0: &[f64],
    test: Option<(&Matrix, &[f64])>,
) -> Result<SweepResult> {
    if etas.is_empty() || momenta.is_empty() {
        return Err(Error::InvalidParameter("sweep grid must be nonempty"));
    }
    let mut cells = Vec::with_capacity(etas.len() * momenta.len());
    for &eta in etas {
        for &momentum in momenta {
            let state = preconditioner_for(problem, config)?;
            let opts = RunOptions::new(eta, steps).with_momentum(momentum);
            let cell = match run_with(problem, state, &opts, w0) {
                Ok(traj) => {
                    let w = traj.final_iterate();
                    let test_error = match test {
                        Some((x, y)) => Some(mean_squared_error(x, y, w)?),
                        None => None,
                    };
                    SweepCell { eta, momentum, final_loss: traj.final_loss(), test_error, diverged: false }
                }
                Err(Error::Diverged { .. }) | Err(Error::NonFinite) | Err(Error::NonFiniteGradient) => {
                    SweepCell { eta, momentum, final_loss: f64::INFINITY, test_error: None, diverged: true }
                }
                Err(e) => return Err(e),
            };
            cells.push(cell);
        }
    }
    let best = *cells
        .iter()
        .min_by(|a, b| {
            a.final_loss.total_cmp(&b.final_loss).then(a.eta.total_cmp(&b.eta)).then(a.momentum.total_cmp(&b.momentum))
        })
        .expect("grid is nonempty");
    Ok(SweepResult { cells, best })
}
