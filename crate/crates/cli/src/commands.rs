//! One function per subcommand.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context as _};
use precond_core::analysis::{self, default_fit_window, estimate_decay, BoundCurveParams, MIN_FIT_POINTS};
use precond_core::dynamics::{self, RegressionProblem, RunOptions, Trajectory};
use precond_core::experiments::{
    self, gen_gaussian_regression, gen_gaussian_test_set, hyperparameter_sweep, preconditioner_for, Aggregation,
    ExperimentReport, Method, MethodError, TableExperimentConfig,
};
use precond_core::linalg;
use precond_core::spectral::SpectralVector;
use precond_core::{Error, Matrix};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::io::{self, Cell, CsvTable, Header};
use crate::report;

/// Why a subcommand stopped.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or files. Exit code 1.
    Setup(anyhow::Error),
    /// The dynamics broke down. Exit code 2.
    Numerical { method: Option<String>, error: Error },
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Setup(e)
    }
}

impl From<MethodError> for Failure {
    fn from(e: MethodError) -> Self {
        Failure::Numerical { method: Some(e.method), error: e.error }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Setup(e.into())
    }
}

pub type Outcome = Result<Vec<String>, Failure>;

/// Shared state handed to every subcommand.
pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub header: Header,
    pub out: &'a Path,
    pub jobs: usize,
    pub verbosity: u8,
}

impl Context<'_> {
    fn progress(&self, msg: impl FnOnce() -> String) {
        if self.verbosity >= 2 {
            eprintln!("{}", msg());
        }
    }

    fn write_csv(&self, name: &str, table: &CsvTable) -> anyhow::Result<String> {
        table.write(&self.out.join(name), &self.header)?;
        Ok(name.to_owned())
    }

    fn write_json(&self, name: &str, body: Value) -> anyhow::Result<String> {
        io::write_json(&self.out.join(name), &self.header, body)?;
        Ok(name.to_owned())
    }
}

/// Maps `f` over `items` on up to `jobs` threads. Results keep input order.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = jobs.min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every slot is filled"))
        .collect()
}

/// File-name-safe form of a method name.
fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn first_failure<T>(results: Vec<Result<T, MethodError>>) -> Result<Vec<T>, Failure> {
    results.into_iter().map(|r| r.map_err(Failure::from)).collect()
}

/// Held-out features and labels.
type TestSet = (Matrix, Vec<f64>);

/// The training problem plus a held-out set when the data is generated.
fn load_problem(cfg: &RunConfig) -> Result<(RegressionProblem, Option<TestSet>), Failure> {
    match (&cfg.data_x, &cfg.data_y) {
        (Some(xp), Some(yp)) => {
            let x = io::read_matrix(xp)?;
            let y = io::read_vector(yp)?;
            let problem = RegressionProblem::from_labels(x, &y, cfg.lambda)
                .map_err(|e| anyhow!("data files {} and {}: {e}", xp.display(), yp.display()))?;
            Ok((problem, None))
        }
        (None, None) => {
            let spec = cfg.gaussian_spec()?;
            let problem = gen_gaussian_regression(&spec)
                .and_then(|p| p.with_lambda(cfg.lambda))
                .map_err(|e| anyhow!("generating data: {e}"))?;
            let test = if cfg.test_size > 0 {
                Some(gen_gaussian_test_set(&spec, problem.w_star(), cfg.test_size).map_err(|e| anyhow!("{e}"))?)
            } else {
                None
            };
            Ok((problem, test))
        }
        _ => Err(anyhow!("data_x and data_y must be given together").into()),
    }
}

fn trajectory(
    problem: &RegressionProblem,
    method: &Method,
    cfg: &RunConfig,
    w0: &[f64],
    coupling: bool,
    capture: bool,
) -> Result<Trajectory, MethodError> {
    let tag = |error| MethodError { method: method.name.clone(), error };
    let state = preconditioner_for(problem, method.config).map_err(tag)?;
    let mut opts = RunOptions::new(method.step.resolve(problem), cfg.steps).with_momentum(method.momentum);
    opts.early_stop = cfg.early_stop;
    opts.track_coupling = coupling;
    opts.capture_preconditioners = capture;
    dynamics::run_with(problem, state, &opts, w0).map_err(tag)
}

fn default_methods(cfg: &RunConfig) -> anyhow::Result<Vec<Method>> {
    cfg.methods_or(TableExperimentConfig::standard_methods())
}

struct Prepared {
    problem: RegressionProblem,
    test: Option<TestSet>,
    methods: Vec<Method>,
    w0: Vec<f64>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, Failure> {
    cfg.validate_run()?;
    let methods = default_methods(cfg)?;
    let (problem, test) = load_problem(cfg)?;
    let w0 = cfg.init()?.draw(cfg.seed, problem.dim());
    Ok(Prepared { problem, test, methods, w0 })
}

pub fn simulate(ctx: &Context) -> Outcome {
    let p = prepare(ctx.cfg)?;
    let runs = par_map(&p.methods, ctx.jobs, |m| {
        ctx.progress(|| format!("simulate: {}", m.name));
        trajectory(&p.problem, m, ctx.cfg, &p.w0, true, false)
    });
    let runs = first_failure(runs)?;

    let mut written = Vec::new();
    let mut summary = Vec::new();
    for (m, traj) in p.methods.iter().zip(&runs) {
        let mut t = CsvTable::new(&["t", "loss", "e1", "out_drift", "d2_norm"]);
        let coupling = traj.coupling.as_deref().unwrap_or(&[]);
        for i in 0..traj.losses.len() {
            t.push([
                Cell::from(i),
                traj.losses[i].into(),
                traj.in_span_error[i].into(),
                traj.out_span_drift[i].into(),
                coupling.get(i).copied().into(),
            ]);
        }
        written.push(ctx.write_csv(&format!("trajectory_{}.csv", file_stem(&m.name)), &t)?);
        let last = traj.losses.len() - 1;
        summary.push(json!({
            "method": m.name,
            "family": m.config.family.name(),
            "eta": traj.eta,
            "momentum": m.momentum,
            "steps": traj.steps(),
            "final_loss": traj.final_loss(),
            "final_e1": traj.in_span_error[last],
            "final_out_drift": traj.out_span_drift[last],
            "test_error": match &p.test {
                Some((x, y)) => experiments::mean_squared_error(x, y, traj.final_iterate()).ok(),
                None => None,
            },
        }));
    }
    written.push(ctx.write_json("summary.json", json!({ "methods": summary }))?);
    Ok(written)
}

pub fn closed_form_check(ctx: &Context) -> Outcome {
    let p = prepare(ctx.cfg)?;
    for m in &p.methods {
        if m.momentum != 0.0 {
            return Err(anyhow!("method {}: the closed form has no momentum term", m.name).into());
        }
    }
    let decomp = p.problem.decomposition();
    let w0s = decomp.to_spectral(&p.w0).map_err(|e| Failure::Numerical { method: None, error: e })?;
    let rows = par_map(&p.methods, ctx.jobs, |m| -> Result<Vec<Cell>, MethodError> {
        ctx.progress(|| format!("closed-form-check: {}", m.name));
        let tag = |error| MethodError { method: m.name.clone(), error };
        let traj = trajectory(&p.problem, m, ctx.cfg, &p.w0, false, true)?;
        let iterate = decomp.to_spectral(traj.final_iterate()).map_err(tag)?;
        let scale = linalg::norm2(&iterate.full).max(1.0);
        let mut row = vec![Cell::from(m.name.as_str()), traj.steps().into(), traj.eta.into(), scale.into()];
        if !m.config.family.is_pure_preconditioner() {
            row.extend([Cell::Missing, Cell::Missing, Cell::Missing, "not a pure preconditioner".into()]);
            return Ok(row);
        }
        let seq = traj.preconditioners.as_deref().unwrap_or(&[]);
        if seq.is_empty() {
            row.extend([Cell::Missing, Cell::Missing, Cell::Missing, "no steps taken".into()]);
            return Ok(row);
        }
        let closed = dynamics::closed_form_iterate(&p.problem, seq, traj.eta, &w0s).map_err(tag)?;
        row.push((linalg::norm2(&linalg::sub(&closed.full, &iterate.full)) / scale).into());
        if p.problem.lambda() == 0.0 {
            let (inner, outer) = dynamics::block_closed_form(&p.problem, seq, traj.eta, &w0s).map_err(tag)?;
            row.push((linalg::norm2(&linalg::sub(&inner, iterate.in_span())) / scale).into());
            row.push((linalg::norm2(&linalg::sub(&outer, iterate.out_span())) / scale).into());
        } else {
            row.extend([Cell::Missing, Cell::Missing]);
        }
        row.push("ok".into());
        Ok(row)
    });
    let mut t = CsvTable::new(&[
        "method",
        "steps",
        "eta",
        "iterate_scale",
        "closed_form_gap",
        "block_in_gap",
        "block_out_gap",
        "status",
    ]);
    for row in first_failure(rows)? {
        t.push(row);
    }
    Ok(vec![ctx.write_csv("closed_form_check.csv", &t)?])
}

pub fn fixed_point(ctx: &Context) -> Outcome {
    let p = prepare(ctx.cfg)?;
    let decomp = p.problem.decomposition();
    let rank = decomp.rank();
    let dim = p.problem.dim();
    let numerical = |error| Failure::Numerical { method: None, error };
    let predicted: Vec<Option<f64>> = if p.problem.lambda() > 0.0 {
        dynamics::regularized_fixed_point(&p.problem).map_err(numerical)?.full.into_iter().map(Some).collect()
    } else {
        let mut v: Vec<Option<f64>> =
            dynamics::inspan_fixed_point(&p.problem).map_err(numerical)?.into_iter().map(Some).collect();
        v.resize(dim, None);
        v
    };
    let w0s = decomp.to_spectral(&p.w0).map_err(numerical)?;

    let finals = par_map(&p.methods, ctx.jobs, |m| -> Result<SpectralVector, MethodError> {
        ctx.progress(|| format!("fixed-point: {}", m.name));
        let traj = trajectory(&p.problem, m, ctx.cfg, &p.w0, false, false)?;
        decomp.to_spectral(traj.final_iterate()).map_err(|error| MethodError { method: m.name.clone(), error })
    });
    let finals = first_failure(finals)?;

    let mut columns = vec!["index".to_owned(), "sigma".to_owned(), "predicted".to_owned()];
    columns.extend(p.methods.iter().map(|m| m.name.clone()));
    let mut t = CsvTable::new(&columns);
    let sigmas = decomp.singular_values();
    for (r, &pred) in predicted.iter().enumerate() {
        let mut row = vec![Cell::from(r), sigmas.get(r).copied().filter(|_| r < rank).into(), pred.into()];
        row.extend(finals.iter().map(|f| Cell::from(f.full[r])));
        t.push(row);
    }

    let pred_in: Vec<f64> = predicted[..rank].iter().map(|v| v.unwrap_or(0.0)).collect();
    let methods: Vec<Value> = p
        .methods
        .iter()
        .zip(&finals)
        .map(|(m, f)| {
            let in_err = linalg::norm2(&linalg::sub(f.in_span(), &pred_in));
            let out_target: &[f64] = if p.problem.lambda() > 0.0 { &[] } else { w0s.out_span() };
            let out_err = if out_target.is_empty() {
                linalg::norm2(f.out_span())
            } else {
                linalg::norm2(&linalg::sub(f.out_span(), out_target))
            };
            json!({
                "method": m.name,
                "in_span_error": in_err,
                // Distance to 0 when regularized, otherwise drift from the start.
                "out_span_deviation": out_err,
            })
        })
        .collect();
    Ok(vec![
        ctx.write_csv("fixed_point.csv", &t)?,
        ctx.write_json("fixed_point.json", json!({ "rank": rank, "lambda": p.problem.lambda(), "methods": methods }))?,
    ])
}

pub fn table_gaussian(ctx: &Context) -> Outcome {
    let config = ctx.cfg.table_experiment()?;
    let cells: Vec<(usize, usize)> =
        (0..config.methods.len()).flat_map(|m| (0..config.runs).map(move |r| (m, r))).collect();
    let records = par_map(&cells, ctx.jobs, |&(m, r)| {
        ctx.progress(|| format!("table-gaussian: {} run {r}", config.methods[m].name));
        experiments::run_table_cell(&config, &config.methods[m], r)
    });
    let report = ExperimentReport::from_records(config.seeds(), first_failure(records)?, Aggregation::Mean);
    Ok(report::write_report(ctx.out, "table_gaussian", &ctx.header, &report)?)
}

pub fn table_margin(ctx: &Context) -> Outcome {
    let config = ctx.cfg.margin_experiment()?;
    let cells: Vec<(usize, usize)> =
        (0..config.methods.len()).flat_map(|m| (0..config.realizations).map(move |r| (m, r))).collect();
    let records = par_map(&cells, ctx.jobs, |&(m, r)| {
        ctx.progress(|| format!("table-margin: {} realization {r}", config.methods[m].name));
        experiments::run_margin_cell(&config, &config.methods[m], r)
    });
    let report = ExperimentReport::from_records(config.seeds(), first_failure(records)?, Aggregation::Median);
    Ok(report::write_report(ctx.out, "table_margin", &ctx.header, &report)?)
}

/// From `t = 1` up to the last step still above `1e-10` of the value at
/// `t = 1`, so round-off plateaus stay out of the fit.
fn significant_window(series: &[f64]) -> (usize, usize) {
    let floor = series.get(1).copied().unwrap_or(0.0) * 1e-10;
    let end = (1..series.len()).rev().find(|&t| series[t] > 0.0 && series[t] >= floor).unwrap_or(1);
    if end + 1 < 1 + MIN_FIT_POINTS {
        default_fit_window(series.len())
    } else {
        (1, end)
    }
}

pub fn decay(ctx: &Context, window: Option<(usize, usize)>) -> Outcome {
    let p = prepare(ctx.cfg)?;
    let runs = par_map(&p.methods, ctx.jobs, |m| {
        ctx.progress(|| format!("decay: {}", m.name));
        trajectory(&p.problem, m, ctx.cfg, &p.w0, true, false)
    });
    let runs = first_failure(runs)?;
    let mut t =
        CsvTable::new(&["method", "series", "symbol", "exponent", "log_log_r2", "fit_start", "fit_end", "note"]);
    for (m, traj) in p.methods.iter().zip(&runs) {
        let coupling = traj.coupling.as_deref().unwrap_or(&[]);
        for (series, symbol, values) in [("d2_norm", "alpha", coupling), ("e1", "beta", &traj.in_span_error[..])] {
            let win = window.unwrap_or_else(|| significant_window(values));
            let mut row = vec![Cell::from(m.name.as_str()), series.into(), symbol.into()];
            match estimate_decay(values, Some(win)) {
                Ok(est) => row.extend([
                    Cell::from(est.exponent),
                    est.log_log_r2.into(),
                    est.fit_window.0.into(),
                    est.fit_window.1.into(),
                    Cell::Missing,
                ]),
                Err(e) => {
                    let kind = report::error_record(None, &e)["kind"].as_str().unwrap_or("Error").to_owned();
                    row.extend([Cell::Missing, Cell::Missing, win.0.into(), win.1.into(), Cell::Text(kind)]);
                }
            }
            t.push(row);
        }
    }
    Ok(vec![ctx.write_csv("decay.csv", &t)?])
}

pub fn bound_curve(ctx: &Context, params: [f64; 5], horizon: u64) -> Outcome {
    let [a, b, c, alpha, beta] = params;
    let p = BoundCurveParams::new(a, b, c, alpha, beta).map_err(|e| anyhow!("bound-curve: {e}"))?;
    let mut t = CsvTable::new(&["T", "value"]);
    for step in 0..=horizon {
        t.push([Cell::from(step), analysis::bound_curve(&p, step).into()]);
    }
    Ok(vec![ctx.write_csv("bound_curve.csv", &t)?])
}

pub fn sweep(ctx: &Context) -> Outcome {
    let p = prepare(ctx.cfg)?;
    if ctx.cfg.etas.iter().chain(&ctx.cfg.momenta).any(|v| !v.is_finite()) {
        return Err(anyhow!("sweep grids must be finite").into());
    }
    let test = p.test.as_ref().map(|(x, y)| (x, y.as_slice()));
    let results = par_map(&p.methods, ctx.jobs, |m| {
        ctx.progress(|| format!("sweep: {}", m.name));
        hyperparameter_sweep(&p.problem, m.config, &ctx.cfg.etas, &ctx.cfg.momenta, ctx.cfg.steps, &p.w0, test)
            .map_err(|error| MethodError { method: m.name.clone(), error })
    });
    let results = first_failure(results)?;
    let mut t = CsvTable::new(&["method", "eta", "momentum", "final_loss", "test_error", "diverged", "best"]);
    let mut best = Vec::new();
    for (m, res) in p.methods.iter().zip(&results) {
        for cell in &res.cells {
            t.push([
                Cell::from(m.name.as_str()),
                cell.eta.into(),
                cell.momentum.into(),
                cell.final_loss.into(),
                cell.test_error.into(),
                cell.diverged.into(),
                (cell == &res.best).into(),
            ]);
        }
        best.push(json!({
            "method": m.name,
            "eta": res.best.eta,
            "momentum": res.best.momentum,
            "final_loss": res.best.final_loss,
            "test_error": res.best.test_error,
        }));
    }
    Ok(vec![ctx.write_csv("sweep.csv", &t)?, ctx.write_json("sweep_best.json", json!({ "methods": best }))?])
}

/// Rejects an output directory that cannot be created.
pub fn ensure_out_dir(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}
