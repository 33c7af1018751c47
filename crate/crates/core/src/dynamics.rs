//! The preconditioned update loop, its closed forms and fixed points.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{self, Matrix};
use crate::precond::{PreconditionerState, Scaling};
use crate::spectral::{decompose, SpectralDecomposition, SpectralVector};
use crate::{Error, Result};

/// Iterate norm above which a run is reported as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Least squares with ridge penalty over `y = X w_star + zeta`.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    x: Matrix,
    w_star: Vec<f64>,
    zeta: Vec<f64>,
    y: Vec<f64>,
    lambda: f64,
    decomp: SpectralDecomposition,
    spectral_w_star: Vec<f64>,
    spectral_zeta: Vec<f64>,
}

impl RegressionProblem {
    pub fn new(x: Matrix, w_star: Vec<f64>, zeta: Vec<f64>, lambda: f64) -> Result<Self> {
        let (n, d) = x.shape();
        if w_star.len() != d {
            return Err(Error::DimensionMismatch { expected: d, found: w_star.len() });
        }
        if zeta.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: zeta.len() });
        }
        if !linalg::all_finite(&w_star) || !linalg::all_finite(&zeta) || !lambda.is_finite() {
            return Err(Error::NonFinite);
        }
        if lambda < 0.0 {
            return Err(Error::InvalidParameter("lambda must be nonnegative"));
        }
        let decomp = decompose(&x, None)?;
        let y = linalg::add(&x.matvec(&w_star)?, &zeta);
        let spectral_w_star = decomp.right_basis().tr_matvec(&w_star)?;
        let spectral_zeta = decomp.to_left_spectral(&zeta)?;
        Ok(Self { x, w_star, zeta, y, lambda, decomp, spectral_w_star, spectral_zeta })
    }

    /// Builds a problem from observed labels only: `w_star` is taken to be
    /// the minimum-norm least-squares solution and `zeta` the residual.
    pub fn from_labels(x: Matrix, y: &[f64], lambda: f64) -> Result<Self> {
        let w_star = crate::spectral::min_norm_solution(&x, y)?;
        let fitted = x.matvec(&w_star)?;
        let zeta = linalg::sub(y, &fitted);
        let mut p = Self::new(x, w_star, zeta, lambda)?;
        // Keep the caller's labels bit-for-bit.
        p.y = y.to_vec();
        Ok(p)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter("lambda must be nonnegative"));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn decomposition(&self) -> &SpectralDecomposition {
        &self.decomp
    }

    pub fn spectral_w_star(&self) -> &[f64] {
        &self.spectral_w_star
    }

    pub fn spectral_zeta(&self) -> &[f64] {
        &self.spectral_zeta
    }

    pub fn samples(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// `Λ^T (Λ w~* + ζ~)`, the constant forcing term of the spectral recursion.
    pub fn spectral_forcing(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        for (r, &s) in self.decomp.singular_values().iter().enumerate() {
            c[r] = s * (s * self.spectral_w_star[r] + self.spectral_zeta[r]);
        }
        c
    }

    /// In-span block of the limit the dynamics converge to, used as the
    /// reference for the in-span error.
    pub fn in_span_limit(&self) -> Vec<f64> {
        let lambda = self.lambda;
        let sv = self.decomp.singular_values();
        (0..self.decomp.rank())
            .map(|r| {
                let s = sv[r];
                (s * s * self.spectral_w_star[r] + s * self.spectral_zeta[r]) / (s * s + lambda)
            })
            .collect()
    }

    pub fn loss_and_gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: w.len() });
        }
        if !linalg::all_finite(w) {
            return Err(Error::NonFinite);
        }
        let residual = linalg::sub(&self.x.matvec(w)?, &self.y);
        let mut gradient = self.x.tr_matvec(&residual)?;
        linalg::axpy(self.lambda, w, &mut gradient);
        let loss = 0.5 * linalg::dot(&residual, &residual) + 0.5 * self.lambda * linalg::dot(w, w);
        Ok((loss, gradient))
    }

    pub fn loss(&self, w: &[f64]) -> Result<f64> {
        self.loss_and_gradient(w).map(|(l, _)| l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub eta: f64,
    pub steps: usize,
    /// Heavy-ball coefficient; `0` gives the plain preconditioned update.
    pub momentum: f64,
    /// Stop once the training loss falls below this value.
    pub early_stop: Option<f64>,
    /// Record `||D~2(t)||` each step. Costs one `d x d` congruence per step.
    pub track_coupling: bool,
    /// Keep every `D(t)` for closed-form evaluation.
    pub capture_preconditioners: bool,
}

impl RunOptions {
    pub fn new(eta: f64, steps: usize) -> Self {
        Self { eta, steps, momentum: 0.0, early_stop: None, track_coupling: false, capture_preconditioners: false }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_early_stop(mut self, threshold: f64) -> Self {
        self.early_stop = Some(threshold);
        self
    }

    pub fn tracking_coupling(mut self) -> Self {
        self.track_coupling = true;
        self
    }

    pub fn capturing_preconditioners(mut self) -> Self {
        self.capture_preconditioners = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub iterates: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    pub in_span_error: Vec<f64>,
    pub out_span_drift: Vec<f64>,
    pub eta: f64,
    /// `||D~2(t)||` for `t = 0..len-1`; the final entry repeats the last
    /// applied step so the column lines up with the others.
    pub coupling: Option<Vec<f64>>,
    pub preconditioners: Option<Vec<Scaling>>,
}

impl Trajectory {
    /// Number of updates applied.
    pub fn steps(&self) -> usize {
        self.iterates.len() - 1
    }

    pub fn final_iterate(&self) -> &[f64] {
        self.iterates.last().expect("trajectory holds w(0)")
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trajectory holds loss(0)")
    }
}

struct Observer<'a> {
    problem: &'a RegressionProblem,
    limit: Vec<f64>,
    out_start: Vec<f64>,
}

impl<'a> Observer<'a> {
    fn new(problem: &'a RegressionProblem, w0: &[f64]) -> Result<Self> {
        let s = problem.decomp.to_spectral(w0)?;
        Ok(Self { problem, limit: problem.in_span_limit(), out_start: s.out_span().to_vec() })
    }

    fn observe(&self, w: &[f64]) -> Result<(f64, f64)> {
        let s = self.problem.decomp.to_spectral(w)?;
        let e1 = linalg::norm2(&linalg::sub(&self.limit, s.in_span()));
        let drift = linalg::norm2(&linalg::sub(s.out_span(), &self.out_start));
        Ok((e1, drift))
    }
}

/// Runs `steps` preconditioned updates from `w0` with constant step size.
pub fn run(
    problem: &RegressionProblem,
    precond: PreconditionerState,
    eta: f64,
    steps: usize,
    w0: &[f64],
) -> Result<Trajectory> {
    run_with(problem, precond, &RunOptions::new(eta, steps), w0)
}

pub fn run_with(
    problem: &RegressionProblem,
    mut precond: PreconditionerState,
    options: &RunOptions,
    w0: &[f64],
) -> Result<Trajectory> {
    if !(options.eta > 0.0 && options.eta.is_finite()) {
        return Err(Error::InvalidParameter("step size must be positive"));
    }
    if options.steps == 0 {
        return Err(Error::InvalidParameter("step count must be at least 1"));
    }
    if !(0.0..1.0).contains(&options.momentum) {
        return Err(Error::InvalidParameter("momentum must lie in [0, 1)"));
    }
    let observer = Observer::new(problem, w0)?;
    let mut w = w0.to_vec();
    let mut velocity = vec![0.0; w.len()];
    let mut traj = Trajectory {
        iterates: Vec::with_capacity(options.steps + 1),
        losses: Vec::with_capacity(options.steps + 1),
        in_span_error: Vec::with_capacity(options.steps + 1),
        out_span_drift: Vec::with_capacity(options.steps + 1),
        eta: options.eta,
        coupling: options.track_coupling.then(Vec::new),
        preconditioners: options.capture_preconditioners.then(Vec::new),
    };

    for step in 0..options.steps {
        let (loss, gradient) = problem.loss_and_gradient(&w)?;
        record(&mut traj, &observer, &w, loss)?;
        if options.early_stop.is_some_and(|thr| loss < thr) {
            if let Some(c) = traj.coupling.as_mut() {
                let last = c.last().copied().unwrap_or(0.0);
                c.push(last);
            }
            return Ok(traj);
        }
        let (direction, scaling) = precond.direction(&gradient)?;
        if let Some(c) = traj.coupling.as_mut() {
            let sp = problem.decomp.precond_to_spectral(&scaling.to_dense())?;
            c.push(sp.coupling_norm()?);
        }
        if let Some(p) = traj.preconditioners.as_mut() {
            p.push(scaling);
        }
        for (v, g) in velocity.iter_mut().zip(&direction) {
            *v = options.momentum * *v + g;
        }
        linalg::axpy(-options.eta, &velocity, &mut w);
        let norm = linalg::norm2(&w);
        if !(norm <= DIVERGENCE_THRESHOLD) {
            return Err(Error::Diverged { step: step + 1, norm });
        }
    }
    let loss = problem.loss(&w)?;
    record(&mut traj, &observer, &w, loss)?;
    if let Some(c) = traj.coupling.as_mut() {
        let last = c.last().copied().unwrap_or(0.0);
        c.push(last);
    }
    Ok(traj)
}

fn record(traj: &mut Trajectory, observer: &Observer<'_>, w: &[f64], loss: f64) -> Result<()> {
    let (e1, drift) = observer.observe(w)?;
    traj.iterates.push(w.to_vec());
    traj.losses.push(loss);
    traj.in_span_error.push(e1);
    traj.out_span_drift.push(drift);
    Ok(())
}

fn spectral_sequence(problem: &RegressionProblem, sequence: &[Scaling]) -> Result<Vec<Matrix>> {
    let d = problem.dim();
    sequence
        .iter()
        .map(|s| {
            if s.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, found: s.dim() });
            }
            Ok(problem.decomp.precond_to_spectral(&s.to_dense())?.full)
        })
        .collect()
}

/// `w~(T)` evaluated from the product expansion of the recursion
/// `w~(t+1) = (I - eta D~(t)(Λ^2 + λ I)) w~(t) + eta D~(t) c`.
pub fn closed_form_iterate(
    problem: &RegressionProblem,
    sequence: &[Scaling],
    eta: f64,
    w0: &SpectralVector,
) -> Result<SpectralVector> {
    let d = problem.dim();
    if sequence.is_empty() {
        return Err(Error::InvalidParameter("preconditioner sequence must be nonempty"));
    }
    if w0.full.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: w0.full.len() });
    }
    let spectral = spectral_sequence(problem, sequence)?;
    let curvature: Vec<f64> = problem.decomp.squared_spectrum().iter().map(|s| s + problem.lambda).collect();
    let forcing = problem.spectral_forcing();

    // Walk backwards so `tail` is always the product of the factors that
    // act after step i, latest on the left.
    let mut tail = Matrix::identity(d);
    let mut total = vec![0.0; d];
    for dt in spectral.iter().rev() {
        let pushed = linalg::scale(&dt.matvec(&forcing)?, eta);
        let contribution = tail.matvec(&pushed)?;
        linalg::axpy(1.0, &contribution, &mut total);
        let mut step = Matrix::identity(d);
        for i in 0..d {
            for j in 0..d {
                step[(i, j)] -= eta * dt[(i, j)] * curvature[j];
            }
        }
        tail = tail.matmul(&step)?;
    }
    let free = tail.matvec(&w0.full)?;
    Ok(SpectralVector::new(linalg::add(&free, &total), problem.decomp.rank()))
}

/// The same iterate split into blocks, computed from the in-span
/// transition products `A(t2, t1)` and the coupling sums `B(t2, t1)`.
/// Only defined without regularization.
pub fn block_closed_form(
    problem: &RegressionProblem,
    sequence: &[Scaling],
    eta: f64,
    w0: &SpectralVector,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if problem.lambda != 0.0 {
        return Err(Error::RegularizedProblem { lambda: problem.lambda });
    }
    let d = problem.dim();
    if sequence.is_empty() {
        return Err(Error::InvalidParameter("preconditioner sequence must be nonempty"));
    }
    if w0.full.len() != d {
        return Err(Error::DimensionMismatch { expected: d, found: w0.full.len() });
    }
    let r = problem.decomp.rank();
    let w1 = &w0.full[..r];
    let w2 = &w0.full[r..];
    let sv = problem.decomp.singular_values();
    let sq: Vec<f64> = sv[..r].iter().map(|s| s * s).collect();
    let target: Vec<f64> = (0..r).map(|i| problem.spectral_w_star[i] + problem.spectral_zeta[i] / sv[i]).collect();
    let forcing: Vec<f64> = (0..r).map(|i| sq[i] * target[i]).collect();

    let spectral = spectral_sequence(problem, sequence)?;
    let d1: Vec<Matrix> = spectral.iter().map(|m| m.block(0, 0, r, r)).collect();
    let d2: Vec<Matrix> = spectral.iter().map(|m| m.block(r, 0, d - r, r)).collect();
    let steps = spectral.len();

    // Walk the start step s down from T-1, maintaining A(T-1, s) and
    // B(T-1, s) through A(T-1, s) = A(T-1, s+1) M1(s) and
    // B(T-1, s) = B(T-1, s+1) M1(s) - eta D2(s) Λ1^2, starting from the
    // empty-range values A = I, B = 0 at s = T.
    let mut a = Matrix::identity(r);
    let mut b = Matrix::zeros(d - r, r);
    let mut in_span = vec![0.0; r];
    let mut out_span = w2.to_vec();
    for i in (0..steps).rev() {
        let pushed = linalg::scale(&d1[i].matvec(&forcing)?, eta);
        linalg::axpy(1.0, &a.matvec(&pushed)?, &mut in_span);
        linalg::axpy(1.0, &b.matvec(&pushed)?, &mut out_span);
        linalg::axpy(eta, &d2[i].matvec(&forcing)?, &mut out_span);
        let mut step = scale_columns(&d1[i], &sq).scaled(-eta);
        for k in 0..r {
            step[(k, k)] += 1.0;
        }
        b = b.matmul(&step)?.sub(&scale_columns(&d2[i], &sq).scaled(eta))?;
        a = a.matmul(&step)?;
    }
    linalg::axpy(1.0, &a.matvec(w1)?, &mut in_span);
    linalg::axpy(1.0, &b.matvec(w1)?, &mut out_span);
    Ok((in_span, out_span))
}

fn scale_columns(m: &Matrix, s: &[f64]) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out[(i, j)] *= s[j];
        }
    }
    out
}

/// Limit of the regularized dynamics in spectral coordinates. It does not
/// depend on the preconditioner or on the initialization.
pub fn regularized_fixed_point(problem: &RegressionProblem) -> Result<SpectralVector> {
    if problem.lambda <= 0.0 {
        return Err(Error::UnregularizedProblem);
    }
    let mut full = problem.in_span_limit();
    full.resize(problem.dim(), 0.0);
    Ok(SpectralVector::new(full, problem.decomp.rank()))
}

/// `w~*_1 + Λ_1^{-1} ζ~_1`, the in-span limit without regularization.
pub fn inspan_fixed_point(problem: &RegressionProblem) -> Result<Vec<f64>> {
    if problem.lambda != 0.0 {
        return Err(Error::RegularizedProblem { lambda: problem.lambda });
    }
    Ok(problem.in_span_limit())
}

/// Largest constant step size for which the regularized recursion is a
/// contraction, given an upper bound `d_max` on the eigenvalues of `D(t)`.
pub fn max_stable_step(decomp: &SpectralDecomposition, d_max: f64, lambda: f64) -> f64 {
    let s = decomp.sigma_max();
    2.0 / (d_max * (s * s + lambda))
}
