//! Preconditioner families mapping the gradient history to `D(t)`.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::linalg::{self, symmetric_eigen, Matrix};
use crate::spectral::SpectralDecomposition;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// `D = I`, plain gradient descent.
    Identity,
    /// `D = diag(1 / (sqrt(S) + eps))`, `S` the windowed sum of `g * g`.
    DiagAdaGrad,
    /// `D = diag(1 / (S^2 + eps))`.
    DiagAdaGradSquared,
    /// `D = diag(1 / (S + eps))`, no root taken.
    DiagAdaGradUnrooted,
    /// `DiagAdaGrad` projected onto the row space of `X`.
    SpanProjectedDiagAdaGrad,
    /// `D = (G + eps I)^{-1/2}`, `G` the windowed sum of `g g^T`.
    FullMatrixAdaGrad,
    /// Constant `D = (X^T X + eps I)^{-1}`.
    RidgeInverse,
    RmsProp,
    Adam,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Identity,
        Family::DiagAdaGrad,
        Family::DiagAdaGradSquared,
        Family::DiagAdaGradUnrooted,
        Family::SpanProjectedDiagAdaGrad,
        Family::FullMatrixAdaGrad,
        Family::RidgeInverse,
        Family::RmsProp,
        Family::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Identity => "identity",
            Family::DiagAdaGrad => "diag-adagrad",
            Family::DiagAdaGradSquared => "diag-adagrad-squared",
            Family::DiagAdaGradUnrooted => "diag-adagrad-unrooted",
            Family::SpanProjectedDiagAdaGrad => "span-projected-diag-adagrad",
            Family::FullMatrixAdaGrad => "full-matrix-adagrad",
            Family::RidgeInverse => "ridge-inverse",
            Family::RmsProp => "rmsprop",
            Family::Adam => "adam",
        }
    }

    /// Families whose spectral coupling block `D2(t)` is identically zero.
    pub fn is_span_preserving(self) -> bool {
        matches!(self, Family::Identity | Family::RidgeInverse | Family::SpanProjectedDiagAdaGrad)
    }

    /// `false` for families whose update is not of the form `D(t) grad f`.
    pub fn is_pure_preconditioner(self) -> bool {
        !matches!(self, Family::Adam)
    }

    fn needs_decomposition(self) -> bool {
        matches!(self, Family::SpanProjectedDiagAdaGrad | Family::RidgeInverse)
    }

    fn uses_window(self) -> bool {
        matches!(
            self,
            Family::DiagAdaGrad
                | Family::DiagAdaGradSquared
                | Family::DiagAdaGradUnrooted
                | Family::SpanProjectedDiagAdaGrad
                | Family::FullMatrixAdaGrad
        )
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL.into_iter().find(|f| f.name() == s).ok_or(Error::InvalidParameter("unknown preconditioner family"))
    }
}

/// Membership in the span-preserving class (`D2(t) = 0` for all `t`).
pub fn is_in_span_family(config: &PreconditionerConfig) -> bool {
    config.family.is_span_preserving()
}

/// How many past gradients enter the AdaGrad accumulators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// The most recent `J` gradients, the current one included. Before `J`
    /// gradients have been seen the sum runs over all of them.
    Bounded(usize),
    Unbounded,
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Bounded(j) => write!(f, "{j}"),
            Window::Unbounded => f.write_str("unbounded"),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unbounded" | "inf" => Ok(Window::Unbounded),
            _ => s
                .parse::<usize>()
                .ok()
                .filter(|&j| j >= 1)
                .map(Window::Bounded)
                .ok_or(Error::InvalidParameter("window must be a positive integer or `unbounded`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditionerConfig {
    pub family: Family,
    pub epsilon: f64,
    pub window: Window,
    /// RMSProp decay.
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl PreconditionerConfig {
    pub fn new(family: Family) -> Self {
        Self { family, epsilon: 1e-8, window: Window::Bounded(10), rho: 0.9, beta1: 0.9, beta2: 0.999 }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_window(mut self, window: Window) -> Self {
        self.window = window;
        self
    }

    /// `key = value` lines for every field, in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "family = {}\nepsilon = {:e}\nwindow = {}\nrho = {}\nbeta1 = {}\nbeta2 = {}\n",
            self.family, self.epsilon, self.window, self.rho, self.beta1, self.beta2
        )
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are
    /// skipped, `family` is required and other keys fall back to defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut family = None;
        let mut rest: Vec<(&str, &str)> = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::InvalidParameter("expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim().trim_matches('"'));
            if key == "family" {
                family = Some(value.parse::<Family>()?);
            } else {
                rest.push((key, value));
            }
        }
        let mut cfg = Self::new(family.ok_or(Error::InvalidParameter("missing `family`"))?);
        let number = |v: &str| v.parse::<f64>().map_err(|_| Error::InvalidParameter("expected a number"));
        for (key, value) in rest {
            match key {
                "epsilon" => cfg.epsilon = number(value)?,
                "window" => cfg.window = value.parse()?,
                "rho" => cfg.rho = number(value)?,
                "beta1" => cfg.beta1 = number(value)?,
                "beta2" => cfg.beta2 = number(value)?,
                _ => return Err(Error::InvalidParameter("unknown preconditioner key")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter("epsilon must be positive"));
        }
        if self.window == Window::Bounded(0) {
            return Err(Error::InvalidParameter("window must be at least 1"));
        }
        for v in [self.rho, self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidParameter("decay rates must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// A preconditioner matrix, kept diagonal when the family allows it.
#[derive(Debug, Clone, PartialEq)]
pub enum Scaling {
    Diagonal(Vec<f64>),
    Dense(Matrix),
}

impl Scaling {
    pub fn dim(&self) -> usize {
        match self {
            Scaling::Diagonal(d) => d.len(),
            Scaling::Dense(m) => m.rows(),
        }
    }

    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        match self {
            Scaling::Diagonal(d) => d.iter().zip(g).map(|(a, b)| a * b).collect(),
            Scaling::Dense(m) => m.matvec(g).expect("scaling dimension checked on construction"),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            Scaling::Diagonal(d) => Matrix::from_diag(d),
            Scaling::Dense(m) => m.clone(),
        }
    }

    /// `(lambda_min, lambda_max)`.
    pub fn eigen_range(&self) -> Result<(f64, f64)> {
        match self {
            Scaling::Diagonal(d) => {
                Ok(d.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
            }
            Scaling::Dense(m) => {
                let (vals, _) = symmetric_eigen(m)?;
                Ok((vals[0], vals[vals.len() - 1]))
            }
        }
    }
}

/// Mutable per-trajectory state of a preconditioner family.
#[derive(Debug, Clone)]
pub struct PreconditionerState {
    config: PreconditionerConfig,
    dim: usize,
    decomposition: Option<SpectralDecomposition>,
    window: VecDeque<Vec<f64>>,
    square_sum: Vec<f64>,
    /// Running sum of `g g^T`, kept for full-matrix AdaGrad over an
    /// unbounded window.
    outer_sum: Option<Matrix>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    ridge: Option<Matrix>,
    step: u64,
}

impl PreconditionerState {
    pub fn new(config: PreconditionerConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            dim,
            decomposition: None,
            window: VecDeque::new(),
            square_sum: vec![0.0; dim],
            outer_sum: None,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            ridge: None,
            step: 0,
        })
    }

    /// Attaches the decomposition needed by the span-projected and
    /// ridge-inverse families.
    pub fn with_decomposition(mut self, decomposition: SpectralDecomposition) -> Self {
        self.decomposition = Some(decomposition);
        self
    }

    pub fn config(&self) -> &PreconditionerConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Gradients currently held in the window.
    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    /// Current elementwise accumulator `S`.
    pub fn square_sum(&self) -> &[f64] {
        &self.square_sum
    }

    /// Feeds `grad f(w(t))` and returns `D(t)`.
    pub fn advance(&mut self, gradient: &[f64]) -> Result<Scaling> {
        if gradient.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: gradient.len() });
        }
        if !linalg::all_finite(gradient) {
            return Err(Error::NonFiniteGradient);
        }
        if self.config.family.needs_decomposition() && self.decomposition.is_none() {
            return Err(Error::MissingDecomposition { family: self.config.family.name() });
        }
        self.step += 1;
        let eps = self.config.epsilon;
        if self.config.family.uses_window() {
            self.push_gradient(gradient);
        }
        let scaling = match self.config.family {
            Family::Identity => Scaling::Diagonal(vec![1.0; self.dim]),
            Family::DiagAdaGrad => Scaling::Diagonal(self.diag_adagrad()),
            Family::DiagAdaGradSquared => {
                Scaling::Diagonal(self.square_sum.iter().map(|s| 1.0 / (s * s + eps)).collect())
            }
            Family::DiagAdaGradUnrooted => Scaling::Diagonal(self.square_sum.iter().map(|s| 1.0 / (s + eps)).collect()),
            Family::SpanProjectedDiagAdaGrad => {
                let diag = Matrix::from_diag(&self.diag_adagrad());
                let decomp = self.decomposition.as_ref().expect("checked above");
                Scaling::Dense(decomp.project_onto_span(&diag)?)
            }
            Family::FullMatrixAdaGrad => Scaling::Dense(self.full_matrix()?),
            Family::RidgeInverse => Scaling::Dense(self.ridge_inverse()?),
            Family::RmsProp => {
                let rho = self.config.rho;
                for (v, g) in self.second_moment.iter_mut().zip(gradient) {
                    *v = rho * *v + (1.0 - rho) * g * g;
                }
                Scaling::Diagonal(self.second_moment.iter().map(|v| 1.0 / (libm::sqrt(*v) + eps)).collect())
            }
            Family::Adam => {
                let (b1, b2) = (self.config.beta1, self.config.beta2);
                for ((m, v), g) in self.first_moment.iter_mut().zip(self.second_moment.iter_mut()).zip(gradient) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                }
                let correction = 1.0 - libm::pow(b2, self.step as f64);
                Scaling::Diagonal(self.second_moment.iter().map(|v| 1.0 / (libm::sqrt(v / correction) + eps)).collect())
            }
        };
        Ok(scaling)
    }

    /// Feeds the gradient and returns the update direction together with
    /// `D(t)`. For every family except Adam the direction is `D(t) g`; Adam
    /// scales its bias-corrected first moment instead.
    pub fn direction(&mut self, gradient: &[f64]) -> Result<(Vec<f64>, Scaling)> {
        let scaling = self.advance(gradient)?;
        let dir = if self.config.family == Family::Adam {
            let correction = 1.0 - libm::pow(self.config.beta1, self.step as f64);
            let m_hat: Vec<f64> = self.first_moment.iter().map(|m| m / correction).collect();
            scaling.apply(&m_hat)
        } else {
            scaling.apply(gradient)
        };
        Ok((dir, scaling))
    }

    fn push_gradient(&mut self, g: &[f64]) {
        match self.config.window {
            Window::Unbounded => {
                for (s, gi) in self.square_sum.iter_mut().zip(g) {
                    *s += gi * gi;
                }
                if self.config.family == Family::FullMatrixAdaGrad {
                    let outer = self.outer_sum.get_or_insert_with(|| Matrix::zeros(self.dim, self.dim));
                    add_outer(outer, g);
                }
            }
            Window::Bounded(j) => {
                self.window.push_back(g.to_vec());
                while self.window.len() > j {
                    self.window.pop_front();
                }
                // Recomputed from the window so evictions leave no residue.
                self.square_sum.iter_mut().for_each(|s| *s = 0.0);
                for past in &self.window {
                    for (s, gi) in self.square_sum.iter_mut().zip(past) {
                        *s += gi * gi;
                    }
                }
            }
        }
    }

    fn diag_adagrad(&self) -> Vec<f64> {
        let eps = self.config.epsilon;
        self.square_sum.iter().map(|s| 1.0 / (libm::sqrt(*s) + eps)).collect()
    }

    fn full_matrix(&self) -> Result<Matrix> {
        let outer = match &self.outer_sum {
            Some(sum) => sum.clone(),
            None => {
                let mut sum = Matrix::zeros(self.dim, self.dim);
                for g in &self.window {
                    add_outer(&mut sum, g);
                }
                sum
            }
        };
        let (vals, vecs) = symmetric_eigen(&outer)?;
        let eps = self.config.epsilon;
        let inv_root: Vec<f64> = vals.iter().map(|&mu| 1.0 / libm::sqrt(mu.max(0.0) + eps)).collect();
        let scaled = vecs.matmul(&Matrix::from_diag(&inv_root))?;
        scaled.matmul(&vecs.transpose())
    }

    fn ridge_inverse(&mut self) -> Result<Matrix> {
        if let Some(r) = &self.ridge {
            return Ok(r.clone());
        }
        let decomp = self.decomposition.as_ref().expect("checked by caller");
        let eps = self.config.epsilon;
        let diag: Vec<f64> = decomp.squared_spectrum().iter().map(|s| 1.0 / (s + eps)).collect();
        let v = decomp.right_basis();
        let m = v.matmul(&Matrix::from_diag(&diag))?.matmul(&v.transpose())?;
        self.ridge = Some(m.clone());
        Ok(m)
    }
}

/// Adds `g g^T` into the lower triangle of `m`; the eigensolver reads only
/// that half.
fn add_outer(m: &mut Matrix, g: &[f64]) {
    for a in 0..g.len() {
        if g[a] == 0.0 {
            continue;
        }
        for b in 0..=a {
            m[(a, b)] += g[a] * g[b];
        }
    }
}
