//! Decay-rate fitting, the out-of-span drift bound, the training-error bound
//! curve, and the fixed point of the unrooted AdaGrad variant.

use alloc::vec::Vec;

use crate::linalg::{self, Matrix};
use crate::{Error, Result};

/// Minimum number of samples a decay fit will accept.
pub const MIN_FIT_POINTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayEstimate {
    /// Negated log-log slope; the series behaves like `t^-exponent`.
    pub exponent: f64,
    pub log_log_r2: f64,
    /// Inclusive step range the fit used.
    pub fit_window: (usize, usize),
}

/// Second half of a series of length `len`, never including `t = 0`.
pub fn default_fit_window(len: usize) -> (usize, usize) {
    ((len / 2).max(1), len.saturating_sub(1))
}

/// Fits `series[t] ~ C t^-exponent` by least squares in log-log space over
/// the inclusive window `(start, end)`, where `series[t]` is the value at
/// step `t`.
pub fn estimate_decay(series: &[f64], window: Option<(usize, usize)>) -> Result<DecayEstimate> {
    let (start, end) = window.unwrap_or_else(|| default_fit_window(series.len()));
    let start = start.max(1);
    if end >= series.len() {
        return Err(Error::DimensionMismatch { expected: series.len(), found: end + 1 });
    }
    let len = (end + 1).saturating_sub(start);
    if len < MIN_FIT_POINTS {
        return Err(Error::WindowTooShort { len, min: MIN_FIT_POINTS });
    }
    let mut xs = Vec::with_capacity(len);
    let mut ys = Vec::with_capacity(len);
    for t in start..=end {
        let v = series[t];
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::NonPositiveSeries { t });
        }
        xs.push(libm::log(t as f64));
        ys.push(libm::log(v));
    }
    let n = len as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let residual: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - my - slope * (x - mx);
            e * e
        })
        .sum();
    // A perfectly flat series is a perfect fit with zero slope.
    let r2 = if syy <= f64::EPSILON * f64::EPSILON * n { 1.0 } else { (1.0 - residual / syy).clamp(0.0, 1.0) };
    Ok(DecayEstimate { exponent: -slope, log_log_r2: r2, fit_window: (start, end) })
}

/// Smallest `C` with `series[t] <= C / (t+1)^exponent` on the window.
pub fn envelope_constant(series: &[f64], exponent: f64, window: (usize, usize)) -> f64 {
    let (start, end) = window;
    series[start..=end.min(series.len() - 1)]
        .iter()
        .enumerate()
        .map(|(i, &v)| v * libm::pow((start + i + 1) as f64, exponent))
        .fold(0.0, f64::max)
}

/// Constants entering the bound on `||w~2(inf) - w~2(0)||`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutOfSpanBoundInputs {
    /// Envelope constant of the coupling decay, `eta` and curvature folded in.
    pub c_lambda: f64,
    /// Envelope constant of the in-span error decay.
    pub c_conv: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    /// `||D~2(0)||`.
    pub d2_norm_at_0: f64,
    /// Largest singular value of `X`.
    pub sigma_max_1: f64,
    /// `||w~1(0)||`.
    pub w1_init_norm: f64,
}

pub fn out_of_span_bound(inputs: &OutOfSpanBoundInputs) -> Result<f64> {
    let OutOfSpanBoundInputs { c_lambda, c_conv, alpha, beta, eta, d2_norm_at_0, sigma_max_1, w1_init_norm } = *inputs;
    let excess = alpha + beta - 1.0;
    if !(excess > 0.0) {
        return Err(Error::SubcriticalExponents { sum: alpha + beta });
    }
    let all = [c_lambda, c_conv, alpha, beta, eta, d2_norm_at_0, sigma_max_1, w1_init_norm];
    if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter("bound constants must be finite and nonnegative"));
    }
    Ok(c_lambda * c_conv / excess + eta * d2_norm_at_0 * sigma_max_1 * sigma_max_1 * w1_init_norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCurveParams {
    a: f64,
    b: f64,
    c: f64,
    alpha: f64,
    beta: f64,
}

impl BoundCurveParams {
    pub fn new(a: f64, b: f64, c: f64, alpha: f64, beta: f64) -> Result<Self> {
        if [a, b, c].iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("a, b and c must be positive"));
        }
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::InvalidParameter("exponents must be nonnegative"));
        }
        if !(alpha + beta > 1.0) {
            return Err(Error::SubcriticalExponents { sum: alpha + beta });
        }
        Ok(Self { a, b, c, alpha, beta })
    }

    pub fn a(&self) -> f64 {
        self.a
    }
}

/// `a + b/(T+1)^beta * (1 - c/(alpha+beta-1) / (T+1)^(alpha-1))`.
pub fn bound_curve(p: &BoundCurveParams, t: u64) -> f64 {
    let base = t as f64 + 1.0;
    let decay = libm::pow(base, -p.beta);
    let correction = p.c / (p.alpha + p.beta - 1.0) * libm::pow(base, 1.0 - p.alpha);
    p.a + p.b * decay * (1.0 - correction)
}

/// Predicted limit of the unrooted diagonal AdaGrad variant started at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantFixedPoint {
    /// Unit vector along `diag(|X^T y|)^{-1} sign(X^T y)`.
    pub direction: Vec<f64>,
    /// Proportionality constant in `X Q^{-1} sign(X^T y) = c y`.
    pub c: f64,
}

/// Returns the predicted direction when every entry of `X^T y` is nonzero
/// and `X Q^{-1} sign(X^T y)` is parallel to `y`, with `Q = diag(|X^T y|)`.
pub fn adagrad_variant_fixed_point_oracle(x: &Matrix, y: &[f64]) -> Result<Option<VariantFixedPoint>> {
    if y.len() != x.rows() {
        return Err(Error::DimensionMismatch { expected: x.rows(), found: y.len() });
    }
    let xty = x.tr_matvec(y)?;
    if xty.contains(&0.0) {
        return Ok(None);
    }
    // Q^{-1} sign(v) = 1 / v elementwise.
    let q: Vec<f64> = xty.iter().map(|v| 1.0 / v).collect();
    let xq = x.matvec(&q)?;
    let yy = linalg::dot(y, y);
    if yy == 0.0 {
        return Ok(None);
    }
    let c = linalg::dot(&xq, y) / yy;
    let residual = linalg::norm2(&linalg::sub(&xq, &linalg::scale(y, c)));
    if residual > 1e-10 * linalg::norm2(&xq).max(1.0) {
        return Ok(None);
    }
    let norm = linalg::norm2(&q);
    Ok(Some(VariantFixedPoint { direction: linalg::scale(&q, 1.0 / norm), c }))
}

/// `||w - <w, u> u|| / ||w||` for a unit vector `u`; zero for `w = 0`.
pub fn collinearity_defect(w: &[f64], unit: &[f64]) -> f64 {
    let norm = linalg::norm2(w);
    if norm == 0.0 {
        return 0.0;
    }
    let along = linalg::dot(w, unit);
    linalg::norm2(&linalg::sub(w, &linalg::scale(unit, along))) / norm
}
