//! Spectral coordinates of the data matrix.
//!
//! With `X = U Λ V^T` and both bases completed to full orthogonal matrices,
//! a weight vector `w` has spectral coordinates `w~ = V^T w`. The first `R`
//! entries (the row space of `X`) form the in-span block, the remaining
//! `d - R` entries the out-of-span block. A preconditioner `D` is viewed
//! the same way as `D~ = V^T D V`, split into
//!
//! ```text
//! D~ = [ D1   D2^T ]    D1: R x R
//!      [ D2   D3   ]    D2: (d-R) x R,  D3: (d-R) x (d-R)
//! ```
//!
//! `D2` is the block that moves the out-of-span component of the iterate.

use alloc::vec::Vec;

use crate::linalg::{self, complete_basis, jacobi_svd, Matrix};
use crate::{Error, Result};

/// Completed singular value decomposition `X = U Λ V^T`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    left: Matrix,
    right: Matrix,
    singular_values: Vec<f64>,
    rank: usize,
    rank_tolerance: f64,
}

impl SpectralDecomposition {
    /// Orthogonal `n x n` left basis `U`.
    pub fn left_basis(&self) -> &Matrix {
        &self.left
    }

    /// Orthogonal `d x d` right basis `V`.
    pub fn right_basis(&self) -> &Matrix {
        &self.right
    }

    /// The `min(n, d)` singular values, descending.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn rank_tolerance(&self) -> f64 {
        self.rank_tolerance
    }

    /// Number of samples `n`.
    pub fn samples(&self) -> usize {
        self.left.rows()
    }

    /// Number of parameters `d`.
    pub fn dim(&self) -> usize {
        self.right.rows()
    }

    pub fn is_over_parameterized(&self) -> bool {
        self.rank < self.dim()
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    /// Column `r` of `V`.
    pub fn right_vector(&self, r: usize) -> Vec<f64> {
        self.right.column(r)
    }

    /// The `n x d` rectangular diagonal `Λ`.
    pub fn lambda_matrix(&self) -> Matrix {
        let mut l = Matrix::zeros(self.samples(), self.dim());
        for (i, &s) in self.singular_values.iter().enumerate() {
            l[(i, i)] = s;
        }
        l
    }

    /// `U Λ V^T`.
    pub fn reconstruct(&self) -> Matrix {
        self.left
            .matmul(&self.lambda_matrix())
            .and_then(|m| m.matmul(&self.right.transpose()))
            .expect("decomposition factors have consistent shapes")
    }

    /// Diagonal of `Λ^T Λ` as a length-`d` vector (zero past `min(n, d)`).
    pub fn squared_spectrum(&self) -> Vec<f64> {
        let mut s = alloc::vec![0.0; self.dim()];
        for (i, &v) in self.singular_values.iter().enumerate() {
            s[i] = v * v;
        }
        s
    }

    /// `V^T w` split at the rank.
    pub fn to_spectral(&self, w: &[f64]) -> Result<SpectralVector> {
        let full = self.right.tr_matvec(w)?;
        Ok(SpectralVector::new(full, self.rank))
    }

    /// `V w~`.
    pub fn from_spectral(&self, w: &SpectralVector) -> Result<Vec<f64>> {
        self.right.matvec(&w.full)
    }

    /// `U^T z` for a length-`n` vector.
    pub fn to_left_spectral(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.left.tr_matvec(z)
    }

    pub fn precond_to_spectral(&self, d: &Matrix) -> Result<SpectralPreconditioner> {
        let dim = self.dim();
        if d.shape() != (dim, dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: d.rows() });
        }
        let asym = d.asymmetry().unwrap_or(f64::INFINITY);
        if asym > 1e-10 * d.max_abs().max(1.0) {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let full = self.right.congruence(d)?;
        Ok(SpectralPreconditioner::new(full, self.rank))
    }

    /// `V [[D1, 0], [0, I]] V^T` where `D1` is the in-span block of `V^T D V`.
    ///
    /// The coupling block of the result is exactly zero in spectral
    /// coordinates and the out-of-span block is the identity, so the result
    /// stays positive definite whenever `D1` is.
    pub fn project_onto_span(&self, d: &Matrix) -> Result<Matrix> {
        let dim = self.dim();
        if d.shape() != (dim, dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: d.rows() });
        }
        let r = self.rank;
        let v_in = self.right.block(0, 0, dim, r);
        let d1 = v_in.congruence(d)?;
        let mut spectral = Matrix::identity(dim);
        spectral.set_block(0, 0, &d1);
        let out = self.right.matmul(&spectral)?.matmul(&self.right.transpose())?;
        Ok(symmetrize(out))
    }

    /// `V_R Λ_R^{-1} U_R^T y`, the least-squares solution of minimum norm.
    pub fn min_norm_solution(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.samples() {
            return Err(Error::DimensionMismatch { expected: self.samples(), found: y.len() });
        }
        if !linalg::all_finite(y) {
            return Err(Error::NonFinite);
        }
        let proj = self.left.tr_matvec(y)?;
        let mut coeffs = alloc::vec![0.0; self.dim()];
        for r in 0..self.rank {
            coeffs[r] = proj[r] / self.singular_values[r];
        }
        self.right.matvec(&coeffs)
    }
}

fn symmetrize(mut m: Matrix) -> Matrix {
    let n = m.rows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

/// Default numerical-rank threshold `1e-10 * sigma_max * max(n, d)`.
pub fn default_rank_tolerance(sigma_max: f64, n: usize, d: usize) -> f64 {
    1e-10 * sigma_max * n.max(d) as f64
}

/// Completed SVD of `x`.
///
/// `rank_tolerance = None` uses [`default_rank_tolerance`]. Each right
/// singular vector is oriented so that its first nonzero entry is positive,
/// and the matching left vector is flipped with it.
pub fn decompose(x: &Matrix, rank_tolerance: Option<f64>) -> Result<SpectralDecomposition> {
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(Error::DimensionMismatch { expected: 1, found: 0 });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    if let Some(t) = rank_tolerance {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter("rank tolerance must be finite and nonnegative"));
        }
    }

    // Rotate the orientation with fewer columns; its rotation accumulator is
    // a complete orthogonal basis on that side.
    let wide = d > n;
    let cols: Vec<Vec<f64>> =
        if wide { (0..n).map(|i| x.row(i).to_vec()).collect() } else { (0..d).map(|j| x.column(j)).collect() };
    let svd = jacobi_svd(cols)?;
    let values = svd.values;
    let sigma_max = values.first().copied().unwrap_or(0.0);
    let tol = rank_tolerance.unwrap_or_else(|| default_rank_tolerance(sigma_max, n, d));
    let rank = values.iter().take_while(|&&s| s > tol).count();
    if rank == 0 {
        return Err(Error::AllZeroMatrix);
    }

    // `long` lives in R^{max(n,d)}: the side whose vectors come from A*J.
    let long_dim = if wide { d } else { n };
    let mut long: Vec<Vec<f64>> =
        svd.scaled_left.iter().take(rank).zip(&values).map(|(c, &s)| linalg::scale(c, 1.0 / s)).collect();
    let extra = complete_basis(&long, long_dim);
    long.extend(extra);
    let mut short = svd.right;

    let (mut u_cols, mut v_cols) = if wide { (short, long) } else { (long, core::mem::take(&mut short)) };
    let paired = n.min(d);
    for r in 0..paired {
        if first_nonzero_negative(&v_cols[r]) {
            negate(&mut v_cols[r]);
            negate(&mut u_cols[r]);
        }
    }
    for c in v_cols.iter_mut().skip(paired) {
        if first_nonzero_negative(c) {
            negate(c);
        }
    }
    for c in u_cols.iter_mut().skip(paired) {
        if first_nonzero_negative(c) {
            negate(c);
        }
    }

    Ok(SpectralDecomposition {
        left: Matrix::from_columns(n, &u_cols)?,
        right: Matrix::from_columns(d, &v_cols)?,
        singular_values: values,
        rank,
        rank_tolerance: tol,
    })
}

fn first_nonzero_negative(v: &[f64]) -> bool {
    let scale = linalg::norm_inf(v);
    v.iter().find(|x| x.abs() > 1e-12 * scale).is_some_and(|&x| x < 0.0)
}

fn negate(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = -*x;
    }
}

/// Minimum-norm least-squares solution of `X w = y`.
pub fn min_norm_solution(x: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    if !linalg::all_finite(y) {
        return Err(Error::NonFinite);
    }
    decompose(x, None)?.min_norm_solution(y)
}

/// A vector in spectral coordinates with its in-span / out-of-span split.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVector {
    pub full: Vec<f64>,
    rank: usize,
}

impl SpectralVector {
    pub fn new(full: Vec<f64>, rank: usize) -> Self {
        assert!(rank <= full.len(), "rank exceeds dimension");
        Self { full, rank }
    }

    pub fn from_blocks(in_span: &[f64], out_span: &[f64]) -> Self {
        let mut full = in_span.to_vec();
        full.extend_from_slice(out_span);
        Self { full, rank: in_span.len() }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn in_span(&self) -> &[f64] {
        &self.full[..self.rank]
    }

    pub fn out_span(&self) -> &[f64] {
        &self.full[self.rank..]
    }
}

/// `V^T D V` with its blocks.
#[derive(Debug, Clone)]
pub struct SpectralPreconditioner {
    pub full: Matrix,
    rank: usize,
}

impl SpectralPreconditioner {
    pub fn new(full: Matrix, rank: usize) -> Self {
        assert!(full.rows() == full.cols() && rank <= full.rows());
        Self { full, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `D1`, the `R x R` top-left block.
    pub fn block1(&self) -> Matrix {
        self.full.block(0, 0, self.rank, self.rank)
    }

    /// `D2`, the `(d-R) x R` bottom-left block.
    pub fn block2(&self) -> Matrix {
        let d = self.full.rows();
        self.full.block(self.rank, 0, d - self.rank, self.rank)
    }

    /// `D3`, the `(d-R) x (d-R)` bottom-right block.
    pub fn block3(&self) -> Matrix {
        let d = self.full.rows();
        self.full.block(self.rank, self.rank, d - self.rank, d - self.rank)
    }

    /// Spectral norm of `D2` (the quantity whose decay defines alpha).
    pub fn coupling_norm(&self) -> Result<f64> {
        linalg::spectral_norm(&self.block2())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn orthogonality_error(q: &Matrix) -> f64 {
        q.transpose().matmul(q).unwrap().max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn already_diagonal_row() {
        let x = Matrix::from_rows(&[[3.0, 0.0]]).unwrap();
        let dec = decompose(&x, Some(1e-12)).unwrap();
        assert_eq!(dec.singular_values(), &[3.0]);
        assert_eq!(dec.rank(), 1);
        assert_eq!(dec.right_vector(0), vec![1.0, 0.0]);
        let v2 = dec.right_vector(1);
        assert!(v2[0].abs() < 1e-15 && (v2[1] - 1.0).abs() < 1e-15);
        assert!(dec.is_over_parameterized());
    }

    #[test]
    fn identity_is_full_rank() {
        let dec = decompose(&Matrix::identity(2), None).unwrap();
        assert_eq!(dec.singular_values(), &[1.0, 1.0]);
        assert_eq!(dec.rank(), 2);
        assert!(!dec.is_over_parameterized());
    }

    #[test]
    fn one_by_three_row() {
        // ||[1,2,2]|| = 3 and the only right singular vector is the row / 3.
        let x = Matrix::from_rows(&[[1.0, 2.0, 2.0]]).unwrap();
        let dec = decompose(&x, None).unwrap();
        assert!((dec.singular_values()[0] - 3.0).abs() < 1e-14);
        assert_eq!(dec.rank(), 1);
        let v1 = dec.right_vector(0);
        for (a, b) in v1.iter().zip([1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(dec.reconstruct().max_abs_diff(&x) < 1e-14);
        assert!(orthogonality_error(dec.right_basis()) < 1e-14);
    }

    #[test]
    fn tall_rank_deficient() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]).unwrap();
        let dec = decompose(&x, None).unwrap();
        assert_eq!(dec.rank(), 1);
        assert!(orthogonality_error(dec.left_basis()) < 1e-14);
        assert!(orthogonality_error(dec.right_basis()) < 1e-14);
        assert!(dec.reconstruct().max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn errors() {
        assert_eq!(decompose(&Matrix::zeros(2, 3), None).unwrap_err(), Error::AllZeroMatrix);
        let bad = Matrix::from_rows(&[[1.0, f64::NAN]]).unwrap();
        assert_eq!(decompose(&bad, None).unwrap_err(), Error::NonFinite);
        let dec = decompose(&Matrix::identity(2), None).unwrap();
        assert!(matches!(dec.to_spectral(&[1.0]), Err(Error::DimensionMismatch { .. })));
        let asym = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(dec.precond_to_spectral(&asym), Err(Error::NotSymmetric { .. })));
        assert!(matches!(dec.precond_to_spectral(&Matrix::identity(3)), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(dec.project_onto_span(&Matrix::identity(3)), Err(Error::DimensionMismatch { .. })));
        assert_eq!(min_norm_solution(&Matrix::identity(2), &[f64::INFINITY, 0.0]).unwrap_err(), Error::NonFinite);
    }

    #[test]
    fn to_spectral_with_identity_basis() {
        let dec = decompose(&Matrix::from_rows(&[[3.0, 0.0]]).unwrap(), None).unwrap();
        let s = dec.to_spectral(&[1.0, 2.0]).unwrap();
        assert_eq!(s.full, vec![1.0, 2.0]);
        assert_eq!(s.in_span(), &[1.0]);
        assert_eq!(s.out_span(), &[2.0]);
    }

    #[test]
    fn basis_vector_maps_to_unit() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 2.0, 0.5], [0.0, 1.0, -1.0, 3.0]]).unwrap();
        let dec = decompose(&x, None).unwrap();
        let s = dec.to_spectral(&dec.right_vector(2)).unwrap();
        for (i, v) in s.full.iter().enumerate() {
            let want = if i == 2 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-14);
        }
    }

    #[test]
    fn precond_with_identity_basis() {
        let dec = decompose(&Matrix::from_rows(&[[3.0, 0.0]]).unwrap(), None).unwrap();
        let sp = dec.precond_to_spectral(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert_eq!(sp.full, Matrix::from_diag(&[4.0, 9.0]));
        assert_eq!(sp.block2(), Matrix::zeros(1, 1));
    }

    #[test]
    fn precond_rotated_45_degrees() {
        // X = [[1, 1]] has v1 = [1,1]/sqrt2, v2 = [-1,1]/sqrt2 (up to sign).
        let dec = decompose(&Matrix::from_rows(&[[1.0, 1.0]]).unwrap(), None).unwrap();
        let d = Matrix::from_diag(&[1.0, 3.0]);
        let sp = dec.precond_to_spectral(&d).unwrap();
        // Oracle: V^T D V multiplied out by hand for V = [[s, -s], [s, s]].
        let s = core::f64::consts::FRAC_1_SQRT_2;
        let hand = Matrix::from_rows(&[[s, -s], [s, s]]).unwrap().congruence(&d).unwrap();
        assert!((hand[(0, 0)] - 2.0).abs() < 1e-14 && (hand[(0, 1)] - 1.0).abs() < 1e-14);
        for i in 0..2 {
            for j in 0..2 {
                // second basis vector's sign is convention-dependent
                assert!((sp.full[(i, j)].abs() - hand[(i, j)].abs()).abs() < 1e-14);
            }
        }
        let (eig, _) = linalg::symmetric_eigen(&sp.full).unwrap();
        assert!((eig[0] - 1.0).abs() < 1e-13 && (eig[1] - 3.0).abs() < 1e-13);
    }

    #[test]
    fn identity_preconditioner_has_no_coupling() {
        let x = Matrix::from_rows(&[[1.0, 2.0, 0.5], [0.3, -1.0, 2.0]]).unwrap();
        let dec = decompose(&x, None).unwrap();
        let sp = dec.precond_to_spectral(&Matrix::identity(3)).unwrap();
        assert!(sp.full.max_abs_diff(&Matrix::identity(3)) < 1e-14);
        assert!(sp.block2().max_abs() < 1e-14);
    }

    #[test]
    fn projection_with_identity_basis() {
        let dec = decompose(&Matrix::from_rows(&[[3.0, 0.0]]).unwrap(), None).unwrap();
        let p = dec.project_onto_span(&Matrix::from_rows(&[[2.0, 1.0], [1.0, 5.0]]).unwrap()).unwrap();
        assert_eq!(p, Matrix::from_rows(&[[2.0, 0.0], [0.0, 1.0]]).unwrap());
        let q = dec.project_onto_span(&Matrix::identity(2)).unwrap();
        assert_eq!(q, Matrix::identity(2));
    }

    #[test]
    fn min_norm_examples() {
        let w = min_norm_solution(&Matrix::from_rows(&[[1.0, 1.0]]).unwrap(), &[2.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-14 && (w[1] - 1.0).abs() < 1e-14);
        let w = min_norm_solution(&Matrix::identity(2), &[3.0, 4.0]).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-14 && (w[1] - 4.0).abs() < 1e-14);
        // Every interpolant of [[1,0],[1,0]] w = [1,1] is [1, t]; the shortest has t = 0.
        let w = min_norm_solution(&Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap(), &[1.0, 1.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-14 && w[1].abs() < 1e-14);
    }
}
