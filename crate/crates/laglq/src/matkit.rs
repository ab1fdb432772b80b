//! Dense real matrix kernel.
//!
//! Every other module works on [`Matrix`], a heap-allocated `f64` matrix.
//! Dimensions here are tiny (a handful of rows), so everything is direct
//! and O(n³). Complex arithmetic appears only in [`spectral_radius`] and
//! [`hermitian_min_eig`].

pub use nalgebra::Complex;
use nalgebra::{DMatrix, Schur};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type CMatrix = DMatrix<Complex<f64>>;

/// Default mixed absolute/relative tolerance for symmetry, PSD and residual checks.
pub const DEFAULT_TOL: f64 = 1e-9;

const EIG_MAX_ITERS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix is singular (pivot {pivot:.3e} below threshold {threshold:.3e})")]
    SingularMatrix { pivot: f64, threshold: f64 },
    #[error("eigenvalue iteration did not converge")]
    NonConvergence,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Builds a matrix from row-major entries, rejecting NaN and infinities.
pub fn from_rows(rows: usize, cols: usize, entries: &[f64]) -> Result<Matrix, MatError> {
    if entries.len() != rows * cols {
        return Err(MatError::DimensionMismatch(format!(
            "{} entries for a {rows}x{cols} matrix",
            entries.len()
        )));
    }
    let m = Matrix::from_row_slice(rows, cols, entries);
    check_finite(&m)?;
    Ok(m)
}

pub fn check_finite(m: &Matrix) -> Result<(), MatError> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(MatError::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

/// Row-major copy of the entries.
pub fn to_rows(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).norm() <= tol * (1.0 + m.norm())
}

/// Solves `m · x = rhs` by fully pivoted LU.
pub fn solve_linear(m: &Matrix, rhs: &Matrix) -> Result<Matrix, MatError> {
    if !m.is_square() || m.nrows() != rhs.nrows() {
        return Err(MatError::DimensionMismatch(format!(
            "solve {}x{} against {}x{}",
            m.nrows(),
            m.ncols(),
            rhs.nrows(),
            rhs.ncols()
        )));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(rhs.clone());
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let threshold = f64::EPSILON * n as f64 * scale;
    let lu = m.clone().full_piv_lu();
    let u = lu.u();
    let pivot = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if pivot <= threshold {
        return Err(MatError::SingularMatrix { pivot, threshold });
    }
    lu.solve(rhs)
        .ok_or(MatError::SingularMatrix { pivot, threshold })
}

pub fn inverse(m: &Matrix) -> Result<Matrix, MatError> {
    solve_linear(m, &Matrix::identity(m.nrows(), m.nrows()))
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

impl SymEig {
    pub fn min(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(f64::NAN)
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(f64::NAN)
    }

    pub fn reconstruct(&self) -> Matrix {
        let u = &self.eigenvectors;
        let lambda = Matrix::from_diagonal(&nalgebra::DVector::from_vec(self.eigenvalues.clone()));
        u * lambda * u.transpose()
    }
}

/// Symmetric eigen-decomposition. The input is symmetrized first.
pub fn sym_eig(m: &Matrix) -> Result<SymEig, MatError> {
    if !m.is_square() {
        return Err(MatError::DimensionMismatch(format!(
            "sym_eig of {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(SymEig { eigenvalues: vec![], eigenvectors: Matrix::zeros(0, 0) });
    }
    let eig = symmetrize(m)
        .try_symmetric_eigen(f64::EPSILON, EIG_MAX_ITERS)
        .ok_or(MatError::NonConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEig { eigenvalues, eigenvectors })
}

pub fn lambda_min(m: &Matrix) -> Result<f64, MatError> {
    Ok(sym_eig(m)?.min())
}

pub fn lambda_max(m: &Matrix) -> Result<f64, MatError> {
    Ok(sym_eig(m)?.max())
}

/// Eigenvalues of a general square matrix.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex<f64>>, MatError> {
    if !m.is_square() {
        return Err(MatError::DimensionMismatch(format!(
            "eigenvalues of {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(vec![]);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, EIG_MAX_ITERS).ok_or(MatError::NonConvergence)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

/// ρ(M): the largest eigenvalue modulus.
pub fn spectral_radius(m: &Matrix) -> Result<f64, MatError> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Operator 2-norm (largest singular value).
pub fn norm2(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// PSD test through the smallest eigenvalue, scaled by the matrix size.
pub fn is_psd(m: &Matrix, tol: f64) -> Result<bool, MatError> {
    let lmin = lambda_min(m)?;
    Ok(lmin >= -tol * (1.0 + m.norm()))
}

/// Cholesky factorization attempt; `None` when the matrix is not positive definite.
pub fn cholesky(m: &Matrix) -> Option<Matrix> {
    nalgebra::Cholesky::new(symmetrize(m)).map(|c| c.l())
}

/// Symmetric PSD square root through the eigen-decomposition.
pub fn sqrt_psd(m: &Matrix) -> Result<Matrix, MatError> {
    let eig = sym_eig(m)?;
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        let u = eig.eigenvectors.column(i);
        out += (u * u.transpose()) * l.max(0.0).sqrt();
    }
    Ok(out)
}

/// Orthonormal basis of the null space of `m`, one column per direction.
///
/// Directions come from eigenvectors of `mᵀm` with eigenvalue below `tol·‖m‖²`.
pub fn kernel_basis(m: &Matrix, tol: f64) -> Result<Matrix, MatError> {
    let gram = m.transpose() * m;
    let eig = sym_eig(&gram)?;
    let cut = tol * (1.0 + eig.max().abs());
    let cols: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] <= cut).collect();
    let mut basis = Matrix::zeros(m.ncols(), cols.len());
    for (j, &i) in cols.iter().enumerate() {
        basis.set_column(j, &eig.eigenvectors.column(i));
    }
    Ok(basis)
}

/// Smallest nonzero eigenvalue of `mᵀm` (the squared smallest nonzero singular value).
pub fn min_nonzero_gram_eig(m: &Matrix, tol: f64) -> Result<f64, MatError> {
    let eig = sym_eig(&(m.transpose() * m))?;
    let cut = tol * (1.0 + eig.max().abs());
    Ok(eig.eigenvalues.iter().copied().find(|&l| l > cut).unwrap_or(0.0))
}

/// Smallest eigenvalue of a Hermitian complex matrix.
///
/// Uses the real embedding `[[Re, −Im], [Im, Re]]`, whose spectrum is the
/// Hermitian spectrum with every eigenvalue doubled.
pub fn hermitian_min_eig(h: &CMatrix) -> Result<f64, MatError> {
    let n = h.nrows();
    let mut emb = Matrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let hij = (h[(i, j)] + h[(j, i)].conj()) * 0.5;
            emb[(i, j)] = hij.re;
            emb[(i + n, j + n)] = hij.re;
            emb[(i, j + n)] = -hij.im;
            emb[(i + n, j)] = hij.im;
        }
    }
    lambda_min(&emb)
}

pub fn to_complex(m: &Matrix) -> CMatrix {
    m.map(|x| Complex::new(x, 0.0))
}

/// Stacks matrices with equal column counts vertically.
pub fn vstack(blocks: &[&Matrix]) -> Matrix {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

/// Places matrices with equal row counts side by side.
pub fn hstack(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Copies the block starting at `(r, c)` with the given shape.
pub fn block(m: &Matrix, r: usize, c: usize, rows: usize, cols: usize) -> Matrix {
    m.view((r, c), (rows, cols)).into_owned()
}

/// Column-major vectorization.
pub fn vec_cols(m: &Matrix) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_column_slice(m.as_slice())
}

pub fn unvec_cols(v: &nalgebra::DVector<f64>, rows: usize, cols: usize) -> Matrix {
    Matrix::from_column_slice(rows, cols, v.as_slice())
}
