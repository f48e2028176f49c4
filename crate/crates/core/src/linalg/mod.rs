//! Self-contained dense linear algebra for symmetric matrices: full
//! eigendecomposition, QR decomposition, the warm-started QR refinement of a
//! cached eigenbasis, and the relative off-diagonal criterion that drives
//! adaptive eigenbasis recomputation.
//!
//! All functions here are pure; nothing holds shared mutable state, so they
//! are safe to call from any number of threads.

mod eig;
mod qr;

pub use qr::qr_decompose;

use crate::error::{KronoptError, Result};
use crate::mat::Matrix;

/// Dense symmetric matrix. Constructors symmetrize their input as
/// `(M + Mᵀ)/2` and reject non-finite entries, so a value of this type is
/// always exactly symmetric. Operations never mutate the stored entries;
/// ε-regularization happens on the way out (see [`mat_power`]).
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    mat: Matrix,
}

impl SymMatrix {
    /// Symmetrize and validate an arbitrary square matrix.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(KronoptError::DimError(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if !m.is_finite() {
            return Err(KronoptError::InvalidMatrix(
                "symmetric matrix input contains non-finite entries".into(),
            ));
        }
        let sym = Matrix::from_fn(m.rows(), m.cols(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
        Ok(Self { mat: sym })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            mat: Matrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mat: Matrix::identity(dim),
        }
    }

    /// `c * I`.
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        Self {
            mat: Matrix::identity(dim).scale(c),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn to_matrix(&self) -> Matrix {
        self.mat.clone()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.frobenius_norm()
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }

    /// `qᵀ M q`, symmetrized. The workhorse behind the refresh criterion.
    pub fn rotate(&self, q: &Matrix) -> Result<SymMatrix> {
        if q.rows() != self.dim() || q.cols() != self.dim() {
            return Err(KronoptError::DimError(format!(
                "rotation basis is {}x{}, matrix is {dim}x{dim}",
                q.rows(),
                q.cols(),
                dim = self.dim()
            )));
        }
        let rotated = q.transpose().matmul(&self.mat).matmul(q);
        SymMatrix::from_matrix(&rotated)
    }
}

/// Spectral decomposition of a [`SymMatrix`]: orthogonal `basis` with
/// eigenvalues sorted descending and a fixed sign convention (first
/// nonzero entry of each eigenvector is positive), so decompositions are
/// bit-reproducible for identical input.
#[derive(Debug, Clone)]
pub struct EigPair {
    pub basis: Matrix,
    pub values: Vec<f64>,
}

impl EigPair {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `Q diag(λ) Qᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let scaled = Matrix::from_fn(n, n, |i, j| self.basis[(i, j)] * self.values[j]);
        scaled.matmul(&self.basis.transpose())
    }
}

/// Full symmetric eigendecomposition.
pub fn sym_eig(m: &SymMatrix) -> Result<EigPair> {
    let (q_raw, vals_raw) = eig::symmetric_eig_raw(m.as_matrix())?;
    let n = m.dim();

    // Sort eigenpairs by eigenvalue, descending; ties keep solver order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals_raw[b].partial_cmp(&vals_raw[a]).unwrap());

    let mut basis = Matrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(vals_raw[src]);
        // Sign convention: first entry of nonnegligible magnitude is positive.
        let mut max_abs = 0.0_f64;
        for i in 0..n {
            max_abs = max_abs.max(q_raw[(i, src)].abs());
        }
        let mut sign = 1.0;
        for i in 0..n {
            let x = q_raw[(i, src)];
            if x.abs() > 1e-12 * max_abs {
                if x < 0.0 {
                    sign = -1.0;
                }
                break;
            }
        }
        for i in 0..n {
            basis[(i, dst)] = sign * q_raw[(i, src)];
        }
    }

    Ok(EigPair { basis, values })
}

/// Relative Frobenius mass of the off-diagonal part:
/// `‖M - diag(M)‖_F / ‖M‖_F`, in `[0, 1]`.
///
/// Errors with [`KronoptError::ZeroNorm`] on the zero matrix; callers treat
/// that case as "criterion satisfied" (a factor with no gradient signal yet
/// keeps its identity basis).
pub fn offdiag_ratio(m: &SymMatrix) -> Result<f64> {
    let total = m.frobenius_norm();
    if total == 0.0 {
        return Err(KronoptError::ZeroNorm(
            "off-diagonal ratio of the zero matrix".into(),
        ));
    }
    let n = m.dim();
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let x = m.as_matrix()[(i, j)];
                off += x * x;
            }
        }
    }
    Ok((off.sqrt() / total).min(1.0))
}

/// Result of [`warm_qr_refine`].
#[derive(Debug, Clone)]
pub struct WarmQrOutcome {
    /// Refined orthogonal basis, `Q_prev` times the per-iteration Q factors.
    pub basis: Matrix,
    /// `basisᵀ M basis`; diagonal up to the requested tolerance when converged.
    pub rotated: SymMatrix,
    /// Number of QR iterations performed (0 when the criterion already held).
    pub iters: u32,
    /// Whether the off-diagonal criterion was met within the iteration budget.
    pub converged: bool,
}

/// Warm-started QR iteration: starting from a previous basis `q_prev`,
/// iterate `Λ̂ ← RQ` from `QR = Λ̂` until the relative off-diagonal mass of
/// `Λ̂` drops to `tau`, or `max_iters` is exhausted.
///
/// When the initial `Λ̂ = q_prevᵀ M q_prev` already satisfies the criterion
/// the call returns immediately with `iters = 0` and `basis` equal to
/// `q_prev` bit-for-bit; this is the skip path of the adaptive refresh.
/// Non-convergence is reported through `converged = false`, not an error.
/// Every iterate is an orthogonal similarity of `M`, so trace and Frobenius
/// norm (hence the eigenvalue multiset) are preserved up to roundoff.
pub fn warm_qr_refine(
    m: &SymMatrix,
    q_prev: &Matrix,
    tau: f64,
    max_iters: u32,
) -> Result<WarmQrOutcome> {
    if q_prev.rows() != m.dim() || q_prev.cols() != m.dim() {
        return Err(KronoptError::DimError(format!(
            "warm QR basis is {}x{}, matrix is {dim}x{dim}",
            q_prev.rows(),
            q_prev.cols(),
            dim = m.dim()
        )));
    }
    debug_assert!(
        (&q_prev.transpose().matmul(q_prev) - &Matrix::identity(m.dim())).frobenius_norm()
            <= 1e-8 * m.dim() as f64,
        "warm QR called with a non-orthogonal basis"
    );

    let mut rotated = m.rotate(q_prev)?;
    let satisfied = |lambda: &SymMatrix| match offdiag_ratio(lambda) {
        Ok(r) => r <= tau,
        // Zero matrix: nothing to refine, criterion vacuously satisfied.
        Err(_) => true,
    };

    if satisfied(&rotated) {
        return Ok(WarmQrOutcome {
            basis: q_prev.clone(),
            rotated,
            iters: 0,
            converged: true,
        });
    }

    let mut basis = q_prev.clone();
    for i in 1..=max_iters {
        let (q, r) = qr_decompose(rotated.as_matrix())?;
        rotated = SymMatrix::from_matrix(&r.matmul(&q))?;
        basis = basis.matmul(&q);
        if satisfied(&rotated) {
            return Ok(WarmQrOutcome {
                basis,
                rotated,
                iters: i,
                converged: true,
            });
        }
    }

    Ok(WarmQrOutcome {
        basis,
        rotated,
        iters: max_iters,
        converged: false,
    })
}

/// `Q diag((λ + ε)^exponent) Qᵀ` for an eigendecomposition.
///
/// ε enters as a per-eigenvalue shift; this is the uniform ε semantics used
/// by the Kronecker-factored update rules. Negative exponents require every
/// shifted eigenvalue to be strictly positive. For nonnegative exponents,
/// tiny negative eigenvalues (roundoff from PSD inputs) are clamped to zero.
pub fn mat_power(e: &EigPair, exponent: f64, epsilon: f64) -> Result<SymMatrix> {
    if !exponent.is_finite() {
        return Err(KronoptError::InvalidMatrix("non-finite exponent".into()));
    }
    if epsilon < 0.0 {
        return Err(KronoptError::InvalidMatrix("negative epsilon".into()));
    }
    let mut powered = Vec::with_capacity(e.dim());
    for &v in &e.values {
        let shifted = v + epsilon;
        if exponent < 0.0 {
            if shifted <= 0.0 {
                return Err(KronoptError::SingularFactor(format!(
                    "negative power {exponent} of eigenvalue {v} with epsilon {epsilon}"
                )));
            }
            powered.push(shifted.powf(exponent));
        } else {
            powered.push(shifted.max(0.0).powf(exponent));
        }
    }
    let n = e.dim();
    let scaled = Matrix::from_fn(n, n, |i, j| e.basis[(i, j)] * powered[j]);
    SymMatrix::from_matrix(&scaled.matmul(&e.basis.transpose()))
}
