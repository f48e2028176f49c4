//! Householder QR decomposition for square matrices.

use crate::error::{KronoptError, Result};
use crate::mat::Matrix;

/// QR decomposition `M = Q R` with `Q` orthogonal and `R` upper-triangular
/// with nonnegative diagonal (sign convention, so runs are reproducible).
pub fn qr_decompose(m: &Matrix) -> Result<(Matrix, Matrix)> {
    if !m.is_square() {
        return Err(KronoptError::DimError(format!(
            "QR expects a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(KronoptError::InvalidMatrix(
            "QR input contains non-finite entries".into(),
        ));
    }

    let n = m.rows();
    let mut r = m.clone();
    let mut q = Matrix::identity(n);
    let mut v = vec![0.0_f64; n];

    for k in 0..n.saturating_sub(1) {
        // Householder reflector for column k below the diagonal.
        let mut norm = 0.0_f64;
        for i in k..n {
            norm = norm.hypot(r[(i, k)]);
        }
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[(k, k)] > 0.0 { -norm } else { norm };
        v[k] = r[(k, k)] - alpha;
        for i in (k + 1)..n {
            v[i] = r[(i, k)];
        }
        let vtv: f64 = (k..n).map(|i| v[i] * v[i]).sum();
        if vtv == 0.0 {
            continue;
        }

        // R <- H R
        for j in k..n {
            let dot: f64 = (k..n).map(|i| v[i] * r[(i, j)]).sum();
            let coef = 2.0 * dot / vtv;
            for i in k..n {
                r[(i, j)] -= coef * v[i];
            }
        }
        // Q <- Q H  (H is symmetric)
        for row in 0..n {
            let dot: f64 = (k..n).map(|i| q[(row, i)] * v[i]).sum();
            let coef = 2.0 * dot / vtv;
            for i in k..n {
                q[(row, i)] -= coef * v[i];
            }
        }
    }

    // Force exact upper-triangularity and a nonnegative diagonal.
    for i in 0..n {
        for j in 0..i {
            r[(i, j)] = 0.0;
        }
    }
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            for j in k..n {
                r[(k, j)] = -r[(k, j)];
            }
            for i in 0..n {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }

    Ok((q, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factors_as_identity() {
        let (q, r) = qr_decompose(&Matrix::identity(4)).unwrap();
        assert!((&q - &Matrix::identity(4)).frobenius_norm() < 1e-14);
        assert!((&r - &Matrix::identity(4)).frobenius_norm() < 1e-14);
    }

    #[test]
    fn positive_diagonal_matrix_is_its_own_r() {
        let d = Matrix::from_fn(3, 3, |i, j| if i == j { (i + 1) as f64 } else { 0.0 });
        let (q, r) = qr_decompose(&d).unwrap();
        assert!((&q - &Matrix::identity(3)).frobenius_norm() < 1e-14);
        assert!((&r - &d).frobenius_norm() < 1e-14);
    }

    #[test]
    fn seeded_6x6_orthogonality_and_reconstruction() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let m = Matrix::from_fn(6, 6, |_, _| rng.random_range(-2.0..2.0));
        let (q, r) = qr_decompose(&m).unwrap();
        let qtq = q.transpose().matmul(&q);
        assert!((&qtq - &Matrix::identity(6)).frobenius_norm() <= 1e-10);
        let recon = q.matmul(&r);
        assert!((&recon - &m).frobenius_norm() <= 1e-10 * m.frobenius_norm());
        for k in 0..6 {
            assert!(r[(k, k)] >= 0.0, "R diagonal sign convention violated");
        }
    }

    #[test]
    fn rejects_non_square_and_non_finite() {
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(
            qr_decompose(&rect),
            Err(KronoptError::DimError(_))
        ));
        let mut bad = Matrix::identity(2);
        bad[(0, 1)] = f64::NAN;
        assert!(matches!(
            qr_decompose(&bad),
            Err(KronoptError::InvalidMatrix(_))
        ));
    }
}
