//! Seeded random matrix generators.
//!
//! ChaCha8 keeps streams identical across platforms and releases, which the
//! reproducibility contract of the telemetry depends on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{qr_decompose, SymMatrix};
use crate::mat::Matrix;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix with iid standard-normal entries.
pub fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = rng_from_seed(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Fill from an existing generator (for sequential draws inside one stream).
pub fn normal_matrix_from(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Seeded SPD matrix `MᵀM + 0.1·I` with `M` standard normal; the ridge keeps
/// condition numbers moderate.
pub fn random_spd(dim: usize, seed: u64) -> SymMatrix {
    let m = normal_matrix(dim, dim, seed);
    let spd = &m.transpose().matmul(&m) + &Matrix::identity(dim).scale(0.1);
    SymMatrix::from_matrix(&spd).expect("SPD construction is finite and square")
}

/// Seeded random orthogonal matrix (Q factor of a normal matrix).
pub fn random_orthogonal(dim: usize, seed: u64) -> Matrix {
    let m = normal_matrix(dim, dim, seed);
    let (q, _) = qr_decompose(&m).expect("QR of a finite square matrix");
    q
}
