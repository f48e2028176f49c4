//! Desk-scale ground truth: explicit full-matrix preconditioners, the
//! optimal Frobenius eigenvalue correction, and bound checkers for the
//! update-norm sandwich and the extreme-eigenvalue band.
//!
//! Everything here builds the `mn x mn` objects the structured optimizers
//! avoid, which is exactly what makes them usable as an independent route
//! for cross-checking the matrix-form updates.

use crate::error::{KronoptError, Result};
use crate::linalg::{mat_power, sym_eig, SymMatrix};
use crate::mat::Matrix;

/// Upper bound on the flattened dimension the oracle will touch
/// (keeps dense `mn x mn` storage within desk-scale memory).
pub const MAX_ORACLE_DIM: usize = 4096;

/// How the full-matrix statistic accumulates gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumMode {
    /// `C ← C + g gᵀ` (AdaGrad-style sum).
    AdagradSum,
    /// `C ← β₂ C + (1−β₂) g gᵀ`.
    AdamEma,
}

/// Tracked full-matrix second-moment statistic over `vec(G)`.
#[derive(Debug, Clone)]
pub struct FullMatrixState {
    c: SymMatrix,
    mode: AccumMode,
    beta2: f64,
}

impl FullMatrixState {
    pub fn new(dim: usize, mode: AccumMode, beta2: f64) -> Result<Self> {
        if dim > MAX_ORACLE_DIM {
            return Err(KronoptError::SizeGuard(format!(
                "full-matrix oracle dim {dim} exceeds {MAX_ORACLE_DIM}"
            )));
        }
        if mode == AccumMode::AdamEma && !(0.0..1.0).contains(&beta2) {
            return Err(KronoptError::ConfigError(format!(
                "beta2 must lie in [0, 1), got {beta2}"
            )));
        }
        Ok(Self {
            c: SymMatrix::zeros(dim),
            mode,
            beta2,
        })
    }

    pub fn dim(&self) -> usize {
        self.c.dim()
    }

    pub fn c(&self) -> &SymMatrix {
        &self.c
    }

    pub fn mode(&self) -> AccumMode {
        self.mode
    }

    /// Fold one gradient vector (`dim x 1`) into the statistic.
    pub fn update(&mut self, g: &Matrix) -> Result<()> {
        if g.rows() != self.dim() || g.cols() != 1 {
            return Err(KronoptError::DimError(format!(
                "gradient vector is {}x{}, state dim {}",
                g.rows(),
                g.cols(),
                self.dim()
            )));
        }
        let outer = g.matmul(&g.transpose());
        let next = match self.mode {
            AccumMode::AdagradSum => self.c.as_matrix() + &outer,
            AccumMode::AdamEma => {
                &self.c.as_matrix().scale(self.beta2) + &outer.scale(1.0 - self.beta2)
            }
        };
        self.c = SymMatrix::from_matrix(&next)?;
        Ok(())
    }
}

/// Optimal diagonal eigenvalue correction in Frobenius norm for a fixed
/// orthogonal basis: `D* = diag(Qᵀ C Q)`. For every diagonal `D`,
/// `‖C − Q diag(D*) Qᵀ‖_F ≤ ‖C − Q diag(D) Qᵀ‖_F`.
pub fn optimal_correction(c: &SymMatrix, q: &Matrix) -> Result<Vec<f64>> {
    if q.rows() != c.dim() || q.cols() != c.dim() {
        return Err(KronoptError::DimError(format!(
            "basis is {}x{}, matrix dim {}",
            q.rows(),
            q.cols(),
            c.dim()
        )));
    }
    let rotated = c.rotate(q)?;
    Ok((0..c.dim()).map(|i| rotated.as_matrix()[(i, i)]).collect())
}

/// Explicit `mn x mn` Kronecker-factored preconditioner:
/// `R ⊗ L` when `squared`, `(R ⊗ L)^{1/2}` otherwise, optionally scaled by
/// `S⁻¹ = tr(L)⁻¹`. Used only to cross-check the structured updates against
/// the preconditioned-gradient form applied literally.
pub fn shampoo_kron_preconditioner(
    l: &SymMatrix,
    r: &SymMatrix,
    squared: bool,
    trace_scaled: bool,
) -> Result<SymMatrix> {
    let mn = l.dim() * r.dim();
    if mn > MAX_ORACLE_DIM {
        return Err(KronoptError::SizeGuard(format!(
            "kron preconditioner dim {mn} exceeds {MAX_ORACLE_DIM}"
        )));
    }
    let kron = if squared {
        r.as_matrix().kron(l.as_matrix())
    } else {
        let half_l = mat_power(&sym_eig(l)?, 0.5, 0.0)?;
        let half_r = mat_power(&sym_eig(r)?, 0.5, 0.0)?;
        half_r.as_matrix().kron(half_l.as_matrix())
    };
    let scaled = if trace_scaled {
        let s = l.trace();
        if s <= 0.0 {
            return Err(KronoptError::ZeroTrace(
                "trace scaling of a zero-trace factor".into(),
            ));
        }
        kron.scale(1.0 / s)
    } else {
        kron
    };
    SymMatrix::from_matrix(&scaled)
}

/// The preconditioned-gradient form applied literally: `-(C + εI)^{-p} g`
/// via a full eigendecomposition of the explicit preconditioner.
pub fn preconditioned_direction(
    c: &SymMatrix,
    g_vec: &Matrix,
    p: f64,
    epsilon: f64,
) -> Result<Matrix> {
    if g_vec.rows() != c.dim() || g_vec.cols() != 1 {
        return Err(KronoptError::DimError(format!(
            "gradient vector is {}x{}, preconditioner dim {}",
            g_vec.rows(),
            g_vec.cols(),
            c.dim()
        )));
    }
    let power = mat_power(&sym_eig(c)?, -p, epsilon)?;
    Ok(power.as_matrix().matmul(g_vec).scale(-1.0))
}

/// Norm sandwich for the generalized eigendecomposed Kronecker-factored
/// update with dense scaling `D` and exponent `p`:
/// `(max D)^{-p} ‖G‖_F ≤ ‖U‖_F ≤ (min D)^{-p} ‖G‖_F`.
pub fn lemma1_bounds(d: &[f64], g: &Matrix, p: f64) -> Result<(f64, f64)> {
    if d.is_empty() {
        return Err(KronoptError::DimError("empty scaling".into()));
    }
    if d.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
        return Err(KronoptError::NonPositiveScale(
            "scaling entries must be strictly positive".into(),
        ));
    }
    debug_assert!(p > 0.0, "the sandwich is stated for p > 0");
    let max_d = d.iter().cloned().fold(f64::MIN, f64::max);
    let min_d = d.iter().cloned().fold(f64::MAX, f64::min);
    let g_norm = g.frobenius_norm();
    Ok((max_d.powf(-p) * g_norm, min_d.powf(-p) * g_norm))
}

/// Extreme-eigenvalue band for idealized updates built from a tracked
/// full-matrix statistic: `(λ_max^{-p} ‖G‖_F, λ_min^{-p} ‖G‖_F)`.
pub fn prop1_extreme_eig_bounds(c_full: &SymMatrix, g: &Matrix, p: f64) -> Result<(f64, f64)> {
    let values = sym_eig(c_full)?.values;
    let lambda_max = values[0];
    let lambda_min = *values.last().expect("non-empty spectrum");
    if lambda_min <= 0.0 {
        return Err(KronoptError::SingularFactor(format!(
            "extreme-eigenvalue bounds need a positive definite statistic, lambda_min = {lambda_min}"
        )));
    }
    let g_norm = g.frobenius_norm();
    Ok((lambda_max.powf(-p) * g_norm, lambda_min.powf(-p) * g_norm))
}

/// Frobenius distances from a full-matrix statistic to the three
/// structured approximations.
#[derive(Debug, Clone, Copy)]
pub struct FrobeniusResiduals {
    /// `‖C − (R ⊗ L)^{1/2}‖_F`.
    pub shampoo: f64,
    /// `‖C − S⁻¹ (R ⊗ L)‖_F`.
    pub shampoo2_trace: f64,
    /// `‖C − (Q_R ⊗ Q_L) diag(vec D) (Q_R ⊗ Q_L)ᵀ‖_F`.
    pub corrected: f64,
}

/// Compute all three residuals for one tracked statistic.
pub fn frobenius_residuals(
    c_full: &SymMatrix,
    l: &SymMatrix,
    r: &SymMatrix,
    q_l: &Matrix,
    q_r: &Matrix,
    d: &Matrix,
) -> Result<FrobeniusResiduals> {
    let (m, n) = (l.dim(), r.dim());
    let mn = m * n;
    if mn > MAX_ORACLE_DIM {
        return Err(KronoptError::SizeGuard(format!(
            "residual computation dim {mn} exceeds {MAX_ORACLE_DIM}"
        )));
    }
    if c_full.dim() != mn || q_l.shape() != (m, m) || q_r.shape() != (n, n) || d.shape() != (m, n) {
        return Err(KronoptError::DimError(
            "residual operands have incompatible shapes".into(),
        ));
    }

    let shampoo = (c_full.as_matrix()
        - shampoo_kron_preconditioner(l, r, false, false)?.as_matrix())
    .frobenius_norm();
    let shampoo2_trace = (c_full.as_matrix()
        - shampoo_kron_preconditioner(l, r, true, true)?.as_matrix())
    .frobenius_norm();

    let q = q_r.kron(q_l);
    let d_vec = d.vec_col_major();
    let diag = Matrix::from_fn(mn, mn, |i, j| if i == j { d_vec[(i, 0)] } else { 0.0 });
    let corrected_mat = q.matmul(&diag).matmul(&q.transpose());
    let corrected = (c_full.as_matrix() - &corrected_mat).frobenius_norm();

    Ok(FrobeniusResiduals {
        shampoo,
        shampoo2_trace,
        corrected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, random_orthogonal, random_spd, rng_from_seed};
    use rand::Rng;

    #[test]
    fn full_update_ema_and_sum_cases() {
        // g = 0 in EMA mode scales C by beta2.
        let mut s = FullMatrixState::new(3, AccumMode::AdamEma, 0.5).unwrap();
        s.update(&Matrix::col_vec(&[1.0, 0.0, 0.0])).unwrap();
        let before = s.c().to_matrix();
        s.update(&Matrix::col_vec(&[0.0, 0.0, 0.0])).unwrap();
        assert!((s.c().as_matrix() - &before.scale(0.5)).frobenius_norm() < 1e-15);

        // A single gradient in sum mode gives the rank-1 outer product.
        let mut s = FullMatrixState::new(3, AccumMode::AdagradSum, 0.0).unwrap();
        let g = Matrix::col_vec(&[1.0, 2.0, -1.0]);
        s.update(&g).unwrap();
        assert!(
            (s.c().as_matrix() - &g.matmul(&g.transpose())).frobenius_norm() < 1e-15
        );
        let vals = sym_eig(s.c()).unwrap().values;
        assert!((vals[0] - 6.0).abs() < 1e-12); // ||g||^2
        assert!(vals[1].abs() < 1e-12 && vals[2].abs() < 1e-12);

        // Two orthonormal gradients in sum mode: eigenvalues (1, 1, 0).
        let mut s = FullMatrixState::new(3, AccumMode::AdagradSum, 0.0).unwrap();
        s.update(&Matrix::col_vec(&[1.0, 0.0, 0.0])).unwrap();
        s.update(&Matrix::col_vec(&[0.0, 1.0, 0.0])).unwrap();
        let vals = sym_eig(s.c()).unwrap().values;
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        assert!(vals[2].abs() < 1e-12);

        assert!(matches!(
            s.update(&Matrix::col_vec(&[1.0, 2.0])),
            Err(KronoptError::DimError(_))
        ));
    }

    #[test]
    fn optimal_correction_trivial_cases() {
        let c = random_spd(5, 61);
        // Exact eigenbasis: D* equals the eigenvalues, residual ~ 0.
        let e = sym_eig(&c).unwrap();
        let d = optimal_correction(&c, &e.basis).unwrap();
        for (a, b) in d.iter().zip(e.values.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
        // Q = I: D* is the diagonal of C.
        let d = optimal_correction(&c, &Matrix::identity(5)).unwrap();
        for (i, v) in d.iter().enumerate() {
            assert_eq!(*v, c.as_matrix()[(i, i)]);
        }
    }

    #[test]
    fn optimal_correction_beats_perturbed_diagonals() {
        let c = random_spd(8, 62);
        let q = random_orthogonal(8, 63);
        let d_star = optimal_correction(&c, &q).unwrap();
        let residual = |d: &[f64]| {
            let diag = Matrix::from_fn(8, 8, |i, j| if i == j { d[i] } else { 0.0 });
            (c.as_matrix() - &q.matmul(&diag).matmul(&q.transpose())).frobenius_norm()
        };
        let best = residual(&d_star);
        let mut rng = rng_from_seed(64);
        for _ in 0..100 {
            let perturbed: Vec<f64> = d_star
                .iter()
                .map(|&x| x + rng.random_range(-0.5..0.5))
                .collect();
            assert!(residual(&perturbed) + 1e-12 >= best);
        }
    }

    #[test]
    fn kron_preconditioner_identity_and_scalar_cases() {
        let i2 = SymMatrix::identity(2);
        let i3 = SymMatrix::identity(3);
        for (squared, trace_scaled) in [(false, false), (true, false)] {
            let c = shampoo_kron_preconditioner(&i2, &i3, squared, trace_scaled).unwrap();
            assert!(
                (c.as_matrix() - &Matrix::identity(6)).frobenius_norm() < 1e-12,
                "squared={squared}"
            );
        }
        // L = [4], R = [9], square root: sqrt(9*4) = 6.
        let l = SymMatrix::scaled_identity(1, 4.0);
        let r = SymMatrix::scaled_identity(1, 9.0);
        let c = shampoo_kron_preconditioner(&l, &r, false, false).unwrap();
        assert!((c.as_matrix()[(0, 0)] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rank1_gradient_makes_trace_scaled_kron_exact() {
        // G = a bᵀ: L = (bᵀb) a aᵀ, R = (aᵀa) b bᵀ, S = tr(L) = (aᵀa)(bᵀb),
        // and S⁻¹ (R ⊗ L) equals g gᵀ exactly.
        let a = normal_matrix(4, 1, 71);
        let b = normal_matrix(3, 1, 72);
        let g = a.matmul(&b.transpose());
        let l = SymMatrix::from_matrix(&g.matmul(&g.transpose())).unwrap();
        let r = SymMatrix::from_matrix(&g.transpose().matmul(&g)).unwrap();
        let c = shampoo_kron_preconditioner(&l, &r, true, true).unwrap();
        let gv = g.vec_col_major();
        let ggt = gv.matmul(&gv.transpose());
        assert!((c.as_matrix() - &ggt).frobenius_norm() <= 1e-10);

        // On that step the preconditioned direction matches full-matrix
        // Adam's (same matrix, same exponent).
        let probe = normal_matrix(12, 1, 73);
        let via_kron = preconditioned_direction(&c, &probe, 0.5, 1e-6).unwrap();
        let via_full =
            preconditioned_direction(&SymMatrix::from_matrix(&ggt).unwrap(), &probe, 0.5, 1e-6)
                .unwrap();
        assert!((&via_kron - &via_full).frobenius_norm() <= 1e-10 * via_full.frobenius_norm());
    }

    #[test]
    fn lemma1_bounds_cases() {
        let g = normal_matrix(3, 3, 81);
        // Constant scaling collapses the sandwich to a point.
        let (lo, hi) = lemma1_bounds(&[2.0; 9], &g, 0.5).unwrap();
        let expected = 2.0_f64.powf(-0.5) * g.frobenius_norm();
        assert!((lo - expected).abs() < 1e-12 && (hi - expected).abs() < 1e-12);

        let (lo, hi) = lemma1_bounds(&[0.5, 1.0, 4.0], &g, 0.5).unwrap();
        assert!(lo <= hi);

        assert!(matches!(
            lemma1_bounds(&[1.0, 0.0], &g, 0.5),
            Err(KronoptError::NonPositiveScale(_))
        ));
    }

    #[test]
    fn prop1_bounds_cases() {
        let g = normal_matrix(2, 1, 82);
        let (lo, hi) = prop1_extreme_eig_bounds(&SymMatrix::identity(2), &g, 0.5).unwrap();
        assert!((lo - g.frobenius_norm()).abs() < 1e-12);
        assert!((hi - g.frobenius_norm()).abs() < 1e-12);

        let c = SymMatrix::from_matrix(&Matrix::from_rows(2, 2, &[1.0, 0.0, 0.0, 4.0])).unwrap();
        let (lo, hi) = prop1_extreme_eig_bounds(&c, &g, 0.5).unwrap();
        assert!((lo - g.frobenius_norm() / 2.0).abs() < 1e-12);
        assert!((hi - g.frobenius_norm()).abs() < 1e-12);

        let singular =
            SymMatrix::from_matrix(&Matrix::from_rows(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(matches!(
            prop1_extreme_eig_bounds(&singular, &g, 0.5),
            Err(KronoptError::SingularFactor(_))
        ));
    }

    #[test]
    fn prop1_membership_for_idealized_adam_and_corrected_updates() {
        // Build a PD full-matrix statistic from a gradient stream, read D
        // off it exactly, and check the idealized update norms sit inside
        // the extreme-eigenvalue band.
        let (m, n) = (3, 2);
        let mn = m * n;
        let mut state = FullMatrixState::new(mn, AccumMode::AdamEma, 0.8).unwrap();
        for t in 0..40u64 {
            state.update(&normal_matrix(mn, 1, 9000 + t)).unwrap();
        }
        let g = normal_matrix(m, n, 9100);
        let p = 0.5;
        let (lo, hi) = prop1_extreme_eig_bounds(state.c(), &g, p).unwrap();

        // Idealized diagonal Adam: D from the diagonal of C.
        let d_adam: Vec<f64> = (0..mn).map(|i| state.c().as_matrix()[(i, i)]).collect();
        let d_mat = Matrix::unvec_col_major(&Matrix::col_vec(&d_adam), m, n);
        let u = crate::optimizers::scaled_adam_direction(&g, &d_mat, 0.0).unwrap();
        let norm = u.frobenius_norm();
        assert!(norm >= lo - 1e-12 && norm <= hi + 1e-12);

        // Idealized corrected update: D* in a random Kronecker basis.
        let q_l = random_orthogonal(m, 9200);
        let q_r = random_orthogonal(n, 9201);
        let d_star = optimal_correction(state.c(), &q_r.kron(&q_l)).unwrap();
        let d_mat = Matrix::unvec_col_major(&Matrix::col_vec(&d_star), m, n);
        let g_tilde = q_l.transpose().matmul(&g).matmul(&q_r);
        let u_tilde = crate::optimizers::scaled_adam_direction(&g_tilde, &d_mat, 0.0).unwrap();
        let u = q_l.matmul(&u_tilde).matmul(&q_r.transpose());
        let norm = u.frobenius_norm();
        assert!(norm >= lo - 1e-12 && norm <= hi + 1e-12);
    }

    #[test]
    fn shampoo_iid_statistical_band() {
        // Sampled iid case: with many iid standard-normal gradients the
        // Shampoo norm approaches (mn)^{-1/4} sigma^{-1} ||G||; sampling
        // noise keeps this a loose (5%) statistical check on a frozen seed.
        let (m, n) = (6, 5);
        let sigma = 1.0;
        let t = 4000;
        let mut l_acc = Matrix::zeros(m, m);
        let mut r_acc = Matrix::zeros(n, n);
        for s in 0..t {
            let g = normal_matrix(m, n, 40_000 + s);
            l_acc = &l_acc + &g.matmul(&g.transpose()).scale(1.0 / t as f64);
            r_acc = &r_acc + &g.transpose().matmul(&g).scale(1.0 / t as f64);
        }
        let l = sym_eig(&SymMatrix::from_matrix(&l_acc).unwrap()).unwrap();
        let r = sym_eig(&SymMatrix::from_matrix(&r_acc).unwrap()).unwrap();
        let g = normal_matrix(m, n, 50_000);
        let u = mat_power(&l, -0.25, 0.0)
            .unwrap()
            .as_matrix()
            .matmul(&g)
            .matmul(mat_power(&r, -0.25, 0.0).unwrap().as_matrix());
        let expected = ((m * n) as f64).powf(-0.25) / sigma * g.frobenius_norm();
        let rel = (u.frobenius_norm() - expected).abs() / expected;
        assert!(rel <= 0.05, "relative deviation {rel}");
    }

    #[test]
    fn residuals_trivial_and_ordering_cases() {
        // Diagonal C with Q = I and D = diag(C): corrected residual 0.
        let c_mat = Matrix::from_fn(6, 6, |i, j| if i == j { (i + 1) as f64 } else { 0.0 });
        let c = SymMatrix::from_matrix(&c_mat).unwrap();
        let d = Matrix::unvec_col_major(
            &Matrix::col_vec(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            3,
            2,
        );
        let res = frobenius_residuals(
            &c,
            &SymMatrix::identity(3),
            &SymMatrix::identity(2),
            &Matrix::identity(3),
            &Matrix::identity(2),
            &d,
        )
        .unwrap();
        assert!(res.corrected <= 1e-12);

        // Seeded stream: corrected residual never exceeds Shampoo's.
        let (m, n) = (3, 2);
        let mn = m * n;
        let mut c_state = FullMatrixState::new(mn, AccumMode::AdamEma, 0.9).unwrap();
        let mut l_state = Matrix::zeros(m, m);
        let mut r_state = Matrix::zeros(n, n);
        for t in 0..30u64 {
            let g = normal_matrix(m, n, 70_000 + t);
            c_state.update(&g.vec_col_major()).unwrap();
            l_state = &l_state.scale(0.9) + &g.matmul(&g.transpose()).scale(0.1);
            r_state = &r_state.scale(0.9) + &g.transpose().matmul(&g).scale(0.1);
        }
        let l = SymMatrix::from_matrix(&l_state).unwrap();
        let r = SymMatrix::from_matrix(&r_state).unwrap();
        let e_l = sym_eig(&l).unwrap();
        let e_r = sym_eig(&r).unwrap();
        let d_star = optimal_correction(c_state.c(), &e_r.basis.kron(&e_l.basis)).unwrap();
        let d = Matrix::unvec_col_major(&Matrix::col_vec(&d_star), m, n);
        let res = frobenius_residuals(c_state.c(), &l, &r, &e_l.basis, &e_r.basis, &d).unwrap();
        assert!(res.corrected <= res.shampoo + 1e-12);
    }
}
