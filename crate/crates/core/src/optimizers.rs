//! Update rules: diagonal Adam, Shampoo with and without Adam grafting,
//! trace-scaled squared-factor Shampoo, and eigenvalue-corrected Shampoo
//! with three correction modes (EMA in the rotated basis, basis-aware
//! transitions, and the oracle-optimal correction for desk-scale checks).
//!
//! All rules are written without momentum or bias correction; the only
//! extra is optional decoupled weight decay. ε semantics are deliberately
//! split: element-wise `√D + ε` for Adam-style denominators, per-eigenvalue
//! shift `(λ + ε)^q` for the Kronecker-factored matrix powers.

use serde::{Deserialize, Serialize};

use crate::error::{KronoptError, Result};
use crate::factor_state::{transition_matrix, FactorState, RefreshPolicy, RefreshReport};
use crate::linalg::{mat_power, EigPair, SymMatrix};
use crate::mat::Matrix;
use crate::oracle::{optimal_correction, FullMatrixState, AccumMode, MAX_ORACLE_DIM};

/// The update rule a block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Adam,
    Shampoo,
    ShampooGrafted,
    Shampoo2Trace,
    EShampoo,
}

/// How the eigenvalue correction of `EShampoo` is accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// `D ← β₃ D + (1−β₃) G̃^{⊙2}` in the current rotated coordinates.
    SoapEma,
    /// Same accumulation, but on basis changes `D` is first carried across
    /// coordinate systems with squared transition matrices.
    BasisAware,
    /// `D` read off a tracked full-matrix statistic each step (desk scale).
    OracleOptimal,
}

/// Step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Schedule {
    Constant { alpha: f64 },
    LinearWarmupCosine {
        peak_alpha: f64,
        warmup_steps: u64,
        total_steps: u64,
    },
}

impl Schedule {
    /// α at a 1-based step index.
    pub fn alpha_at(&self, step: u64) -> f64 {
        match *self {
            Schedule::Constant { alpha } => alpha,
            Schedule::LinearWarmupCosine {
                peak_alpha,
                warmup_steps,
                total_steps,
            } => {
                if warmup_steps > 0 && step <= warmup_steps {
                    peak_alpha * step as f64 / warmup_steps as f64
                } else {
                    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
                    let progress = ((step.saturating_sub(warmup_steps)) as f64 / span).min(1.0);
                    peak_alpha * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Constant { alpha } => {
                if !alpha.is_finite() || alpha < 0.0 {
                    return Err(KronoptError::ConfigError(format!(
                        "alpha must be finite and >= 0, got {alpha}"
                    )));
                }
            }
            Schedule::LinearWarmupCosine {
                peak_alpha,
                warmup_steps,
                total_steps,
            } => {
                if !peak_alpha.is_finite() || peak_alpha < 0.0 {
                    return Err(KronoptError::ConfigError(format!(
                        "peak_alpha must be finite and >= 0, got {peak_alpha}"
                    )));
                }
                if warmup_steps > total_steps {
                    return Err(KronoptError::ConfigError(format!(
                        "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Full optimizer configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub variant: Variant,
    #[serde(default = "default_correction_mode")]
    pub correction_mode: CorrectionMode,
    pub schedule: Schedule,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    /// Correction EMA decay; defaults to `beta2` when unset.
    #[serde(default)]
    pub beta3: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Preconditioner exponent; `0.5` reproduces the quarter-root update.
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub policy: RefreshPolicy,
    #[serde(default = "default_max_precond_dim")]
    pub max_preconditioner_dim: usize,
}

fn default_correction_mode() -> CorrectionMode {
    CorrectionMode::SoapEma
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-10
}

fn default_p() -> f64 {
    0.5
}

fn default_max_precond_dim() -> usize {
    64
}

impl OptimizerConfig {
    /// Sensible defaults around a variant and a constant step size.
    pub fn new(variant: Variant, alpha: f64, policy: RefreshPolicy) -> Self {
        Self {
            variant,
            correction_mode: default_correction_mode(),
            schedule: Schedule::Constant { alpha },
            beta2: default_beta2(),
            beta3: None,
            epsilon: default_epsilon(),
            p: default_p(),
            weight_decay: 0.0,
            policy,
            max_preconditioner_dim: default_max_precond_dim(),
        }
    }

    pub fn effective_beta3(&self) -> f64 {
        self.beta3.unwrap_or(self.beta2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(KronoptError::ConfigError(format!(
                "beta2 must lie in [0, 1), got {}",
                self.beta2
            )));
        }
        if let Some(b3) = self.beta3 {
            if !(0.0..1.0).contains(&b3) {
                return Err(KronoptError::ConfigError(format!(
                    "beta3 must lie in [0, 1), got {b3}"
                )));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(KronoptError::ConfigError(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(KronoptError::ConfigError(format!(
                "p must be finite and > 0, got {}",
                self.p
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(KronoptError::ConfigError(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.max_preconditioner_dim == 0 {
            return Err(KronoptError::ConfigError(
                "max_preconditioner_dim must be >= 1".into(),
            ));
        }
        self.schedule.validate()?;
        self.policy.validate()
    }
}

/// Which factor of a block a telemetry record refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Left,
    Right,
    Full,
}

impl FactorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FactorKind::Left => "left",
            FactorKind::Right => "right",
            FactorKind::Full => "full",
        }
    }
}

/// Per-factor slice of one step's telemetry.
#[derive(Debug, Clone)]
pub struct FactorStepInfo {
    pub kind: FactorKind,
    pub report: RefreshReport,
    pub eig_count: u64,
    pub qr_iter_count: u64,
}

/// What one optimizer step did, for telemetry.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Frobenius norm of the applied direction `U` (before the α scaling).
    pub update_norm: f64,
    /// `‖U_adam‖` when grafting, i.e. the norm the update was rescaled to.
    pub graft_norm: Option<f64>,
    /// Pre-rescale `‖U_shampoo‖` when grafting.
    pub shampoo_norm: Option<f64>,
    /// Shampoo produced a zero direction and grafting returned zero.
    pub zero_shampoo_update: bool,
    pub factors: Vec<FactorStepInfo>,
}

/// One trainable parameter (matrix or vector) plus its optimizer state.
///
/// Blocks with `m·n <= max_preconditioner_dim` hold one full-matrix factor
/// over `g gᵀ`; larger blocks hold the two Kronecker factors. The
/// `correction` matrix doubles as Adam's second moment, the grafting
/// accumulator, or the eigenvalue correction, depending on variant.
#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub weight: Matrix,
    left: Option<FactorState>,
    right: Option<FactorState>,
    full: Option<FactorState>,
    correction: Matrix,
    oracle_state: Option<FullMatrixState>,
    pub step_count: u64,
}

impl ParamBlock {
    pub fn new(weight: Matrix, cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, n) = weight.shape();
        let mn = m * n;
        let use_full = mn <= cfg.max_preconditioner_dim;
        let (left, right, full) = if use_full {
            (None, None, Some(FactorState::new(mn)))
        } else {
            (Some(FactorState::new(m)), Some(FactorState::new(n)), None)
        };
        let oracle_state = if cfg.variant == Variant::EShampoo
            && cfg.correction_mode == CorrectionMode::OracleOptimal
        {
            if mn > MAX_ORACLE_DIM {
                return Err(KronoptError::SizeGuard(format!(
                    "oracle-optimal correction needs m*n <= {MAX_ORACLE_DIM}, got {mn}"
                )));
            }
            Some(FullMatrixState::new(mn, AccumMode::AdamEma, cfg.beta2)?)
        } else {
            None
        };
        Ok(Self {
            correction: Matrix::zeros(m, n),
            weight,
            left,
            right,
            full,
            oracle_state,
            step_count: 0,
        })
    }

    pub fn uses_full_factor(&self) -> bool {
        self.full.is_some()
    }

    pub fn left(&self) -> Option<&FactorState> {
        self.left.as_ref()
    }

    pub fn right(&self) -> Option<&FactorState> {
        self.right.as_ref()
    }

    pub fn full(&self) -> Option<&FactorState> {
        self.full.as_ref()
    }

    pub fn left_mut(&mut self) -> Option<&mut FactorState> {
        self.left.as_mut()
    }

    pub fn right_mut(&mut self) -> Option<&mut FactorState> {
        self.right.as_mut()
    }

    pub fn full_mut(&mut self) -> Option<&mut FactorState> {
        self.full.as_mut()
    }

    pub fn correction(&self) -> &Matrix {
        &self.correction
    }

    pub fn set_correction(&mut self, d: Matrix) -> Result<()> {
        if d.shape() != self.weight.shape() {
            return Err(KronoptError::DimError(
                "correction shape must match the weight".into(),
            ));
        }
        if d.data().iter().any(|&x| x < 0.0) {
            return Err(KronoptError::NonPositiveScale(
                "correction entries must be nonnegative".into(),
            ));
        }
        self.correction = d;
        Ok(())
    }

    fn cached_pair(state: &FactorState) -> EigPair {
        EigPair {
            basis: state.basis().clone(),
            values: state.basis_eigenvalues().to_vec(),
        }
    }

    /// Feed one gradient into the factor statistics and the correction
    /// accumulator without refreshing any basis or moving the weight.
    ///
    /// This is the cold-start hook for ε = 0 studies: a couple of distinct
    /// gradients make the factor statistics strictly positive definite, so
    /// negative matrix powers are well defined from the first counted step.
    pub fn warm_start(&mut self, g: &Matrix, cfg: &OptimizerConfig) -> Result<()> {
        self.update_factor_stats(g, cfg.beta2)?;
        let (d_new, _) = adam_update(&self.correction, g, cfg.effective_beta3(), 1.0)?;
        self.correction = d_new;
        Ok(())
    }

    fn update_factor_stats(&mut self, g: &Matrix, beta2: f64) -> Result<()> {
        if let Some(left) = self.left.as_mut() {
            let outer = SymMatrix::from_matrix(&g.matmul(&g.transpose()))?;
            left.ema_update(&outer, beta2)?;
        }
        if let Some(right) = self.right.as_mut() {
            let outer = SymMatrix::from_matrix(&g.transpose().matmul(g))?;
            right.ema_update(&outer, beta2)?;
        }
        if let Some(full) = self.full.as_mut() {
            let gv = g.vec_col_major();
            let outer = SymMatrix::from_matrix(&gv.matmul(&gv.transpose()))?;
            full.ema_update(&outer, beta2)?;
        }
        Ok(())
    }

    /// Kronecker (or full-matrix) preconditioned direction from the cached,
    /// possibly stale eigenpairs. No implicit refresh.
    pub fn shampoo_update(&self, g: &Matrix, cfg: &OptimizerConfig) -> Result<Matrix> {
        if let Some(full) = &self.full {
            let pair = Self::cached_pair(full);
            let power = mat_power(&pair, -cfg.p, cfg.epsilon)?;
            let u_vec = power.as_matrix().matmul(&g.vec_col_major()).scale(-1.0);
            return Ok(Matrix::unvec_col_major(&u_vec, g.rows(), g.cols()));
        }
        let left = self.left.as_ref().expect("kron block has a left factor");
        let right = self.right.as_ref().expect("kron block has a right factor");
        let p_l = mat_power(&Self::cached_pair(left), -cfg.p / 2.0, cfg.epsilon)?;
        let p_r = mat_power(&Self::cached_pair(right), -cfg.p / 2.0, cfg.epsilon)?;
        Ok(p_l.as_matrix().matmul(g).matmul(p_r.as_matrix()).scale(-1.0))
    }

    /// Trace-scaled squared-factor update: `-S^p L^{-p} G R^{-p}` with
    /// `S = tr(L)`. Full-matrix blocks have a single statistic that already
    /// matches the full-matrix scale, so no trace factor applies there.
    pub fn shampoo2_trace_update(&self, g: &Matrix, cfg: &OptimizerConfig) -> Result<Matrix> {
        if let Some(full) = &self.full {
            let pair = Self::cached_pair(full);
            let power = mat_power(&pair, -cfg.p, cfg.epsilon)?;
            let u_vec = power.as_matrix().matmul(&g.vec_col_major()).scale(-1.0);
            return Ok(Matrix::unvec_col_major(&u_vec, g.rows(), g.cols()));
        }
        let left = self.left.as_ref().expect("kron block has a left factor");
        let right = self.right.as_ref().expect("kron block has a right factor");
        let s = left.stat().trace();
        debug_assert!(
            (s - right.stat().trace()).abs() <= 1e-8 * (1.0 + s.abs()),
            "tr(L) and tr(R) must agree (both track the EMA of ||G||_F^2)"
        );
        if s <= 0.0 {
            if g.frobenius_norm() == 0.0 {
                return Ok(Matrix::zeros(g.rows(), g.cols()));
            }
            return Err(KronoptError::ZeroTrace(
                "trace scaling with tr(L) = 0 and a nonzero gradient".into(),
            ));
        }
        let p_l = mat_power(&Self::cached_pair(left), -cfg.p, cfg.epsilon)?;
        let p_r = mat_power(&Self::cached_pair(right), -cfg.p, cfg.epsilon)?;
        Ok(p_l
            .as_matrix()
            .matmul(g)
            .matmul(p_r.as_matrix())
            .scale(-s.powf(cfg.p)))
    }

    /// Eigenvalue-corrected update. Rotates the gradient into the cached
    /// bases, maintains the correction per `cfg.correction_mode`, divides
    /// element-wise, and rotates back. `transitions` carries `Q_newᵀ Q_old`
    /// for factors whose basis changed this step (basis-aware mode only).
    pub fn eshampoo_update(
        &mut self,
        g: &Matrix,
        cfg: &OptimizerConfig,
        transitions: &BasisTransitions,
    ) -> Result<Matrix> {
        let beta3 = cfg.effective_beta3();
        if let Some(full) = &self.full {
            let q = full.basis();
            let g_tilde = q.transpose().matmul(&g.vec_col_major());
            let mut d_vec = self.correction.vec_col_major();
            if cfg.correction_mode == CorrectionMode::BasisAware {
                if let Some(r) = &transitions.full {
                    d_vec = r.map(|x| x * x).matmul(&d_vec);
                }
            }
            if cfg.correction_mode != CorrectionMode::OracleOptimal {
                d_vec = d_vec
                    .scale(beta3)
                    .zip_map(&g_tilde, |d, gt| d + (1.0 - beta3) * gt * gt);
            }
            let u_tilde = scaled_adam_direction(&g_tilde, &d_vec, cfg.epsilon)?;
            self.correction = Matrix::unvec_col_major(&d_vec, g.rows(), g.cols());
            let u_vec = q.matmul(&u_tilde);
            return Ok(Matrix::unvec_col_major(&u_vec, g.rows(), g.cols()));
        }

        let q_l = self.left.as_ref().expect("kron block").basis().clone();
        let q_r = self.right.as_ref().expect("kron block").basis().clone();
        let g_tilde = q_l.transpose().matmul(g).matmul(&q_r);
        let mut d = self.correction.clone();
        if cfg.correction_mode == CorrectionMode::BasisAware {
            // Carry the correction across the basis change:
            // D ← (R_L)^{⊙2} D ((R_R)^{⊙2})ᵀ, the per-factor form of the
            // squared-transition recursion on vec(D).
            if let Some(r_l) = &transitions.left {
                d = r_l.map(|x| x * x).matmul(&d);
            }
            if let Some(r_r) = &transitions.right {
                d = d.matmul(&r_r.map(|x| x * x).transpose());
            }
        }
        if cfg.correction_mode != CorrectionMode::OracleOptimal {
            d = d
                .scale(beta3)
                .zip_map(&g_tilde, |dv, gt| dv + (1.0 - beta3) * gt * gt);
        }
        let u_tilde = scaled_adam_direction(&g_tilde, &d, cfg.epsilon)?;
        self.correction = d;
        Ok(q_l.matmul(&u_tilde).matmul(&q_r.transpose()))
    }

    /// One full optimizer step: factor EMA updates, policy-driven basis
    /// refresh, variant update, optional decoupled weight decay, and the
    /// weight move `W ← W + α·U`.
    pub fn step(
        &mut self,
        g: &Matrix,
        cfg: &OptimizerConfig,
        step_index: u64,
    ) -> Result<StepOutcome> {
        if g.shape() != self.weight.shape() {
            return Err(KronoptError::DimError(format!(
                "gradient is {:?}, weight is {:?}",
                g.shape(),
                self.weight.shape()
            )));
        }
        if !g.is_finite() {
            return Err(KronoptError::InvalidMatrix(
                "gradient contains non-finite entries".into(),
            ));
        }

        self.update_factor_stats(g, cfg.beta2)?;

        let track_transitions =
            cfg.variant == Variant::EShampoo && cfg.correction_mode == CorrectionMode::BasisAware;
        let old_bases = if track_transitions {
            Some((
                self.left.as_ref().map(|f| f.basis().clone()),
                self.right.as_ref().map(|f| f.basis().clone()),
                self.full.as_ref().map(|f| f.basis().clone()),
            ))
        } else {
            None
        };

        let mut factors = Vec::new();
        let mut refresh =
            |state: &mut FactorState, kind: FactorKind| -> Result<FactorStepInfo> {
                let report = state.maybe_refresh(&cfg.policy, step_index)?;
                Ok(FactorStepInfo {
                    kind,
                    report,
                    eig_count: state.eig_count(),
                    qr_iter_count: state.qr_iter_count(),
                })
            };
        if let Some(left) = self.left.as_mut() {
            factors.push(refresh(left, FactorKind::Left)?);
        }
        if let Some(right) = self.right.as_mut() {
            factors.push(refresh(right, FactorKind::Right)?);
        }
        if let Some(full) = self.full.as_mut() {
            factors.push(refresh(full, FactorKind::Full)?);
        }

        let transitions = match old_bases {
            Some((old_l, old_r, old_f)) => BasisTransitions {
                left: changed_transition(self.left.as_ref(), old_l)?,
                right: changed_transition(self.right.as_ref(), old_r)?,
                full: changed_transition(self.full.as_ref(), old_f)?,
            },
            None => BasisTransitions::default(),
        };

        if let Some(oracle) = self.oracle_state.as_mut() {
            // Oracle-optimal correction: track the full-matrix EMA and read
            // the optimal diagonal in the current (post-refresh) basis.
            oracle.update(&g.vec_col_major())?;
            let q = match (&self.left, &self.right, &self.full) {
                (Some(l), Some(r), None) => r.basis().kron(l.basis()),
                (None, None, Some(f)) => f.basis().clone(),
                _ => unreachable!("block holds either kron or full factors"),
            };
            let d_star = optimal_correction(oracle.c(), &q)?;
            let d_vec = Matrix::col_vec(&d_star).map(|x| x.max(0.0));
            self.correction =
                Matrix::unvec_col_major(&d_vec, self.weight.rows(), self.weight.cols());
        }

        let mut graft_norm = None;
        let mut shampoo_norm = None;
        let mut zero_shampoo_update = false;
        let update = match cfg.variant {
            Variant::Adam => {
                let (d_new, u) = adam_update(&self.correction, g, cfg.effective_beta3(), cfg.epsilon)?;
                self.correction = d_new;
                u
            }
            Variant::Shampoo => self.shampoo_update(g, cfg)?,
            Variant::Shampoo2Trace => self.shampoo2_trace_update(g, cfg)?,
            Variant::ShampooGrafted => {
                // The grafting accumulator advances every step, even when the
                // Shampoo factors are stale.
                let (d_new, u_adam) =
                    adam_update(&self.correction, g, cfg.effective_beta3(), cfg.epsilon)?;
                self.correction = d_new;
                let u_sh = self.shampoo_update(g, cfg)?;
                graft_norm = Some(u_adam.frobenius_norm());
                shampoo_norm = Some(u_sh.frobenius_norm());
                let (u, zero) = graft_rescale(&u_sh, &u_adam);
                zero_shampoo_update = zero;
                u
            }
            Variant::EShampoo => self.eshampoo_update(g, cfg, &transitions)?,
        };

        if !update.is_finite() {
            return Err(KronoptError::NonFiniteUpdate { step: step_index });
        }

        #[cfg(debug_assertions)]
        self.debug_assert_lemma1(cfg, g, &update, shampoo_norm);

        let alpha = cfg.schedule.alpha_at(step_index);
        if cfg.weight_decay > 0.0 {
            self.weight = self.weight.scale(1.0 - alpha * cfg.weight_decay);
        }
        self.weight = &self.weight + &update.scale(alpha);
        self.step_count += 1;

        Ok(StepOutcome {
            update_norm: update.frobenius_norm(),
            graft_norm,
            shampoo_norm,
            zero_shampoo_update,
            factors,
        })
    }

    /// The entries of the effective scaling matrix `D` and the exponent `q`
    /// such that the applied direction is `Q_L (D^{⊙-q} ⊙ G̃) Q_Rᵀ` — the
    /// quantities the Kronecker-update norm sandwich is stated in. For the
    /// grafted variant this describes the pre-rescale Shampoo direction.
    /// Returns `None` when a variant/step has no such representation.
    pub fn effective_scaling(&self, cfg: &OptimizerConfig) -> Option<(Vec<f64>, f64)> {
        match cfg.variant {
            Variant::Adam | Variant::EShampoo => {
                Some((self.correction.data().to_vec(), 0.5))
            }
            Variant::Shampoo | Variant::ShampooGrafted => {
                if let Some(full) = &self.full {
                    let d = full
                        .basis_eigenvalues()
                        .iter()
                        .map(|&v| v + cfg.epsilon)
                        .collect();
                    Some((d, cfg.p))
                } else {
                    let l = self.left.as_ref()?.basis_eigenvalues();
                    let r = self.right.as_ref()?.basis_eigenvalues();
                    let mut d = Vec::with_capacity(l.len() * r.len());
                    for &lv in l {
                        for &rv in r {
                            d.push((lv + cfg.epsilon) * (rv + cfg.epsilon));
                        }
                    }
                    Some((d, cfg.p / 2.0))
                }
            }
            Variant::Shampoo2Trace => {
                if let Some(full) = &self.full {
                    let d = full
                        .basis_eigenvalues()
                        .iter()
                        .map(|&v| v + cfg.epsilon)
                        .collect();
                    Some((d, cfg.p))
                } else {
                    let s = self.left.as_ref()?.stat().trace();
                    if s <= 0.0 {
                        return None;
                    }
                    let l = self.left.as_ref()?.basis_eigenvalues();
                    let r = self.right.as_ref()?.basis_eigenvalues();
                    let mut d = Vec::with_capacity(l.len() * r.len());
                    for &lv in l {
                        for &rv in r {
                            d.push((lv + cfg.epsilon) * (rv + cfg.epsilon) / s);
                        }
                    }
                    Some((d, cfg.p))
                }
            }
        }
    }

    #[cfg(debug_assertions)]
    fn debug_assert_lemma1(
        &self,
        cfg: &OptimizerConfig,
        g: &Matrix,
        update: &Matrix,
        shampoo_norm: Option<f64>,
    ) {
        if cfg.epsilon != 0.0 {
            return;
        }
        let Some((d, q)) = self.effective_scaling(cfg) else {
            return;
        };
        if d.iter().any(|&x| x <= 0.0) {
            return;
        }
        let max_d = d.iter().cloned().fold(f64::MIN, f64::max);
        let min_d = d.iter().cloned().fold(f64::MAX, f64::min);
        let g_norm = g.frobenius_norm();
        let lower = max_d.powf(-q) * g_norm;
        let upper = min_d.powf(-q) * g_norm;
        let norm = shampoo_norm.unwrap_or_else(|| update.frobenius_norm());
        let slack = 1e-9 * (1.0 + upper);
        debug_assert!(
            norm >= lower - slack && norm <= upper + slack,
            "update norm {norm} outside [{lower}, {upper}]"
        );
    }
}

/// Transition for a factor whose basis changed this step (bitwise compare).
fn changed_transition(
    state: Option<&FactorState>,
    old: Option<Matrix>,
) -> Result<Option<Matrix>> {
    match (state, old) {
        (Some(s), Some(old)) if s.basis() != &old => {
            Ok(Some(transition_matrix(s.basis(), &old)?))
        }
        _ => Ok(None),
    }
}

/// Per-factor basis transitions of one step, for the basis-aware correction.
#[derive(Debug, Default)]
pub struct BasisTransitions {
    pub left: Option<Matrix>,
    pub right: Option<Matrix>,
    pub full: Option<Matrix>,
}

/// `-G / (√D + ε)`, element-wise. The shared denominator rule of Adam and
/// the eigenvalue-corrected update.
pub fn scaled_adam_direction(g: &Matrix, d: &Matrix, epsilon: f64) -> Result<Matrix> {
    if g.shape() != d.shape() {
        return Err(KronoptError::DimError(
            "gradient and scaling must have the same shape".into(),
        ));
    }
    let mut out = Matrix::zeros(g.rows(), g.cols());
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let denom = d[(i, j)].max(0.0).sqrt() + epsilon;
            let num = g[(i, j)];
            if denom == 0.0 {
                if num != 0.0 {
                    return Err(KronoptError::DivergentScale(format!(
                        "zero scale at ({i}, {j}) with nonzero gradient"
                    )));
                }
                // 0/0: no signal, no movement.
            } else {
                out[(i, j)] = -num / denom;
            }
        }
    }
    Ok(out)
}

/// Adam second-moment update and direction:
/// `D' = β₃ D + (1−β₃) G^{⊙2}`, `U = -G / (√D' + ε)`. No bias correction.
pub fn adam_update(d: &Matrix, g: &Matrix, beta3: f64, epsilon: f64) -> Result<(Matrix, Matrix)> {
    if d.shape() != g.shape() {
        return Err(KronoptError::DimError(
            "Adam accumulator and gradient must have the same shape".into(),
        ));
    }
    let d_new = d
        .scale(beta3)
        .zip_map(g, |dv, gv| dv + (1.0 - beta3) * gv * gv);
    let u = scaled_adam_direction(g, &d_new, epsilon)?;
    Ok((d_new, u))
}

/// Rescale the Shampoo direction to carry the grafting norm:
/// `U = (‖U_graft‖ / ‖U_shampoo‖) · U_shampoo`. A zero Shampoo direction
/// yields a zero update and a raised flag (surfaced in telemetry).
pub fn graft_rescale(u_shampoo: &Matrix, u_graft: &Matrix) -> (Matrix, bool) {
    let sh_norm = u_shampoo.frobenius_norm();
    if sh_norm == 0.0 {
        return (Matrix::zeros(u_shampoo.rows(), u_shampoo.cols()), true);
    }
    let scale = u_graft.frobenius_norm() / sh_norm;
    (u_shampoo.scale(scale), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_state::RefreshMode;
    use crate::rng::{normal_matrix, random_orthogonal, random_spd};

    fn base_cfg(variant: Variant) -> OptimizerConfig {
        OptimizerConfig::new(
            variant,
            0.1,
            RefreshPolicy::new(RefreshMode::FixedEigh, 0.1, 1, 20).unwrap(),
        )
    }

    #[test]
    fn schedule_warmup_cosine_closed_form() {
        let s = Schedule::LinearWarmupCosine {
            peak_alpha: 0.4,
            warmup_steps: 10,
            total_steps: 100,
        };
        for step in 1..=100u64 {
            let expected = if step <= 10 {
                0.4 * step as f64 / 10.0
            } else {
                let progress = (step - 10) as f64 / 90.0;
                0.4 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            };
            assert!((s.alpha_at(step) - expected).abs() <= 1e-12);
        }
        assert!(s.alpha_at(100) < 1e-12);
    }

    #[test]
    fn adam_update_examples() {
        // G = 0 -> U = 0.
        let d = Matrix::zeros(2, 2);
        let (_, u) = adam_update(&d, &Matrix::zeros(2, 2), 0.9, 0.0).unwrap();
        assert_eq!(u.frobenius_norm(), 0.0);

        // beta3 = 0, eps = 0, nonzero G -> U = -sign(G).
        let g = Matrix::from_rows(2, 2, &[3.0, -2.0, 0.5, -0.25]);
        let (_, u) = adam_update(&Matrix::zeros(2, 2), &g, 0.0, 0.0).unwrap();
        for (uv, gv) in u.data().iter().zip(g.data()) {
            assert!((uv + gv.signum()).abs() < 1e-14);
        }

        // Scalar hand case: G=3, D=0, beta3=0.5 -> D'=4.5, U=-3/sqrt(4.5).
        let (d_new, u) = adam_update(
            &Matrix::zeros(1, 1),
            &Matrix::from_rows(1, 1, &[3.0]),
            0.5,
            0.0,
        )
        .unwrap();
        assert!((d_new[(0, 0)] - 4.5).abs() < 1e-14);
        assert!((u[(0, 0)] + 3.0 / 4.5_f64.sqrt()).abs() < 1e-12);
        assert!((u[(0, 0)] + 1.414_213_562_373_095).abs() < 1e-12);

        // eps = 0 with a dead accumulator entry under a live gradient.
        let d = Matrix::zeros(1, 2);
        let g = Matrix::from_rows(1, 2, &[1.0, 0.0]);
        let (d_new, _) = adam_update(&d, &g, 0.0, 0.0).unwrap();
        assert_eq!(d_new[(0, 1)], 0.0);
        let res = scaled_adam_direction(&Matrix::from_rows(1, 2, &[0.0, 2.0]), &d_new, 0.0);
        assert!(matches!(res, Err(KronoptError::DivergentScale(_))));
    }

    #[test]
    fn graft_rescale_examples() {
        let x = normal_matrix(3, 2, 4);
        // Identical inputs are returned unchanged.
        let (u, zero) = graft_rescale(&x, &x);
        assert!(!zero);
        assert!((&u - &x).frobenius_norm() < 1e-12);

        // Unit graft norm normalizes the direction.
        let unit = x.scale(1.0 / x.frobenius_norm());
        let (u, _) = graft_rescale(&x.scale(2.0), &unit);
        assert!((u.frobenius_norm() - 1.0).abs() <= 1e-12);
        assert!((&u - &x.scale(1.0 / x.frobenius_norm())).frobenius_norm() < 1e-12);

        // Seeded pair: norms match exactly.
        let a = normal_matrix(4, 3, 11);
        let b = normal_matrix(4, 3, 12);
        let (u, _) = graft_rescale(&a, &b);
        assert!((u.frobenius_norm() - b.frobenius_norm()).abs() <= 1e-12);

        // Zero Shampoo direction signals and returns zero.
        let (u, zero) = graft_rescale(&Matrix::zeros(2, 2), &b.scale(0.0));
        assert!(zero);
        assert_eq!(u.frobenius_norm(), 0.0);
    }

    /// Inject exact factor statistics and refresh once so the cached
    /// eigenpairs are fresh.
    fn block_with_stats(
        weight: Matrix,
        cfg: &OptimizerConfig,
        l: SymMatrix,
        r: SymMatrix,
    ) -> ParamBlock {
        let mut block = ParamBlock::new(weight, cfg).unwrap();
        block.left_mut().unwrap().inject_stat(l).unwrap();
        block.right_mut().unwrap().inject_stat(r).unwrap();
        let policy = RefreshPolicy::new(RefreshMode::FixedEigh, 0.1, 1, 10).unwrap();
        block.left_mut().unwrap().maybe_refresh(&policy, 1).unwrap();
        block.right_mut().unwrap().maybe_refresh(&policy, 1).unwrap();
        block
    }

    fn kron_cfg(variant: Variant) -> OptimizerConfig {
        let mut cfg = base_cfg(variant);
        cfg.max_preconditioner_dim = 1; // force the Kronecker path
        cfg.epsilon = 0.0;
        cfg
    }

    #[test]
    fn shampoo_identity_factors_negate_gradient() {
        let cfg = kron_cfg(Variant::Shampoo);
        let g = normal_matrix(3, 2, 8);
        let block = block_with_stats(
            Matrix::zeros(3, 2),
            &cfg,
            SymMatrix::identity(3),
            SymMatrix::identity(2),
        );
        let u = block.shampoo_update(&g, &cfg).unwrap();
        assert!((&u - &g.scale(-1.0)).frobenius_norm() <= 1e-12);
    }

    #[test]
    fn shampoo_scaled_identity_quarter_roots() {
        // L = 16 I, R = 81 I, p = 1/2: U = -G / (16^{1/4} 81^{1/4}) = -G/6.
        let cfg = kron_cfg(Variant::Shampoo);
        let g = normal_matrix(3, 2, 9);
        let block = block_with_stats(
            Matrix::zeros(3, 2),
            &cfg,
            SymMatrix::scaled_identity(3, 16.0),
            SymMatrix::scaled_identity(2, 81.0),
        );
        let u = block.shampoo_update(&g, &cfg).unwrap();
        assert!((&u - &g.scale(-1.0 / 6.0)).frobenius_norm() <= 1e-12);
    }

    #[test]
    fn shampoo_iid_dimension_scaling() {
        // Exact iid statistics L = n sigma^2 I, R = m sigma^2 I give
        // ||U|| = (mn)^{-1/4} sigma^{-1} ||G||.
        let (m, n) = (5, 4);
        let sigma = 0.7;
        let cfg = kron_cfg(Variant::Shampoo);
        let g = normal_matrix(m, n, 10);
        let block = block_with_stats(
            Matrix::zeros(m, n),
            &cfg,
            SymMatrix::scaled_identity(m, n as f64 * sigma * sigma),
            SymMatrix::scaled_identity(n, m as f64 * sigma * sigma),
        );
        let u = block.shampoo_update(&g, &cfg).unwrap();
        let expected = ((m * n) as f64).powf(-0.25) / sigma * g.frobenius_norm();
        assert!((u.frobenius_norm() - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn shampoo2_trace_hand_case() {
        // L = R = I_m injected, tr(L) = m: U = -sqrt(m) * (-G) direction,
        // i.e. U = -sqrt(m) G at p = 1/2, eps = 0.
        let m = 3;
        let cfg = kron_cfg(Variant::Shampoo2Trace);
        let g = normal_matrix(m, m, 13);
        let block = block_with_stats(
            Matrix::zeros(m, m),
            &cfg,
            SymMatrix::identity(m),
            SymMatrix::identity(m),
        );
        let u = block.shampoo2_trace_update(&g, &cfg).unwrap();
        assert!((&u - &g.scale(-(m as f64).sqrt())).frobenius_norm() <= 1e-12);
    }

    #[test]
    fn shampoo2_trace_zero_cases() {
        let cfg = kron_cfg(Variant::Shampoo2Trace);
        let block = ParamBlock::new(Matrix::zeros(2, 2), &cfg).unwrap();
        // G = 0 with zero state: U = 0, not an error.
        let u = block
            .shampoo2_trace_update(&Matrix::zeros(2, 2), &cfg)
            .unwrap();
        assert_eq!(u.frobenius_norm(), 0.0);
        // Nonzero gradient against a zero trace errors.
        let res = block.shampoo2_trace_update(&Matrix::from_rows(2, 2, &[1.0; 4]), &cfg);
        assert!(matches!(res, Err(KronoptError::ZeroTrace(_))));
    }

    #[test]
    fn eshampoo_identity_bases_reduce_to_adam() {
        let mut cfg = kron_cfg(Variant::EShampoo);
        cfg.beta3 = Some(0.9);
        cfg.epsilon = 1e-8;
        for seed in 0..50u64 {
            let g = normal_matrix(3, 4, 4000 + seed);
            let d0 = normal_matrix(3, 4, 5000 + seed).map(|x| x * x);
            // Fresh block: bases are identity until the first refresh.
            let mut block = ParamBlock::new(Matrix::zeros(3, 4), &cfg).unwrap();
            block.set_correction(d0.clone()).unwrap();
            let u_es = block
                .eshampoo_update(&g, &cfg, &BasisTransitions::default())
                .unwrap();
            let (d_adam, u_adam) = adam_update(&d0, &g, 0.9, 1e-8).unwrap();
            assert!((&u_es - &u_adam).frobenius_norm() <= 1e-12);
            assert!((block.correction() - &d_adam).frobenius_norm() <= 1e-12);
        }
    }

    #[test]
    fn eshampoo_sign_gradient_norm_with_beta3_zero() {
        // beta3 = 0, eps = 0: every entry of G_tilde/|G_tilde| is ±1, so
        // ||U|| = sqrt(mn) for any orthogonal bases.
        let (m, n) = (4, 3);
        let mut cfg = kron_cfg(Variant::EShampoo);
        cfg.beta3 = Some(0.0);
        let g = normal_matrix(m, n, 21);
        let mut block = block_with_stats(
            Matrix::zeros(m, n),
            &cfg,
            random_spd(m, 22),
            random_spd(n, 23),
        );
        let u = block
            .eshampoo_update(&g, &cfg, &BasisTransitions::default())
            .unwrap();
        assert!((u.frobenius_norm() - ((m * n) as f64).sqrt()).abs() <= 1e-9);
    }

    #[test]
    fn basis_aware_identity_transition_matches_soap() {
        let mut soap_cfg = kron_cfg(Variant::EShampoo);
        soap_cfg.beta3 = Some(0.8);
        let mut aware_cfg = soap_cfg.clone();
        aware_cfg.correction_mode = CorrectionMode::BasisAware;

        let g = normal_matrix(3, 3, 31);
        let d0 = normal_matrix(3, 3, 32).map(|x| x * x);
        let make = || {
            let mut b = block_with_stats(
                Matrix::zeros(3, 3),
                &soap_cfg,
                random_spd(3, 33),
                random_spd(3, 34),
            );
            b.set_correction(d0.clone()).unwrap();
            b
        };
        // Identity transitions (no basis change) leave the two modes equal.
        let trans = BasisTransitions {
            left: Some(Matrix::identity(3)),
            right: Some(Matrix::identity(3)),
            full: None,
        };
        let mut a = make();
        let mut b = make();
        let u_soap = a.eshampoo_update(&g, &soap_cfg, &BasisTransitions::default()).unwrap();
        let u_aware = b.eshampoo_update(&g, &aware_cfg, &trans).unwrap();
        assert!((&u_soap - &u_aware).frobenius_norm() <= 1e-13);
        assert!((a.correction() - b.correction()).frobenius_norm() <= 1e-13);
    }

    #[test]
    fn basis_aware_transition_conserves_mass() {
        // Squared orthogonal matrices are doubly stochastic, so the total
        // correction mass is preserved by the transition map.
        let d = normal_matrix(4, 3, 41).map(|x| x * x);
        let r_l = random_orthogonal(4, 42);
        let r_r = random_orthogonal(3, 43);
        let moved = r_l
            .map(|x| x * x)
            .matmul(&d)
            .matmul(&r_r.map(|x| x * x).transpose());
        let sum = |m: &Matrix| m.data().iter().sum::<f64>();
        assert!((sum(&moved) - sum(&d)).abs() <= 1e-10 * (1.0 + sum(&d)));
    }

    #[test]
    fn squared_kron_identity_underpins_matrix_form() {
        // (R_R ⊗ R_L)^{⊙2} == (R_R)^{⊙2} ⊗ (R_L)^{⊙2}, which is what makes
        // the per-factor transition form exact for the vectorized recursion.
        let r_l = random_orthogonal(3, 51);
        let r_r = random_orthogonal(2, 52);
        let lhs = r_r.kron(&r_l).map(|x| x * x);
        let rhs = r_r.map(|x| x * x).kron(&r_l.map(|x| x * x));
        assert!((&lhs - &rhs).frobenius_norm() <= 1e-13);

        // And the matrix form matches the vectorized recursion.
        let d = normal_matrix(3, 2, 53).map(|x| x * x);
        let via_vec = lhs.matmul(&d.vec_col_major());
        let via_mat = r_l
            .map(|x| x * x)
            .matmul(&d)
            .matmul(&r_r.map(|x| x * x).transpose())
            .vec_col_major();
        assert!((&via_vec - &via_mat).frobenius_norm() <= 1e-13);
    }

    #[test]
    fn update_norm_independent_of_outer_bases() {
        // Holding the rotated gradient and the scaling fixed, any orthogonal
        // pair wrapped around the scaled matrix leaves the norm unchanged.
        let scaled = normal_matrix(4, 3, 61);
        let base_norm = scaled.frobenius_norm();
        for seed in 0..20u64 {
            let q_l = random_orthogonal(4, 700 + seed);
            let q_r = random_orthogonal(3, 800 + seed);
            let u = q_l.matmul(&scaled).matmul(&q_r.transpose());
            assert!((u.frobenius_norm() - base_norm).abs() <= 1e-12 * (1.0 + base_norm));
        }
    }

    #[test]
    fn step_alpha_zero_moves_nothing_but_state_advances() {
        let mut cfg = base_cfg(Variant::Adam);
        cfg.schedule = Schedule::Constant { alpha: 0.0 };
        let mut block = ParamBlock::new(normal_matrix(2, 2, 71), &cfg).unwrap();
        let w0 = block.weight.clone();
        let g = normal_matrix(2, 2, 72);
        block.step(&g, &cfg, 1).unwrap();
        assert_eq!(block.weight, w0);
        assert_eq!(block.step_count, 1);
        assert!(block.correction().frobenius_norm() > 0.0);
    }

    #[test]
    fn step_adam_scalar_matches_hand_arithmetic() {
        let mut cfg = base_cfg(Variant::Adam);
        cfg.beta3 = Some(0.5);
        cfg.epsilon = 0.0;
        cfg.schedule = Schedule::Constant { alpha: 0.1 };
        let mut block = ParamBlock::new(Matrix::from_rows(1, 1, &[1.0]), &cfg).unwrap();
        let g = Matrix::from_rows(1, 1, &[3.0]);
        block.step(&g, &cfg, 1).unwrap();
        // U = -3/sqrt(4.5); W = 1 + 0.1 U.
        let expected = 1.0 - 0.1 * 3.0 / 4.5_f64.sqrt();
        assert!((block.weight[(0, 0)] - expected).abs() <= 1e-14);
    }

    #[test]
    fn grafted_step_applies_adam_norm() {
        let mut cfg = kron_cfg(Variant::ShampooGrafted);
        cfg.epsilon = 1e-10;
        cfg.schedule = Schedule::Constant { alpha: 0.05 };
        let mut block = ParamBlock::new(normal_matrix(4, 3, 81), &cfg).unwrap();
        for step in 1..=20u64 {
            let g = normal_matrix(4, 3, 8100 + step);
            let before = block.weight.clone();
            let outcome = block.step(&g, &cfg, step).unwrap();
            let moved = (&block.weight - &before).frobenius_norm();
            let expected = 0.05 * outcome.graft_norm.unwrap();
            assert!(
                (moved - expected).abs() <= 1e-12 * (1.0 + expected),
                "step {step}: moved {moved}, expected {expected}"
            );
        }
    }

    #[test]
    fn non_finite_gradient_and_update_are_rejected() {
        let cfg = base_cfg(Variant::Adam);
        let mut block = ParamBlock::new(Matrix::zeros(2, 2), &cfg).unwrap();
        let mut g = Matrix::zeros(2, 2);
        g[(0, 0)] = f64::NAN;
        assert!(matches!(
            block.step(&g, &cfg, 1),
            Err(KronoptError::InvalidMatrix(_))
        ));
    }

    #[test]
    fn full_block_used_when_small_enough() {
        let cfg = base_cfg(Variant::Adam); // max dim 64
        let block = ParamBlock::new(Matrix::zeros(4, 3), &cfg).unwrap();
        assert!(block.uses_full_factor());
        let mut cfg2 = cfg;
        cfg2.max_preconditioner_dim = 11;
        let block = ParamBlock::new(Matrix::zeros(4, 3), &cfg2).unwrap();
        assert!(!block.uses_full_factor());
    }

    #[test]
    fn oracle_optimal_tracks_optimal_correction() {
        let mut cfg = base_cfg(Variant::EShampoo);
        cfg.correction_mode = CorrectionMode::OracleOptimal;
        cfg.beta2 = 0.9;
        cfg.epsilon = 1e-8;
        let mut block = ParamBlock::new(normal_matrix(2, 2, 91), &cfg).unwrap();
        let mut c_ref = crate::oracle::FullMatrixState::new(4, AccumMode::AdamEma, 0.9).unwrap();
        for step in 1..=5u64 {
            let g = normal_matrix(2, 2, 9100 + step);
            block.step(&g, &cfg, step).unwrap();
            c_ref.update(&g.vec_col_major()).unwrap();
            let q = block.full().unwrap().basis().clone();
            let d_star = optimal_correction(c_ref.c(), &q).unwrap();
            let expect =
                Matrix::unvec_col_major(&Matrix::col_vec(&d_star).map(|x| x.max(0.0)), 2, 2);
            assert!((block.correction() - &expect).frobenius_norm() <= 1e-12);
        }
    }
}
