//! Per-factor optimizer state: the EMA second-moment statistic, the cached
//! orthogonal eigenbasis, and the policy-driven decision to skip, QR-refine,
//! or fully recompute that basis.
//!
//! A `FactorState` is owned by exactly one parameter block; distinct factors
//! may be refreshed concurrently, but a single factor requires exclusive
//! mutable access.

use serde::{Deserialize, Serialize};

use crate::error::{KronoptError, Result};
use crate::linalg::{offdiag_ratio, sym_eig, warm_qr_refine, SymMatrix};
use crate::mat::Matrix;

/// How the cached eigenbasis is kept in sync with the moving statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshMode {
    /// Full eigendecomposition every `check_every` steps, unconditionally.
    FixedEigh,
    /// Every `check_every` steps, evaluate the off-diagonal criterion and
    /// only recompute when it exceeds `tau`.
    AdaptiveEigh,
    /// Like `AdaptiveEigh`, but refine with the warm-started QR iteration;
    /// falls back to a full eigendecomposition on non-convergence.
    AdaptiveQr,
    /// Compute the basis once at the first step, then never again.
    Frozen,
}

/// Refresh policy: mode plus the criterion tolerance `tau`, the check
/// frequency `check_every`, and the QR iteration budget `max_qr_iters`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefreshPolicy {
    pub mode: RefreshMode,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_check_every")]
    pub check_every: u64,
    #[serde(default = "default_max_qr_iters")]
    pub max_qr_iters: u32,
}

fn default_tau() -> f64 {
    0.1
}

fn default_check_every() -> u64 {
    1
}

fn default_max_qr_iters() -> u32 {
    10
}

impl RefreshPolicy {
    pub fn new(mode: RefreshMode, tau: f64, check_every: u64, max_qr_iters: u32) -> Result<Self> {
        let policy = Self {
            mode,
            tau,
            check_every,
            max_qr_iters,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(KronoptError::ConfigError(format!(
                "tau must lie in [0, 1), got {}",
                self.tau
            )));
        }
        if self.check_every == 0 {
            return Err(KronoptError::ConfigError("check_every must be >= 1".into()));
        }
        if self.max_qr_iters == 0 {
            return Err(KronoptError::ConfigError(
                "max_qr_iters must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// What `maybe_refresh` did to the basis on a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshDecision {
    /// Step was not a check step (or the policy is frozen after its first eig).
    NoCheck,
    /// Criterion evaluated and satisfied; basis untouched.
    Skipped,
    /// Full eigendecomposition performed.
    Recomputed,
    /// Warm-started QR refinement converged after `iters` iterations.
    QrRefined { iters: u32 },
}

impl RefreshDecision {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefreshDecision::NoCheck => "nocheck",
            RefreshDecision::Skipped => "skipped",
            RefreshDecision::Recomputed => "recomputed",
            RefreshDecision::QrRefined { .. } => "qr_refined",
        }
    }

    pub fn qr_iters(&self) -> u32 {
        match self {
            RefreshDecision::QrRefined { iters } => *iters,
            _ => 0,
        }
    }
}

/// Outcome of one `maybe_refresh` call: the decision plus the criterion
/// value when one was computed on this step.
#[derive(Debug, Clone, Copy)]
pub struct RefreshReport {
    pub decision: RefreshDecision,
    pub criterion: Option<f64>,
}

/// One Kronecker factor's EMA statistic and cached eigenbasis.
#[derive(Debug, Clone)]
pub struct FactorState {
    stat: SymMatrix,
    basis: Matrix,
    basis_eigenvalues: Vec<f64>,
    steps_since_check: u64,
    eig_count: u64,
    qr_iter_count: u64,
    last_criterion: Option<f64>,
}

impl FactorState {
    /// Fresh state: zero statistic, identity basis, zero eigenvalues.
    pub fn new(dim: usize) -> Self {
        Self {
            stat: SymMatrix::zeros(dim),
            basis: Matrix::identity(dim),
            basis_eigenvalues: vec![0.0; dim],
            steps_since_check: 0,
            eig_count: 0,
            qr_iter_count: 0,
            last_criterion: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.stat.dim()
    }

    pub fn stat(&self) -> &SymMatrix {
        &self.stat
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn basis_eigenvalues(&self) -> &[f64] {
        &self.basis_eigenvalues
    }

    pub fn eig_count(&self) -> u64 {
        self.eig_count
    }

    pub fn qr_iter_count(&self) -> u64 {
        self.qr_iter_count
    }

    pub fn last_criterion(&self) -> Option<f64> {
        self.last_criterion
    }

    pub fn steps_since_check(&self) -> u64 {
        self.steps_since_check
    }

    /// Whether the first full eigendecomposition has happened yet.
    pub fn is_initialized(&self) -> bool {
        self.eig_count > 0
    }

    /// Replace the statistic wholesale. Test and oracle affordance for
    /// injecting exact (idealized) statistics.
    pub fn inject_stat(&mut self, stat: SymMatrix) -> Result<()> {
        if stat.dim() != self.dim() {
            return Err(KronoptError::DimError(format!(
                "injected stat dim {} != factor dim {}",
                stat.dim(),
                self.dim()
            )));
        }
        self.stat = stat;
        Ok(())
    }

    /// `stat ← β₂·stat + (1−β₂)·outer`. Counters and basis are untouched.
    pub fn ema_update(&mut self, outer: &SymMatrix, beta2: f64) -> Result<()> {
        if outer.dim() != self.dim() {
            return Err(KronoptError::DimError(format!(
                "EMA outer dim {} != factor dim {}",
                outer.dim(),
                self.dim()
            )));
        }
        if !(0.0..1.0).contains(&beta2) {
            return Err(KronoptError::ConfigError(format!(
                "beta2 must lie in [0, 1), got {beta2}"
            )));
        }
        let blended = &self.stat.as_matrix().scale(beta2) + &outer.as_matrix().scale(1.0 - beta2);
        self.stat = SymMatrix::from_matrix(&blended)?;
        Ok(())
    }

    fn full_eig(&mut self) -> Result<()> {
        let pair = sym_eig(&self.stat)?;
        self.basis = pair.basis;
        self.basis_eigenvalues = pair.values;
        self.eig_count += 1;
        Ok(())
    }

    fn rotated_diag(&self, rotated: &SymMatrix) -> Vec<f64> {
        (0..self.dim()).map(|i| rotated.as_matrix()[(i, i)]).collect()
    }

    /// Decide whether to skip, QR-refine, or fully recompute the basis.
    ///
    /// The first call with a nonzero statistic always performs a full
    /// eigendecomposition regardless of mode or cadence; afterwards checks
    /// happen when `step % check_every == 0` (steps start at 1). A zero
    /// statistic (no gradient signal yet) keeps the identity basis and
    /// reports `Skipped`.
    pub fn maybe_refresh(&mut self, policy: &RefreshPolicy, step: u64) -> Result<RefreshReport> {
        if step == 0 {
            return Err(KronoptError::ConfigError("steps start at 1".into()));
        }
        let zero_stat = self.stat.frobenius_norm() == 0.0;

        if !self.is_initialized() {
            self.steps_since_check = 0;
            if zero_stat {
                return Ok(RefreshReport {
                    decision: RefreshDecision::Skipped,
                    criterion: None,
                });
            }
            self.full_eig()?;
            return Ok(RefreshReport {
                decision: RefreshDecision::Recomputed,
                criterion: None,
            });
        }

        if policy.mode == RefreshMode::Frozen || step % policy.check_every != 0 {
            self.steps_since_check += 1;
            return Ok(RefreshReport {
                decision: RefreshDecision::NoCheck,
                criterion: None,
            });
        }

        self.steps_since_check = 0;

        if policy.mode == RefreshMode::FixedEigh {
            // Unconditional recompute; the criterion is deliberately not
            // evaluated on this path to keep its cost out of fixed schedules.
            self.full_eig()?;
            return Ok(RefreshReport {
                decision: RefreshDecision::Recomputed,
                criterion: None,
            });
        }

        if zero_stat {
            return Ok(RefreshReport {
                decision: RefreshDecision::Skipped,
                criterion: None,
            });
        }

        let rotated = self.stat.rotate(&self.basis)?;
        let criterion = offdiag_ratio(&rotated)?;
        self.last_criterion = Some(criterion);

        if criterion <= policy.tau {
            return Ok(RefreshReport {
                decision: RefreshDecision::Skipped,
                criterion: Some(criterion),
            });
        }

        match policy.mode {
            RefreshMode::AdaptiveEigh => {
                self.full_eig()?;
                Ok(RefreshReport {
                    decision: RefreshDecision::Recomputed,
                    criterion: Some(criterion),
                })
            }
            RefreshMode::AdaptiveQr => {
                let out = warm_qr_refine(&self.stat, &self.basis, policy.tau, policy.max_qr_iters)?;
                self.qr_iter_count += u64::from(out.iters);
                if out.converged {
                    self.basis_eigenvalues = self.rotated_diag(&out.rotated);
                    self.basis = out.basis;
                    Ok(RefreshReport {
                        decision: RefreshDecision::QrRefined { iters: out.iters },
                        criterion: Some(criterion),
                    })
                } else {
                    self.full_eig()?;
                    Ok(RefreshReport {
                        decision: RefreshDecision::Recomputed,
                        criterion: Some(criterion),
                    })
                }
            }
            RefreshMode::FixedEigh | RefreshMode::Frozen => unreachable!("handled above"),
        }
    }
}

/// Transition matrix `Q_newᵀ Q_old` between two orthogonal bases.
pub fn transition_matrix(q_new: &Matrix, q_old: &Matrix) -> Result<Matrix> {
    if q_new.shape() != q_old.shape() || !q_new.is_square() {
        return Err(KronoptError::DimError(format!(
            "transition between {}x{} and {}x{} bases",
            q_new.rows(),
            q_new.cols(),
            q_old.rows(),
            q_old.cols()
        )));
    }
    Ok(q_new.transpose().matmul(q_old))
}
