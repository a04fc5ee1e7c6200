//! Penalized Poisson fitting and smoothing-parameter estimation.
//!
//! The model is `log E[y_rct] = log n_rc + f(r, c, t)` with
//! `f = (B3 ⊗ B2 ⊗ B1) θ` and the quadratic penalty `θᵗ P(φ) θ`.
//!
//! * The inner loop is penalized IRLS with step halving on the penalized
//!   deviance. All design products go through the array routines in
//!   [`crate::arraykit`].
//! * The outer loop moves the block weights `φ`. Per block, the effective
//!   dimension
//!
//!   ```text
//!   ED_s = φ_s · [tr(P⁺Λ_s) − tr(G⁻¹Λ_s)],   G = BᵗWB + P(φ)
//!   ```
//!
//!   attributes the fit's degrees of freedom to the overlapping penalties.
//!   The approximate REML criterion of the working linear model is
//!   stationary where `ED_s = φ_s θᵗΛ_sθ` for every block. [`update_phi`] is
//!   the fixed-point map onto that condition. The default outer step is a
//!   projected Newton step on the same criterion, which reaches the same
//!   points in far fewer iterations when many blocks are weakly identified.
//!
//! Everything stays in the B-spline coefficient basis. `P(φ)` has the known
//! null space of low-order tensor polynomials, so its pseudo-inverse and
//! pseudo-determinant are taken on the complement of that space.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arraykit::{glam_apply, glam_apply_transpose, glam_weighted_inner, ArrayError, Cube};
use crate::exec::Execution;
use crate::penaltykit::{
    assemble_precision, build_adaptive_blocks, build_nonadaptive_blocks, penalty_null_space, AdaptiveBasisSpec,
    PenaltyError, PenaltySystem,
};
use crate::rfdata::RfDataset;
use crate::splinekit::{difference_matrix, MarginalBasis, SplineError};

/// Lower clamp for block weights.
pub const PHI_FLOOR: f64 = 1e-8;
/// Upper clamp for block weights.
pub const PHI_CAP: f64 = 1e8;

const MAX_HALVINGS: usize = 40;
/// Blocks whose effective dimension and penalty are both below this do not
/// move the REML criterion.
pub const NEGLIGIBLE_ED: f64 = 1e-6;
/// Relative change of the REML criterion below which it is numerical noise.
const REML_RESOLUTION: f64 = 1e-10;
/// Largest `|∂REML/∂log φ_s|` accepted as stationary when no step length
/// decreases the criterion.
const STATIONARY_GRADIENT: f64 = 1e-4;
/// Largest change of any `log φ_s` in one Newton step.
const MAX_LOG_STEP: f64 = 5.0;
const ETA_LIMIT: f64 = 700.0;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("ill-conditioned system: {0}")]
    Conditioning(String),
    #[error("penalized IRLS did not converge in {iterations} iterations (relative change {last_change:e})")]
    InnerNotConverged {
        iterations: usize,
        last_change: f64,
        state: Box<FitState>,
    },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Penalty(#[from] PenaltyError),
    #[error(transparent)]
    Array(#[from] ArrayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    pub basis_dim: [usize; 3],
    pub diff_order: [usize; 3],
    pub degree: usize,
    pub adaptive: bool,
    /// `adaptive_dim[d][j]`: sub-basis size for the weight field of penalty
    /// direction `d` along grid axis `j`.
    pub adaptive_dim: [[usize; 3]; 3],
    pub inner_tol: f64,
    pub outer_tol: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub phi_init: f64,
    #[serde(default)]
    pub outer_method: OuterMethod,
    #[serde(default)]
    pub execution: Execution,
}

/// How the outer loop moves the block weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterMethod {
    /// Projected Newton step on the working REML criterion, with a
    /// backtracking line search.
    #[default]
    Newton,
    /// The plain effective-dimension fixed point [`update_phi`].
    FixedPoint,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            basis_dim: [7, 7, 7],
            diff_order: [2, 2, 2],
            degree: 3,
            adaptive: false,
            adaptive_dim: [[4; 3]; 3],
            inner_tol: 1e-8,
            outer_tol: 1e-4,
            max_inner: 50,
            max_outer: 200,
            phi_init: 1.0,
            outer_method: OuterMethod::Newton,
            execution: Execution::Sequential,
        }
    }
}

impl SmootherConfig {
    pub fn nonadaptive() -> Self {
        Self::default()
    }

    pub fn adaptive() -> Self {
        Self {
            adaptive: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FitError> {
        for d in 0..3 {
            if self.diff_order[d] < 1 || self.basis_dim[d] <= self.diff_order[d] {
                return Err(FitError::InvalidConfig(format!(
                    "axis {}: need basis dimension > difference order >= 1, got {} and {}",
                    d + 1,
                    self.basis_dim[d],
                    self.diff_order[d]
                )));
            }
            if self.basis_dim[d] <= self.degree {
                return Err(FitError::InvalidConfig(format!(
                    "axis {}: basis dimension {} must exceed the spline degree {}",
                    d + 1,
                    self.basis_dim[d],
                    self.degree
                )));
            }
        }
        if self.adaptive_dim.iter().flatten().any(|&p| p < 1) {
            return Err(FitError::InvalidConfig("adaptive dimensions must be at least 1".into()));
        }
        for (name, tol) in [("inner_tol", self.inner_tol), ("outer_tol", self.outer_tol)] {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(FitError::InvalidConfig(format!("{name} must be positive, got {tol}")));
            }
        }
        if self.max_inner == 0 || self.max_outer == 0 {
            return Err(FitError::InvalidConfig("iteration caps must be positive".into()));
        }
        if !(self.phi_init.is_finite() && self.phi_init > 0.0) {
            return Err(FitError::InvalidConfig(format!(
                "phi_init must be positive, got {}",
                self.phi_init
            )));
        }
        Ok(())
    }

    pub fn coefficient_count(&self) -> usize {
        self.basis_dim.iter().product()
    }

    /// Number of block weights the configuration estimates.
    pub fn parameter_count(&self) -> usize {
        if self.adaptive {
            self.adaptive_dim.iter().map(|p| p.iter().product::<usize>()).sum()
        } else {
            3
        }
    }
}

/// Marginal bases, responses and offsets of one dataset.
#[derive(Debug, Clone)]
pub struct Problem {
    pub bases: [MarginalBasis; 3],
    pub counts: Cube,
    /// `log n_rc` broadcast over time; zero on inactive cells.
    pub log_offset: Cube,
    pub active: Vec<bool>,
}

impl Problem {
    pub fn new(data: &RfDataset, basis_dim: [usize; 3], degree: usize) -> Result<Self, FitError> {
        let grid = &data.counts.grid;
        let rows: Vec<f64> = (1..=grid.n_r).map(|v| v as f64).collect();
        let cols: Vec<f64> = (1..=grid.n_c).map(|v| v as f64).collect();
        let times: Vec<f64> = grid.times.iter().map(|&t| t as f64).collect();
        let bases = [
            MarginalBasis::equidistant(1, &rows, basis_dim[0], degree)?,
            MarginalBasis::equidistant(2, &cols, basis_dim[1], degree)?,
            MarginalBasis::equidistant(3, &times, basis_dim[2], degree)?,
        ];
        let extents = grid.extents();
        let counts = Cube::from_fn(extents, |r, c, t| data.counts.get(r, c, t) as f64);
        let log_offset = Cube::from_fn(extents, |r, c, _| {
            let n = data.offsets.get(r, c);
            if n > 0 {
                (n as f64).ln()
            } else {
                0.0
            }
        });
        let active = Cube::from_fn(extents, |r, c, _| f64::from(u8::from(data.offsets.get(r, c) > 0)))
            .as_slice()
            .iter()
            .map(|&v| v > 0.0)
            .collect::<Vec<_>>();
        let problem = Self {
            bases,
            counts,
            log_offset,
            active,
        };
        if !problem.active.iter().any(|&a| a) {
            return Err(FitError::DegenerateData("every cell has zero presentations".into()));
        }
        if problem.active_total(problem.counts.as_slice()) <= 0.0 {
            return Err(FitError::DegenerateData("all counts on active cells are zero".into()));
        }
        Ok(problem)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.counts.extents()
    }

    pub fn coef_extents(&self) -> [usize; 3] {
        [self.bases[0].ncols(), self.bases[1].ncols(), self.bases[2].ncols()]
    }

    pub fn coef_count(&self) -> usize {
        self.coef_extents().iter().product()
    }

    /// `f = Bθ` on the grid.
    pub fn linear_predictor(&self, theta: &DVector<f64>) -> Result<Cube, FitError> {
        let coefs = Cube::from_vec(self.coef_extents(), theta.as_slice().to_vec())?;
        Ok(glam_apply(
            &self.bases[2].matrix,
            &self.bases[1].matrix,
            &self.bases[0].matrix,
            &coefs,
        )?)
    }

    pub fn weighted_inner(&self, w: &Cube) -> Result<DMatrix<f64>, FitError> {
        Ok(glam_weighted_inner(
            &self.bases[2].matrix,
            &self.bases[1].matrix,
            &self.bases[0].matrix,
            w,
        )?)
    }

    pub fn transpose_apply(&self, values: &Cube) -> Result<DVector<f64>, FitError> {
        let out = glam_apply_transpose(
            &self.bases[2].matrix,
            &self.bases[1].matrix,
            &self.bases[0].matrix,
            values,
        )?;
        Ok(DVector::from_vec(out.into_vec()))
    }

    fn active_total(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .zip(&self.active)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .sum()
    }

    /// Offset-free start: the constant fit `log(Σy / Σn)`.
    pub fn initial_theta(&self) -> DVector<f64> {
        let y = self.active_total(self.counts.as_slice());
        let exposure: f64 = self
            .log_offset
            .as_slice()
            .iter()
            .zip(&self.active)
            .filter(|(_, &a)| a)
            .map(|(&l, _)| l.exp())
            .sum();
        DVector::from_element(self.coef_count(), (y / exposure).ln())
    }
}

/// Inner-loop state at the last accepted coefficient vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub theta: DVector<f64>,
    /// `log n + f` on active cells, `f` elsewhere.
    pub eta: Cube,
    pub mu: Cube,
    /// Working response on the offset-free scale: `f + (y − μ)/μ`.
    pub z: Cube,
    pub w: Cube,
    pub deviance: f64,
    pub penalized_deviance: f64,
    pub phi: Vec<f64>,
    pub iterations: usize,
    /// Penalized deviance at the start and after every accepted step.
    pub penalized_trace: Vec<f64>,
}

struct Evaluation {
    f: Cube,
    eta: Cube,
    mu: Cube,
    deviance: f64,
}

fn evaluate(problem: &Problem, theta: &DVector<f64>) -> Result<Evaluation, FitError> {
    let f = problem.linear_predictor(theta)?;
    let mut eta = f.clone();
    let mut mu = Cube::zeros(f.extents());
    let mut deviance = 0.0;
    let y = problem.counts.as_slice();
    let lo = problem.log_offset.as_slice();
    for i in 0..f.len() {
        let e = (f.as_slice()[i] + lo[i]).clamp(-ETA_LIMIT, ETA_LIMIT);
        eta.as_mut_slice()[i] = e;
        let m = e.exp();
        mu.as_mut_slice()[i] = m;
        if problem.active[i] {
            let yi = y[i];
            let term = if yi > 0.0 { yi * (yi / m).ln() } else { 0.0 };
            deviance += 2.0 * (term - (yi - m));
        }
    }
    Ok(Evaluation { f, eta, mu, deviance })
}

fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

fn working_quantities(problem: &Problem, ev: &Evaluation) -> (Cube, Cube) {
    let mut w = Cube::zeros(ev.f.extents());
    let mut z = Cube::zeros(ev.f.extents());
    let y = problem.counts.as_slice();
    for (i, &active) in problem.active.iter().enumerate() {
        if active {
            let m = ev.mu.as_slice()[i];
            w.as_mut_slice()[i] = m;
            z.as_mut_slice()[i] = ev.f.as_slice()[i] + (y[i] - m) / m;
        }
    }
    (w, z)
}

fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>, FitError> {
    let dim = m.nrows();
    let max_diag = m.diagonal().max();
    let min_diag = m.diagonal().min();
    Cholesky::new(m).ok_or_else(|| {
        FitError::Conditioning(format!(
            "{what} ({dim}x{dim}) is not positive definite; diagonal range [{min_diag:e}, {max_diag:e}]"
        ))
    })
}

fn spd_inverse(chol: &Cholesky<f64, Dyn>, exec: Execution) -> DMatrix<f64> {
    let n = chol.l_dirty().nrows();
    let columns = exec.map_range(n, |j| {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        chol.solve(&e)
    });
    DMatrix::from_columns(&columns)
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Pseudo-inverse and log pseudo-determinant of a penalty whose null space is
/// spanned by the orthonormal columns of `null_basis`.
///
/// Uses `P⁺ = (P + τXXᵗ)⁻¹ − XXᵗ/τ` and `log pdet P = log det(P + τXXᵗ) − k log τ`.
pub fn penalty_pseudo_inverse(
    precision: &DMatrix<f64>,
    null_basis: &DMatrix<f64>,
    exec: Execution,
) -> Result<(DMatrix<f64>, f64), FitError> {
    let aug = AugmentedPenalty::new(precision, null_basis);
    let chol = cholesky(aug.matrix.clone(), "penalty augmented by its null space")?;
    let inv = spd_inverse(&chol, exec) - &aug.xxt / aug.tau;
    Ok((inv, log_det(&chol) - aug.null_dim as f64 * aug.tau.ln()))
}

/// `P + τXXᵗ` with `τ = tr(P) / rank`.
struct AugmentedPenalty {
    matrix: DMatrix<f64>,
    xxt: DMatrix<f64>,
    tau: f64,
    null_dim: usize,
}

impl AugmentedPenalty {
    fn new(precision: &DMatrix<f64>, null_basis: &DMatrix<f64>) -> Self {
        let null_dim = null_basis.ncols();
        let rank = (precision.nrows() - null_dim).max(1) as f64;
        let tau = (precision.trace() / rank).max(f64::MIN_POSITIVE);
        let xxt = null_basis * null_basis.transpose();
        Self {
            matrix: precision + &xxt * tau,
            xxt,
            tau,
            null_dim,
        }
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `e − Σ a_k b_k` in compensated arithmetic (twice the working precision).
fn compensated_residual(e: f64, a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (e, 0.0);
    for (x, y) in a.zip(b) {
        let p = -x * y;
        let err = (-x).mul_add(y, -p);
        let (t, q) = two_sum(s, p);
        s = t;
        c += q + err;
    }
    s + c
}

/// SPD inverse with one step of refinement `Y ← Y + Y(I − AY)`, the
/// residual taken in compensated arithmetic. Needed when the smoothing
/// weights span the full clamp range and `A` is close to f64 conditioning
/// limits.
fn refined_spd_inverse(a: &DMatrix<f64>, what: &str, exec: Execution) -> Result<DMatrix<f64>, FitError> {
    let y = spd_inverse(&cholesky(a.clone(), what)?, exec);
    let n = a.nrows();
    let columns = exec.map_range(n, |j| {
        let yj = y.column(j);
        DVector::from_fn(n, |i, _| {
            let e = if i == j { 1.0 } else { 0.0 };
            // A is symmetric: row i equals column i
            compensated_residual(e, a.column(i).iter().copied(), yj.iter().copied())
        })
    });
    let residual = DMatrix::from_columns(&columns);
    let refined = &y + &y * residual;
    Ok((&refined + refined.transpose()) * 0.5)
}

/// Penalized IRLS for a fixed precision matrix, starting from `theta0`.
pub fn pirls_solve(
    problem: &Problem,
    precision: &DMatrix<f64>,
    theta0: &DVector<f64>,
    phi: &[f64],
    cfg: &SmootherConfig,
) -> Result<FitState, FitError> {
    let mut theta = theta0.clone();
    let mut ev = evaluate(problem, &theta)?;
    let mut pen_dev = ev.deviance + quad_form(precision, &theta);
    let mut trace = vec![pen_dev];
    let mut last_change = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=cfg.max_inner {
        iterations = it;
        let (w, z) = working_quantities(problem, &ev);
        let wz = Cube::from_fn(w.extents(), |a, b, c| w.get(a, b, c) * z.get(a, b, c));
        let lhs = problem.weighted_inner(&w)? + precision;
        let rhs = problem.transpose_apply(&wz)?;
        let proposal = cholesky(lhs, "penalized normal equations")?.solve(&rhs);

        let mut candidate = proposal;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand_ev = evaluate(problem, &candidate)?;
            let cand_pd = cand_ev.deviance + quad_form(precision, &candidate);
            if cand_pd.is_finite() && cand_pd <= pen_dev + 1e-12 * pen_dev.abs() {
                accepted = Some((candidate, cand_ev, cand_pd));
                break;
            }
            candidate = (&candidate + &theta) * 0.5;
        }
        let Some((new_theta, new_ev, new_pd)) = accepted else {
            // no decrease available along the Newton direction
            last_change = 0.0;
            converged = true;
            break;
        };
        last_change = (new_pd - pen_dev).abs() / (new_pd.abs() + 0.1);
        theta = new_theta;
        ev = new_ev;
        pen_dev = new_pd;
        trace.push(pen_dev);
        if last_change < cfg.inner_tol {
            converged = true;
            break;
        }
    }

    let (w, z) = working_quantities(problem, &ev);
    let state = FitState {
        theta,
        eta: ev.eta,
        mu: ev.mu,
        z,
        w,
        deviance: ev.deviance,
        penalized_deviance: pen_dev,
        phi: phi.to_vec(),
        iterations,
        penalized_trace: trace,
    };
    if converged {
        Ok(state)
    } else {
        Err(FitError::InnerNotConverged {
            iterations,
            last_change,
            state: Box::new(state),
        })
    }
}

/// Outcome of one effective-dimension update.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiUpdate {
    pub phi: Vec<f64>,
    /// `φ_s [tr(P⁺Λ_s) − tr(G⁻¹Λ_s)]` at the current state.
    pub ed: Vec<f64>,
    /// `θᵗ Λ_s θ` at the current state.
    pub quadratic: Vec<f64>,
    /// Blocks whose update hit the floor or the cap.
    pub pinned: Vec<usize>,
    /// Blocks with `θᵗΛ_sθ = 0` but positive effective dimension.
    pub unidentified: Vec<usize>,
    /// `tr(G⁻¹ BᵗWB)`.
    pub total_ed: f64,
}

/// Per-block traces at a fitted state.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDimensions {
    /// `φ_s [tr(P⁺Λ_s) − tr(G⁻¹Λ_s)]`.
    pub ed: Vec<f64>,
    /// `θᵗ Λ_s θ`.
    pub quadratic: Vec<f64>,
    /// `tr(G⁻¹ BᵗWB)`.
    pub total_ed: f64,
}

/// Per-block effective dimensions and quadratic forms at `state` for weights `phi`.
pub fn block_effective_dimensions(
    problem: &Problem,
    state: &FitState,
    system: &PenaltySystem,
    phi: &[f64],
    null_basis: &DMatrix<f64>,
    exec: Execution,
) -> Result<BlockDimensions, FitError> {
    let xtwx = problem.weighted_inner(&state.w)?;
    let precision = assemble_precision(system, phi)?;
    let g_inv = refined_spd_inverse(&(&xtwx + &precision), "penalized normal equations", exec)?;
    let aug = AugmentedPenalty::new(&precision, null_basis);
    let p_plus = refined_spd_inverse(&aug.matrix, "penalty augmented by its null space", exec)? - &aug.xxt / aug.tau;
    let plus_diag = exec.map_slice(&system.operators, |op| op.sandwich_diagonal(&p_plus));
    let inv_diag = exec.map_slice(&system.operators, |op| op.sandwich_diagonal(&g_inv));
    let ed = exec.map_slice(&system.blocks, |b| {
        let d = b.direction - 1;
        let tr: f64 = (0..b.weights.len())
            .map(|i| b.weights[i] * (plus_diag[d][i] - inv_diag[d][i]))
            .sum();
        phi[b.weight_ref] * tr
    });
    Ok(BlockDimensions {
        ed,
        quadratic: system.quadratic_forms(&state.theta),
        total_ed: (g_inv * xtwx).trace(),
    })
}

/// One fixed-point step `φ_s ← ED_s / θᵗΛ_sθ`, clamped to `[PHI_FLOOR, PHI_CAP]`.
pub fn update_phi(
    problem: &Problem,
    state: &FitState,
    system: &PenaltySystem,
    null_basis: &DMatrix<f64>,
    exec: Execution,
) -> Result<PhiUpdate, FitError> {
    let phi = &state.phi;
    check_weights(phi)?;
    let dims = block_effective_dimensions(problem, state, system, phi, null_basis, exec)?;
    let mut next = Vec::with_capacity(phi.len());
    let mut pinned = Vec::new();
    let mut unidentified = Vec::new();
    for (s, (&e, &q)) in dims.ed.iter().zip(&dims.quadratic).enumerate() {
        let raw = if q > 0.0 {
            e.max(0.0) / q
        } else if e > 0.0 {
            unidentified.push(s);
            PHI_CAP
        } else {
            PHI_FLOOR
        };
        let clamped = raw.clamp(PHI_FLOOR, PHI_CAP);
        if at_bound(clamped) {
            pinned.push(s);
        }
        next.push(clamped);
    }
    Ok(PhiUpdate {
        phi: next,
        ed: dims.ed,
        quadratic: dims.quadratic,
        pinned,
        unidentified,
        total_ed: dims.total_ed,
    })
}

fn check_weights(phi: &[f64]) -> Result<(), FitError> {
    match phi.iter().find(|&&v| !(v.is_finite() && v > 0.0)) {
        Some(v) => Err(FitError::InvalidConfig(format!(
            "block weights must be positive and finite, got {v}"
        ))),
        None => Ok(()),
    }
}

fn at_bound(phi: f64) -> bool {
    phi <= PHI_FLOOR || phi >= PHI_CAP
}

/// Gradient and Hessian of [`working_reml`] with respect to `log φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RemlDerivatives {
    /// `φ_s θᵗΛ_sθ − ED_s`.
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub ed: Vec<f64>,
    pub quadratic: Vec<f64>,
}

/// Exact derivatives of the working REML criterion of `state` at `phi`,
/// with the coefficients profiled out.
///
/// With `A ∈ {G⁻¹, P⁺}` every trace `tr(AΛ_tAΛ_s)` is
/// `c_sᵗ [(K_d A K_eᵗ) ∘ (K_d A K_eᵗ)] c_t`, so the Hessian costs a handful
/// of products with the directional operators.
pub fn working_reml_derivatives(
    problem: &Problem,
    state: &FitState,
    system: &PenaltySystem,
    phi: &[f64],
    null_basis: &DMatrix<f64>,
    exec: Execution,
) -> Result<RemlDerivatives, FitError> {
    check_weights(phi)?;
    let xtwx = problem.weighted_inner(&state.w)?;
    let precision = assemble_precision(system, phi)?;
    let g = cholesky(&xtwx + &precision, "penalized normal equations")?;
    let wz = Cube::from_fn(state.w.extents(), |a, b, c| state.w.get(a, b, c) * state.z.get(a, b, c));
    let theta = g.solve(&problem.transpose_apply(&wz)?);
    let g_inv = spd_inverse(&g, exec);
    let (p_plus, _) = penalty_pseudo_inverse(&precision, null_basis, exec)?;

    let k: Vec<DMatrix<f64>> = system.operators.iter().map(|op| op.dense()).collect();
    let left = exec.map_range(3, |d| (&k[d] * &g_inv, &k[d] * &p_plus));
    let pairs: Vec<(usize, usize)> = (0..3).flat_map(|d| (d..3).map(move |e| (d, e))).collect();
    // (P⁺ ∘ P⁺ − G⁻¹ ∘ G⁻¹) sandwiched between directions d and e
    let hadamard = exec.map_slice(&pairs, |&(d, e)| {
        let mg = &left[d].0 * k[e].transpose();
        let mp = &left[d].1 * k[e].transpose();
        mp.component_mul(&mp) - mg.component_mul(&mg)
    });

    let n = system.blocks.len();
    let mut weights: [Vec<usize>; 3] = Default::default();
    for (s, b) in system.blocks.iter().enumerate() {
        weights[b.direction - 1].push(s);
    }
    let columns = |d: usize| -> DMatrix<f64> {
        let rows = system.operators[d].nrows();
        DMatrix::from_fn(rows, weights[d].len(), |i, j| system.blocks[weights[d][j]].weights[i])
    };
    let c: Vec<DMatrix<f64>> = (0..3).map(columns).collect();

    let mut ed = vec![0.0; n];
    let quadratic = system.quadratic_forms(&theta);
    let mut hessian = DMatrix::zeros(n, n);
    for (&(d, e), h) in pairs.iter().zip(&hadamard) {
        let t = c[d].transpose() * h * &c[e];
        for (i, &s) in weights[d].iter().enumerate() {
            for (j, &u) in weights[e].iter().enumerate() {
                let v = phi[s] * phi[u] * t[(i, j)];
                hessian[(s, u)] += v;
                if d != e {
                    hessian[(u, s)] += v;
                }
            }
        }
        if d == e {
            let diag: Vec<f64> = (0..k[d].nrows())
                .map(|r| left[d].1.row(r).dot(&k[d].row(r)) - left[d].0.row(r).dot(&k[d].row(r)))
                .collect();
            for (i, &s) in weights[d].iter().enumerate() {
                ed[s] = phi[s] * c[d].column(i).dot(&DVector::from_vec(diag.clone()));
            }
        }
    }

    // u_s = φ_s Λ_s θ; the profiled coefficients contribute −2 uᵗ G⁻¹ u
    let kt: Vec<DVector<f64>> = system.operators.iter().map(|op| op.apply(&theta)).collect();
    let mut u = DMatrix::zeros(theta.len(), n);
    for (s, b) in system.blocks.iter().enumerate() {
        let d = b.direction - 1;
        let scaled = DVector::from_iterator(kt[d].len(), b.weights.iter().zip(kt[d].iter()).map(|(&w, &v)| w * v));
        u.set_column(s, &(k[d].transpose() * scaled * phi[s]));
    }
    hessian -= u.transpose() * (&g_inv * &u) * 2.0;

    let gradient = DVector::from_fn(n, |s, _| phi[s] * quadratic[s] - ed[s]);
    for s in 0..n {
        hessian[(s, s)] += gradient[s];
    }
    Ok(RemlDerivatives {
        gradient,
        hessian,
        ed,
        quadratic,
    })
}

/// Projected Newton step on `log φ` from `state`.
///
/// * A block at a bound stays there while its gradient points outwards or
///   while it is negligible (`|ED_s|` and `φ_s θᵗΛ_sθ` both below
///   `NEGLIGIBLE_ED`).
/// * A negligible block inside the bounds moves straight to the bound its
///   gradient points at; the criterion is flat along it.
/// * The Hessian of the remaining blocks is made positive definite by
///   taking absolute eigenvalues, and the step is backtracked until the
///   working REML decreases.
///
/// * If the predicted decrease `−gᵗΔ` is below the criterion's numerical
///   resolution, or no step length decreases it while the gradient is
///   negligible, the free weights are left unchanged.
///
/// Returns the new weights and the largest `|Δ log φ|` of the full step
/// (only the snap in the stationary case above).
pub fn newton_update(
    problem: &Problem,
    state: &FitState,
    system: &PenaltySystem,
    null_basis: &DMatrix<f64>,
    exec: Execution,
) -> Result<(Vec<f64>, f64), FitError> {
    let phi = &state.phi;
    let der = working_reml_derivatives(problem, state, system, phi, null_basis, exec)?;
    let (lo, hi) = (PHI_FLOOR.ln(), PHI_CAP.ln());
    let rho: Vec<f64> = phi.iter().map(|v| v.ln()).collect();
    let mut base = rho.clone();
    let mut free = Vec::new();
    for s in 0..phi.len() {
        let g = der.gradient[s];
        let negligible = der.ed[s].abs() < NEGLIGIBLE_ED && phi[s] * der.quadratic[s] < NEGLIGIBLE_ED;
        if at_bound(phi[s]) {
            let outward = (phi[s] <= PHI_FLOOR && g > 0.0) || (phi[s] >= PHI_CAP && g < 0.0);
            if !(outward || negligible) {
                free.push(s);
            }
        } else if negligible {
            base[s] = if g > 0.0 { lo } else { hi };
        } else {
            free.push(s);
        }
    }
    let snapped = max_log_change(phi, &base.iter().map(|v| v.exp()).collect::<Vec<_>>());
    if free.is_empty() {
        return Ok((base.iter().map(|v| v.exp()).collect(), snapped));
    }
    let h = DMatrix::from_fn(free.len(), free.len(), |i, j| der.hessian[(free[i], free[j])]);
    let g = DVector::from_fn(free.len(), |i, _| der.gradient[free[i]]);
    let eig = h.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (top * 1e-10).max(1e-12);
    let coords = eig.eigenvectors.transpose() * &g;
    let scaled = DVector::from_fn(coords.len(), |i, _| -coords[i] / eig.eigenvalues[i].abs().max(floor));
    let mut step = &eig.eigenvectors * scaled;
    let newton = step.amax();
    if newton > MAX_LOG_STEP {
        step *= MAX_LOG_STEP / newton;
    }
    let full = newton.max(snapped);

    let reml0 = working_reml(problem, state, system, phi, null_basis)?;
    // Predicted decrease below what the criterion resolves: the free weights
    // are stationary to working precision and only the snap is applied.
    let decrement: f64 = (0..free.len()).map(|i| -g[i] * step[i]).sum();
    if decrement <= REML_RESOLUTION * reml0.abs().max(1.0) {
        return Ok((base.iter().map(|v| v.exp()).collect(), snapped));
    }
    let accept = |trial: &[f64]| -> Option<Vec<f64>> {
        let slope: f64 = (0..rho.len()).map(|s| der.gradient[s] * (trial[s] - rho[s])).sum();
        let candidate: Vec<f64> = trial.iter().map(|v| v.exp()).collect();
        match working_reml(problem, state, system, &candidate, null_basis) {
            Ok(r) if r <= reml0 + 1e-4 * slope + 1e-12 * reml0.abs() => Some(candidate),
            _ => None,
        }
    };
    let newton_point = |alpha: f64| -> Vec<f64> {
        let mut trial = base.clone();
        for (i, &s) in free.iter().enumerate() {
            trial[s] = (rho[s] + alpha * step[i]).clamp(lo, hi);
        }
        trial
    };
    let mut alpha = 1.0;
    for _ in 0..MAX_HALVINGS {
        if let Some(candidate) = accept(&newton_point(alpha)) {
            return Ok((candidate, full));
        }
        alpha *= 0.5;
    }
    // No step length decreases the criterion: stationary if the gradient is
    // negligible, otherwise report the full step so the fit is not marked
    // converged.
    let stationary = g.amax() <= STATIONARY_GRADIENT;
    Ok((
        base.iter().map(|v| v.exp()).collect(),
        if stationary { snapped } else { full },
    ))
}

fn reml_at(
    problem: &Problem,
    state: &FitState,
    theta: &DVector<f64>,
    system: &PenaltySystem,
    phi: &[f64],
    null_basis: &DMatrix<f64>,
) -> Result<f64, FitError> {
    let precision = assemble_precision(system, phi)?;
    let f = problem.linear_predictor(theta)?;
    let wrss: f64 = (0..f.len())
        .map(|i| {
            let r = state.z.as_slice()[i] - f.as_slice()[i];
            state.w.as_slice()[i] * r * r
        })
        .sum();
    let penalty = quad_form(&precision, theta);
    let g = cholesky(problem.weighted_inner(&state.w)? + &precision, "REML system matrix")?;
    let (_, log_pdet) = penalty_pseudo_inverse(&precision, null_basis, Execution::Sequential)?;
    Ok(wrss + penalty + log_det(&g) - log_pdet)
}

/// `−2 ×` approximate restricted log-likelihood of the working model at
/// `state` (coefficients, weights and working response taken from `state`).
pub fn approx_reml(
    problem: &Problem,
    state: &FitState,
    system: &PenaltySystem,
    phi: &[f64],
    null_basis: &DMatrix<f64>,
) -> Result<f64, FitError> {
    reml_at(problem, state, &state.theta, system, phi, null_basis)
}

/// [`approx_reml`] with the coefficients re-solved for `phi` in the working
/// linear model of `state`. This is the profile criterion whose stationary
/// points are the fixed points of [`update_phi`].
pub fn working_reml(
    problem: &Problem,
    state: &FitState,
    system: &PenaltySystem,
    phi: &[f64],
    null_basis: &DMatrix<f64>,
) -> Result<f64, FitError> {
    let theta = working_coefficients(problem, state, system, phi)?;
    reml_at(problem, state, &theta, system, phi, null_basis)
}

/// `(BᵗWB + P(φ))⁻¹ BᵗWz` with `W`, `z` from `state`.
pub fn working_coefficients(
    problem: &Problem,
    state: &FitState,
    system: &PenaltySystem,
    phi: &[f64],
) -> Result<DVector<f64>, FitError> {
    let precision = assemble_precision(system, phi)?;
    let wz = Cube::from_fn(state.w.extents(), |a, b, c| state.w.get(a, b, c) * state.z.get(a, b, c));
    let rhs = problem.transpose_apply(&wz)?;
    Ok(cholesky(
        problem.weighted_inner(&state.w)? + precision,
        "penalized normal equations",
    )?
    .solve(&rhs))
}

/// One row of the outer-iteration trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer_iter: usize,
    pub reml: f64,
    pub max_dlogphi: f64,
    pub inner_iters: usize,
    pub inner_converged: bool,
    pub pinned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub direction: usize,
    pub block: usize,
    pub phi: f64,
    pub ed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub config: SmootherConfig,
    pub extents: [usize; 3],
    pub coef_extents: [usize; 3],
    pub theta: DVector<f64>,
    /// `exp(f)` on every cell.
    pub fitted_rate: Cube,
    /// `f = Bθ` (offset excluded).
    pub linear_predictor: Cube,
    /// `μ = n · exp(f)`; zero on inactive cells.
    pub fitted_counts: Cube,
    pub phi: Vec<f64>,
    pub blocks: Vec<BlockSummary>,
    /// `tr(G⁻¹ BᵗWB)`, equal to `Σ ED_s + null-space dimension`.
    pub total_ed: f64,
    pub null_dim: usize,
    pub deviance: f64,
    pub reml: f64,
    pub converged: bool,
    pub trace: Vec<OuterRecord>,
    /// Blocks at the floor or cap in the final update.
    pub pinned: Vec<usize>,
    /// Blocks whose direction was locally unidentified (`θᵗΛθ = 0`).
    pub unidentified: Vec<usize>,
    pub wall_seconds: f64,
    pub final_state: FitState,
}

impl FitResult {
    pub fn parameter_count(&self) -> usize {
        self.phi.len()
    }

    pub fn coefficient_count(&self) -> usize {
        self.theta.len()
    }

    pub fn ed_sum(&self) -> f64 {
        self.blocks.iter().map(|b| b.ed).sum()
    }
}

/// Problem, penalty structure and null basis for a dataset and configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub problem: Problem,
    pub system: PenaltySystem,
    pub null_basis: DMatrix<f64>,
}

impl Model {
    pub fn new(data: &RfDataset, cfg: &SmootherConfig) -> Result<Self, FitError> {
        cfg.validate()?;
        let problem = Problem::new(data, cfg.basis_dim, cfg.degree)?;
        let [c1, c2, c3] = cfg.basis_dim;
        let [q1, q2, q3] = cfg.diff_order;
        let d1 = difference_matrix(c1, q1)?;
        let d2 = difference_matrix(c2, q2)?;
        let d3 = difference_matrix(c3, q3)?;
        let system = if cfg.adaptive {
            let spec = AdaptiveBasisSpec::bspline(cfg.basis_dim, cfg.diff_order, cfg.adaptive_dim)?;
            build_adaptive_blocks(&d1, &d2, &d3, &spec)?
        } else {
            build_nonadaptive_blocks(&d1, &d2, &d3)?
        };
        let null_basis = penalty_null_space(cfg.diff_order, cfg.basis_dim)?;
        Ok(Self {
            problem,
            system,
            null_basis,
        })
    }

    fn solve_inner(
        &self,
        phi: &[f64],
        theta0: &DVector<f64>,
        cfg: &SmootherConfig,
    ) -> Result<(FitState, bool), FitError> {
        let precision = assemble_precision(&self.system, phi)?;
        match pirls_solve(&self.problem, &precision, theta0, phi, cfg) {
            Ok(state) => Ok((state, true)),
            Err(FitError::InnerNotConverged { state, .. }) => Ok((*state, false)),
            Err(e) => Err(e),
        }
    }
}

fn max_log_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (y.ln() - x.ln()).abs())
        .fold(0.0, f64::max)
}

/// Fits the model, alternating penalized IRLS and the block-weight update
/// until `max |Δ log φ| < outer_tol`.
pub fn fit(data: &RfDataset, cfg: &SmootherConfig) -> Result<FitResult, FitError> {
    fit_with_observer(data, cfg, |_| {})
}

/// [`fit`] with a callback invoked after every outer iteration.
pub fn fit_with_observer(
    data: &RfDataset,
    cfg: &SmootherConfig,
    mut observer: impl FnMut(&OuterRecord),
) -> Result<FitResult, FitError> {
    let start = Instant::now();
    let model = Model::new(data, cfg)?;
    let exec = cfg.execution;
    let mut phi = vec![cfg.phi_init; model.system.len()];
    let mut theta = model.problem.initial_theta();
    let mut converged = false;
    let mut trace = Vec::new();

    for outer_iter in 1..=cfg.max_outer {
        let (state, inner_converged) = model.solve_inner(&phi, &theta, cfg)?;
        let reml = approx_reml(&model.problem, &state, &model.system, &phi, &model.null_basis)?;
        let (next, step) = match cfg.outer_method {
            OuterMethod::Newton => newton_update(&model.problem, &state, &model.system, &model.null_basis, exec)?,
            OuterMethod::FixedPoint => {
                let next = update_phi(&model.problem, &state, &model.system, &model.null_basis, exec)?.phi;
                let step = max_log_change(&phi, &next);
                (next, step)
            }
        };
        let record = OuterRecord {
            outer_iter,
            reml,
            max_dlogphi: step,
            inner_iters: state.iterations,
            inner_converged,
            pinned: next.iter().filter(|&&v| at_bound(v)).count(),
        };
        observer(&record);
        trace.push(record);
        theta = state.theta;
        phi = next;
        if step < cfg.outer_tol {
            converged = true;
            break;
        }
    }

    let (state, inner_ok) = model.solve_inner(&phi, &theta, cfg)?;
    let final_update = update_phi(&model.problem, &state, &model.system, &model.null_basis, exec)?;
    let reml = approx_reml(&model.problem, &state, &model.system, &phi, &model.null_basis)?;
    let f = model.problem.linear_predictor(&state.theta)?;
    let fitted_rate = f.map(f64::exp);
    let mut fitted_counts = state.mu.clone();
    for (v, &a) in fitted_counts.as_mut_slice().iter_mut().zip(&model.problem.active) {
        if !a {
            *v = 0.0;
        }
    }
    let blocks = model
        .system
        .blocks
        .iter()
        .map(|b| BlockSummary {
            direction: b.direction,
            block: b.block_index,
            phi: phi[b.weight_ref],
            ed: final_update.ed[b.weight_ref],
        })
        .collect();

    let pinned = (0..phi.len()).filter(|&s| at_bound(phi[s])).collect();
    Ok(FitResult {
        config: cfg.clone(),
        extents: model.problem.extents(),
        coef_extents: model.problem.coef_extents(),
        theta: state.theta.clone(),
        fitted_rate,
        linear_predictor: f,
        fitted_counts,
        phi,
        blocks,
        total_ed: final_update.total_ed,
        null_dim: model.null_basis.ncols(),
        deviance: state.deviance,
        reml,
        converged: converged && inner_ok,
        trace,
        pinned,
        unidentified: final_update.unidentified,
        wall_seconds: start.elapsed().as_secs_f64(),
        final_state: state,
    })
}

/// Fits every dataset with the same configuration; datasets are distributed
/// over the pool when `exec` is parallel.
pub fn fit_batch(datasets: &[RfDataset], cfg: &SmootherConfig, exec: Execution) -> Vec<Result<FitResult, FitError>> {
    exec.map_slice(datasets, |d| fit(d, cfg))
}
