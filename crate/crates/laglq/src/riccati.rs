//! Riccati and Lyapunov solvers.
//!
//! The standard DARE is solved by value iteration until the induced gain
//! stabilizes the system, then Kleinman (Newton) refinement. The generalized
//! DARE (cross terms, indefinite blocks) skips straight to Newton from a
//! stabilizing seed: a caller-supplied warm start, the deadbeat gain
//! `−B̃⁺A` when the input matrix has full row rank, or a value-iteration
//! phase otherwise.

use crate::matkit::{self, MatError, Matrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("no stabilizing Riccati solution found: {0}")]
    NotStabilizable(String),
    #[error("no admissible Riccati solution: {0}")]
    NoAdmissibleSolution(String),
    #[error("closed loop is not stable (spectral radius {rho:.12})")]
    Unstable { rho: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Mat(#[from] MatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative residual and symmetry tolerance.
    pub tol: f64,
    /// Total iteration budget across value iteration and Newton steps.
    pub max_iters: usize,
    /// `D` must satisfy `λ_min(D) > d_floor`.
    pub d_floor: f64,
    /// Closed loops with `ρ ≥ 1 − stability_margin` are treated as unstable.
    pub stability_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iters: 10_000, d_floor: 1e-12, stability_margin: 1e-9 }
    }
}

/// A linear system `x' = Ax + Bu + ε` with stage cost `xᵀQx + uᵀRu`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrInstance {
    pub a: Matrix,
    pub b: Matrix,
    pub q: Matrix,
    pub r: Matrix,
}

impl LqrInstance {
    pub fn new(a: Matrix, b: Matrix, q: Matrix, r: Matrix) -> Result<Self, RiccatiError> {
        let n = a.nrows();
        let d = b.ncols();
        if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (d, d) {
            return Err(RiccatiError::InvalidInput(format!(
                "shapes A {:?}, B {:?}, Q {:?}, R {:?}",
                a.shape(),
                b.shape(),
                q.shape(),
                r.shape()
            )));
        }
        for (name, m) in [("A", &a), ("B", &b), ("Q", &q), ("R", &r)] {
            matkit::check_finite(m).map_err(|e| RiccatiError::InvalidInput(format!("{name}: {e}")))?;
        }
        for (name, m) in [("Q", &q), ("R", &r)] {
            if !matkit::is_symmetric(m, 1e-12) {
                return Err(RiccatiError::InvalidInput(format!("{name} is not symmetric")));
            }
            if matkit::lambda_min(m)? <= 0.0 {
                return Err(RiccatiError::InvalidInput(format!("{name} is not positive definite")));
            }
        }
        Ok(Self { a, b, q, r })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn d(&self) -> usize {
        self.b.ncols()
    }

    /// `C = diag(Q, R)`.
    pub fn cost_matrix(&self) -> Matrix {
        matkit::block_diag(&[&self.q, &self.r])
    }

    /// `θ` with `θᵀ = (A, B)`, shape `(n+d) × n`.
    pub fn theta(&self) -> Matrix {
        matkit::hstack(&[&self.a, &self.b]).transpose()
    }

    pub fn with_theta(&self, theta: &Matrix) -> Result<Self, RiccatiError> {
        let (a, b) = split_theta(theta, self.n(), self.d())?;
        Self::new(a, b, self.q.clone(), self.r.clone())
    }

    /// Average cost `Tr(P_K)` of the linear policy `u = Kx`.
    pub fn policy_cost(&self, k: &Matrix) -> Result<f64, RiccatiError> {
        let ac = &self.a + &self.b * k;
        let m = &self.q + k.transpose() * &self.r * k;
        Ok(dlyap(&ac, &m, Side::Cost)?.trace())
    }
}

/// Splits `θ` (`(n+d) × n`, `θᵀ = (A, B)`) into `(A, B)`.
pub fn split_theta(theta: &Matrix, n: usize, d: usize) -> Result<(Matrix, Matrix), RiccatiError> {
    if theta.shape() != (n + d, n) {
        return Err(RiccatiError::InvalidInput(format!("theta shape {:?}, expected {:?}", theta.shape(), (n + d, n))));
    }
    let t = theta.transpose();
    Ok((matkit::block(&t, 0, 0, n, n), matkit::block(&t, 0, n, n, d)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: Matrix,
    pub k: Matrix,
    pub d: Matrix,
    pub closed_loop: Matrix,
    pub j: f64,
    pub iterations: usize,
}

/// Cost blocks `(Qc, N, Rc)` of `xᵀQc x + 2uᵀN x + uᵀRc u`, possibly indefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedCost {
    pub qc: Matrix,
    pub n: Matrix,
    pub rc: Matrix,
}

impl GeneralizedCost {
    pub fn validate(&self, tol: f64) -> Result<(), RiccatiError> {
        if !matkit::is_symmetric(&self.qc, tol) || !matkit::is_symmetric(&self.rc, tol) {
            return Err(RiccatiError::InvalidInput("cost blocks are not symmetric".into()));
        }
        if self.n.shape() != (self.rc.nrows(), self.qc.nrows()) {
            return Err(RiccatiError::InvalidInput(format!("cross term shape {:?}", self.n.shape())));
        }
        Ok(())
    }

    /// Stage-cost matrix `(I; K)ᵀ C (I; K)` of the policy `u = Kx`.
    pub fn policy_stage(&self, k: &Matrix) -> Matrix {
        let kt = k.transpose();
        matkit::symmetrize(&(&self.qc + &kt * &self.n + self.n.transpose() * k + &kt * &self.rc * k))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// `X = AᵀXA + M`
    Cost,
    /// `X = AXAᵀ + M`
    Covariance,
}

/// Discrete Lyapunov solve by Kronecker vectorization.
pub fn dlyap(ac: &Matrix, m: &Matrix, side: Side) -> Result<Matrix, RiccatiError> {
    dlyap_with_margin(ac, m, side, SolverOptions::default().stability_margin)
}

pub fn dlyap_with_margin(ac: &Matrix, m: &Matrix, side: Side, margin: f64) -> Result<Matrix, RiccatiError> {
    let n = ac.nrows();
    if !ac.is_square() || m.shape() != (n, n) {
        return Err(RiccatiError::InvalidInput(format!("dlyap shapes {:?} and {:?}", ac.shape(), m.shape())));
    }
    let rho = matkit::spectral_radius(ac)?;
    if rho >= 1.0 - margin {
        return Err(RiccatiError::Unstable { rho });
    }
    let kron = match side {
        Side::Cost => ac.transpose().kronecker(&ac.transpose()),
        Side::Covariance => ac.kronecker(ac),
    };
    let lhs = Matrix::identity(n * n, n * n) - kron;
    let x = matkit::solve_linear(&lhs, &Matrix::from_column_slice(n * n, 1, m.as_slice()))?;
    Ok(matkit::symmetrize(&Matrix::from_column_slice(n, n, x.as_slice())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub p: Matrix,
    pub sigma: Matrix,
    /// `Tr(P) − Tr(Σ·M)`, zero in exact arithmetic.
    pub trace_gap: f64,
}

/// Cost-side and covariance-side Lyapunov solutions with the trace identity `Tr(P) = Tr(ΣM)`.
pub fn steady_state_cost_and_cov(ac: &Matrix, cost_m: &Matrix) -> Result<SteadyState, RiccatiError> {
    let p = dlyap(ac, cost_m, Side::Cost)?;
    let sigma = dlyap(ac, &Matrix::identity(ac.nrows(), ac.nrows()), Side::Covariance)?;
    let trace_gap = p.trace() - (&sigma * cost_m).trace();
    Ok(SteadyState { p, sigma, trace_gap })
}

/// Right-hand side of the generalized Riccati map, with the gain it induces.
fn riccati_map(a: &Matrix, bt: &Matrix, cost: &GeneralizedCost, p: &Matrix) -> Result<(Matrix, Matrix, Matrix), MatError> {
    let d = matkit::symmetrize(&(&cost.rc + bt.transpose() * p * bt));
    let cross = bt.transpose() * p * a + &cost.n;
    let k = -matkit::solve_linear(&d, &cross)?;
    let next = &cost.qc + a.transpose() * p * a + cross.transpose() * &k;
    Ok((matkit::symmetrize(&next), k, d))
}

/// Relative residual `‖P − map(P)‖_F / (1 + ‖P‖_F)`.
pub fn riccati_residual(a: &Matrix, bt: &Matrix, cost: &GeneralizedCost, p: &Matrix) -> Result<f64, MatError> {
    let (next, _, _) = riccati_map(a, bt, cost, p)?;
    Ok((p - next).norm() / (1.0 + p.norm()))
}

enum Start<'a> {
    Gain(&'a Matrix),
    ValueIteration,
}

/// Solves the standard DARE `P = Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA`.
pub fn dare_standard(sys: &LqrInstance) -> Result<RiccatiSolution, RiccatiError> {
    dare_standard_with(sys, &SolverOptions::default())
}

pub fn dare_standard_with(sys: &LqrInstance, opts: &SolverOptions) -> Result<RiccatiSolution, RiccatiError> {
    let cost = GeneralizedCost { qc: sys.q.clone(), n: Matrix::zeros(sys.d(), sys.n()), rc: sys.r.clone() };
    solve(&sys.a, &sys.b, &cost, Start::ValueIteration, opts).map_err(RiccatiError::NotStabilizable)
}

/// Solves the generalized DARE and returns its stabilizing solution.
pub fn dare_generalized(a: &Matrix, bt: &Matrix, cost: &GeneralizedCost) -> Result<RiccatiSolution, RiccatiError> {
    dare_generalized_with(a, bt, cost, None, &SolverOptions::default())
}

/// As [`dare_generalized`], seeded from `warm` when it stabilizes `(A, B̃)`.
pub fn dare_generalized_with(
    a: &Matrix,
    bt: &Matrix,
    cost: &GeneralizedCost,
    warm: Option<&Matrix>,
    opts: &SolverOptions,
) -> Result<RiccatiSolution, RiccatiError> {
    let n = a.nrows();
    if !a.is_square() || bt.nrows() != n || cost.qc.shape() != (n, n) || cost.rc.shape() != (bt.ncols(), bt.ncols()) {
        return Err(RiccatiError::InvalidInput(format!("shapes A {:?}, B {:?}", a.shape(), bt.shape())));
    }
    cost.validate(opts.tol)?;
    if let Some(k0) = warm {
        if let Ok(sol) = solve(a, bt, cost, Start::Gain(k0), opts) {
            return Ok(sol);
        }
    }
    let deadbeat = deadbeat_gain(a, bt);
    let start = match &deadbeat {
        Some(k) => Start::Gain(k),
        None => Start::ValueIteration,
    };
    solve(a, bt, cost, start, opts).map_err(RiccatiError::NoAdmissibleSolution)
}

/// `K = −B⁺A`, which gives `A + BK = 0` when `B` has full row rank.
pub fn deadbeat_gain(a: &Matrix, b: &Matrix) -> Option<Matrix> {
    let bbt = b * b.transpose();
    let inv = matkit::inverse(&bbt).ok()?;
    let k = -(b.transpose() * inv * a);
    ((a + b * &k).norm() <= 1e-10 * (1.0 + a.norm())).then_some(k)
}

fn solve(a: &Matrix, bt: &Matrix, cost: &GeneralizedCost, start: Start<'_>, opts: &SolverOptions) -> Result<RiccatiSolution, String> {
    let mut used = 0usize;
    let k0 = match start {
        Start::Gain(k) => k.clone(),
        Start::ValueIteration => value_iteration(a, bt, cost, opts, &mut used)?,
    };
    newton(a, bt, cost, k0, opts, used)
}

/// Iterates the Riccati map from `P = Qc` until the induced gain is stabilizing and nearly fixed.
fn value_iteration(a: &Matrix, bt: &Matrix, cost: &GeneralizedCost, opts: &SolverOptions, used: &mut usize) -> Result<Matrix, String> {
    let mut p = cost.qc.clone();
    while *used < opts.max_iters {
        *used += 1;
        let (next, k, d) = riccati_map(a, bt, cost, &p).map_err(|e| e.to_string())?;
        if matkit::check_finite(&next).is_err() || next.norm() > 1e14 {
            return Err("value iteration diverged".into());
        }
        let lmin = matkit::lambda_min(&d).map_err(|e| e.to_string())?;
        if lmin <= opts.d_floor {
            return Err(format!("lambda_min(D) = {lmin:.3e} during value iteration"));
        }
        let change = (&next - &p).norm() / (1.0 + next.norm());
        p = next;
        if change < 1e-8 {
            let rho = matkit::spectral_radius(&(a + bt * &k)).map_err(|e| e.to_string())?;
            if rho < 1.0 - opts.stability_margin {
                return Ok(k);
            }
        }
    }
    Err(format!("value iteration exhausted {} iterations", opts.max_iters))
}

/// Policy evaluation: the Lyapunov solution and `D` for the gain `k`.
fn evaluate_gain(a: &Matrix, bt: &Matrix, cost: &GeneralizedCost, k: &Matrix, opts: &SolverOptions) -> Result<(Matrix, Matrix), String> {
    let ac = a + bt * k;
    let p = dlyap_with_margin(&ac, &cost.policy_stage(k), Side::Cost, opts.stability_margin).map_err(|e| e.to_string())?;
    let d = matkit::symmetrize(&(&cost.rc + bt.transpose() * &p * bt));
    let lmin = matkit::lambda_min(&d).map_err(|e| e.to_string())?;
    if lmin <= opts.d_floor {
        return Err(format!("lambda_min(D) = {lmin:.3e}"));
    }
    Ok((p, d))
}

fn newton(a: &Matrix, bt: &Matrix, cost: &GeneralizedCost, mut k: Matrix, opts: &SolverOptions, mut used: usize) -> Result<RiccatiSolution, String> {
    const NEWTON_STEPS: usize = 100;
    let mut steps = 0;
    while steps < NEWTON_STEPS && used < opts.max_iters {
        steps += 1;
        used += 1;
        let (p, d) = evaluate_gain(a, bt, cost, &k, opts)?;
        let next = -matkit::solve_linear(&d, &(bt.transpose() * &p * a + &cost.n)).map_err(|e| e.to_string())?;
        let step = (&next - &k).norm();
        let done = step <= 1e-13 * (1.0 + k.norm());
        k = next;
        if done {
            break;
        }
    }
    let (p, d) = evaluate_gain(a, bt, cost, &k, opts)?;
    let k = -matkit::solve_linear(&d, &(bt.transpose() * &p * a + &cost.n)).map_err(|e| e.to_string())?;
    let closed_loop = a + bt * &k;
    let rho = matkit::spectral_radius(&closed_loop).map_err(|e| e.to_string())?;
    if rho >= 1.0 - opts.stability_margin {
        return Err(format!("closed loop spectral radius {rho:.12}"));
    }
    let residual = riccati_residual(a, bt, cost, &p).map_err(|e| e.to_string())?;
    if residual > opts.tol {
        return Err(format!("Riccati residual {residual:.3e} after {used} iterations"));
    }
    Ok(RiccatiSolution { j: p.trace(), p, k, d, closed_loop, iterations: used })
}
