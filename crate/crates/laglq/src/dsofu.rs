//! Dichotomy search over the Lagrange multiplier, with backup procedures.
//!
//! `D` is concave on the admissible set and `D′(μ)` is the constraint value
//! of the minimizing policy, so bisection on the sign of `D′` brackets the
//! optimal multiplier. Points outside the admissible set count as
//! `D′ = −∞`.
//!
//! Besides the gradient-gap and curvature stopping rules, the search stops
//! as soon as the left end is certified ε-feasible (`0 < D′(μ_l) ≤ ε`).
//! Weak duality then already gives `J_π ≤ D(μ_l) ≤ J*`, and the gap rule
//! alone can demand brackets narrower than the `f64` spacing at `μ_l`.
//! A bracket that stops shrinking in floating point is handed to the
//! backup procedure, as if the curvature rule had fired.

use crate::extended_lqr::{self, DsofuConstants, DualPoint, ExtendedError, ExtendedLagrangianSystem, ExtendedPolicy};
use crate::matkit::{self, Matrix};
use crate::riccati::SolverOptions;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DsofuError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("D'(mu_max) = {grad} > 0: the bracket is invalid")]
    BracketInvalid { grad: f64 },
    #[error("safeguard of {iterations} iterations exceeded")]
    SafeguardExceeded { iterations: usize },
    #[error("explicit backup policy is undefined: {0}")]
    ConstructionUndefined(String),
    #[error(transparent)]
    Extended(#[from] ExtendedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsofuConfig {
    pub epsilon: f64,
    pub constants: DsofuConstants,
    pub max_iters: usize,
}

impl DsofuConfig {
    pub fn new(epsilon: f64, constants: DsofuConstants) -> Self {
        Self { epsilon, constants, max_iters: 200 }
    }

    pub fn validate(&self) -> Result<(), DsofuError> {
        let c = &self.constants;
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(DsofuError::InvalidConfig(format!("epsilon = {} not in (0, 1/2)", self.epsilon)));
        }
        for (name, v) in [("alpha", c.alpha), ("lambda0", c.lambda0), ("mu_max", c.mu_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DsofuError::InvalidConfig(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Interior,
    Dichotomy,
    BackupExplicit,
    BackupModified,
}

/// Which rule ended the main search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    NonPositiveGradientAtZero,
    GradientGap,
    CertifiedFeasible,
    Curvature,
    /// The midpoint coincided with an endpoint in floating point.
    Resolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BracketStep {
    pub mu_l: f64,
    pub mu_r: f64,
    pub grad_l: f64,
    /// `−∞` when `μ_r` is outside the admissible set.
    pub grad_r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsofuResult {
    pub policy: ExtendedPolicy,
    pub mu: f64,
    pub branch: Branch,
    pub stop: StopRule,
    /// Bisection steps, including those of the modified backup search.
    pub iterations: usize,
    /// Average cost of the returned policy under the original `C†`.
    pub value: f64,
    /// Constraint value `g` of the returned policy.
    pub feasibility: f64,
    /// `D(μ)` at the returned multiplier.
    pub dual_value: f64,
    /// Bracket after every step of the main search.
    pub bracket: Vec<BracketStep>,
}

/// Runs the dichotomy search for an ε-optimistic, ε-feasible extended policy.
pub fn ds_ofu(sys: &ExtendedLagrangianSystem, cfg: &DsofuConfig) -> Result<DsofuResult, DsofuError> {
    cfg.validate()?;
    let opts = SolverOptions::default();
    let eps = cfg.epsilon;
    let c = &cfg.constants;
    let dp0 = extended_lqr::dual_point_with(sys, 0.0, None, &opts)?;
    if dp0.grad <= 0.0 {
        return Ok(finish(dp0, Branch::Interior, StopRule::NonPositiveGradientAtZero, 0, vec![]));
    }
    let mut mu_r = c.mu_max;
    let mut grad_r = match extended_lqr::dual_point_with(sys, mu_r, Some(&dp0.policy.ktilde), &opts) {
        Ok(dp) if dp.grad > 0.0 => return Err(DsofuError::BracketInvalid { grad: dp.grad }),
        Ok(dp) => dp.grad,
        Err(ExtendedError::OutsideAdmissibleSet { .. }) => f64::NEG_INFINITY,
        Err(e) => return Err(e.into()),
    };
    let mut left = dp0;
    let mut bracket = vec![BracketStep { mu_l: 0.0, mu_r, grad_l: left.grad, grad_r }];
    let mut iterations = 0;
    loop {
        let lmin = left.lambda_min_d;
        if c.alpha * (mu_r - left.mu) / lmin < eps {
            return Ok(finish(left, Branch::Dichotomy, StopRule::GradientGap, iterations, bracket));
        }
        if left.grad <= eps {
            return Ok(finish(left, Branch::Dichotomy, StopRule::CertifiedFeasible, iterations, bracket));
        }
        if lmin < c.lambda0 * eps * eps {
            return backup(sys, cfg, left, iterations, bracket, StopRule::Curvature);
        }
        let mid = 0.5 * (left.mu + mu_r);
        if mid <= left.mu || mid >= mu_r {
            // the curvature threshold sits below what f64 can resolve here
            return backup(sys, cfg, left, iterations, bracket, StopRule::Resolution);
        }
        if iterations >= cfg.max_iters {
            return Err(DsofuError::SafeguardExceeded { iterations });
        }
        iterations += 1;
        match extended_lqr::dual_point_with(sys, mid, Some(&left.policy.ktilde), &opts) {
            Ok(dp) if dp.grad > 0.0 => left = dp,
            Ok(dp) => {
                mu_r = mid;
                grad_r = dp.grad;
            }
            Err(ExtendedError::OutsideAdmissibleSet { .. }) => {
                mu_r = mid;
                grad_r = f64::NEG_INFINITY;
            }
            Err(e) => return Err(e.into()),
        }
        bracket.push(BracketStep { mu_l: left.mu, mu_r, grad_l: left.grad, grad_r });
    }
}

fn finish(dp: DualPoint, branch: Branch, stop: StopRule, iterations: usize, bracket: Vec<BracketStep>) -> DsofuResult {
    DsofuResult {
        mu: dp.mu,
        value: dp.j_pi,
        feasibility: dp.grad,
        dual_value: dp.value,
        policy: dp.policy,
        branch,
        stop,
        iterations,
        bracket,
    }
}

fn backup(
    sys: &ExtendedLagrangianSystem,
    cfg: &DsofuConfig,
    left: DualPoint,
    iterations: usize,
    bracket: Vec<BracketStep>,
    stop: StopRule,
) -> Result<DsofuResult, DsofuError> {
    let (lker, _) = extended_lqr::lambda_ker(sys, &left.d_mu)?;
    if lker <= cfg.constants.lambda0.sqrt() * cfg.epsilon {
        let policy = backup_explicit(sys, left.mu, &left)?;
        let eval = extended_lqr::evaluate_policy(sys, &policy.ktilde)?;
        return Ok(DsofuResult {
            policy,
            mu: left.mu,
            branch: Branch::BackupExplicit,
            stop,
            iterations,
            value: eval.j,
            feasibility: eval.g,
            dual_value: left.value,
            bracket,
        });
    }
    let mut res = backup_modified(sys, left.mu, cfg)?;
    res.iterations += iterations;
    res.bracket = bracket;
    Ok(res)
}

/// Explicit feasible policy `K_ε = K̃_μ̄ + η·v·xᵀ` for kernel-degenerate `D_μ̄`.
///
/// `v ∈ ker(B̃)` leaves the closed loop unchanged, so the constraint moves by
/// `2η·vᵀYΣx + η²·vᵀZv·xᵀΣx`. Choosing `x ⊥ ΣYᵀv` kills the linear term
/// and `η` cancels `D′(μ̄)` exactly.
pub fn backup_explicit(sys: &ExtendedLagrangianSystem, mu_bar: f64, dp: &DualPoint) -> Result<ExtendedPolicy, DsofuError> {
    let _ = mu_bar;
    if dp.grad <= 0.0 {
        return Ok(dp.policy.clone());
    }
    let n = sys.n();
    let m = sys.m();
    let (_, v) = extended_lqr::lambda_ker(sys, &dp.d_mu)?;
    let z = matkit::block(&sys.cg, n, n, m, m);
    let vzv = (v.transpose() * &z * &v)[(0, 0)];
    if -vzv <= 1e-12 {
        return Err(DsofuError::ConstructionUndefined(format!("v'Zv = {vzv:.3e} is not negative")));
    }
    let k = &dp.policy.ktilde;
    let y = matkit::block(&sys.cg, n, 0, m, n + m) * extended_lqr::lift(k);
    let sigma = crate::riccati::dlyap(&dp.closed_loop, &Matrix::identity(n, n), crate::riccati::Side::Covariance)
        .map_err(ExtendedError::from)?;
    let w = &sigma * y.transpose() * &v;
    let x = orthogonal_unit(&w).ok_or_else(|| {
        DsofuError::ConstructionUndefined(format!("no unit state direction orthogonal to Sigma Y' v (n = {n})"))
    })?;
    let xsx = (x.transpose() * &sigma * &x)[(0, 0)];
    let eta = (dp.grad / (-vzv * xsx)).sqrt();
    Ok(ExtendedPolicy::new(k + (&v * x.transpose()) * eta, sys.d()))
}

/// A unit vector orthogonal to `w`, or any unit vector when `w` vanishes.
fn orthogonal_unit(w: &nalgebra::DVector<f64>) -> Option<nalgebra::DVector<f64>> {
    let n = w.len();
    let norm = w.norm();
    if norm <= 1e-14 {
        let mut e = nalgebra::DVector::zeros(n);
        e[0] = 1.0;
        return Some(e);
    }
    if n < 2 {
        return None;
    }
    let wn = w / norm;
    let i = (0..n).min_by(|&a, &b| wn[a].abs().total_cmp(&wn[b].abs())).unwrap_or(0);
    let mut e = nalgebra::DVector::zeros(n);
    e[i] = 1.0;
    let x = &e - &wn * wn[i];
    Some(&x / x.norm())
}

/// `Δ = MᵀM` with `M = [I − Â, −B̃]`, the deviation `x − (Âx + B̃ũ)` from the deadbeat move.
pub fn curvature_perturbation(sys: &ExtendedLagrangianSystem) -> Matrix {
    let n = sys.n();
    let mrow = matkit::hstack(&[&(Matrix::identity(n, n) - &sys.ahat), &(-&sys.btilde)]);
    mrow.transpose() * mrow
}

/// The modified system `C† + ηΔ` used by [`backup_modified`].
pub fn modified_system(sys: &ExtendedLagrangianSystem, cfg: &DsofuConfig) -> ExtendedLagrangianSystem {
    let eta = cfg.constants.eta(cfg.epsilon);
    sys.with_cdagger(&sys.cdagger + curvature_perturbation(sys) * eta)
}

/// Dichotomy on the modified system over `[0, μ̄]` with the `α_mod(μ_r − μ_l) < ε³` stop.
pub fn backup_modified(sys: &ExtendedLagrangianSystem, mu_bar: f64, cfg: &DsofuConfig) -> Result<DsofuResult, DsofuError> {
    let opts = SolverOptions::default();
    let eps3 = cfg.epsilon.powi(3);
    let alpha_mod = cfg.constants.alpha_mod;
    let modsys = modified_system(sys, cfg);
    let mut left = extended_lqr::dual_point_with(&modsys, 0.0, None, &opts)?;
    let mut mu_r = mu_bar;
    let mut iterations = 0;
    let mut stop = StopRule::GradientGap;
    while alpha_mod * (mu_r - left.mu) >= eps3 {
        let mid = 0.5 * (left.mu + mu_r);
        if mid <= left.mu || mid >= mu_r {
            stop = StopRule::Resolution;
            break;
        }
        if iterations >= cfg.max_iters {
            return Err(DsofuError::SafeguardExceeded { iterations });
        }
        iterations += 1;
        match extended_lqr::dual_point_with(&modsys, mid, Some(&left.policy.ktilde), &opts) {
            Ok(dp) if dp.grad > 0.0 => left = dp,
            Ok(_) | Err(ExtendedError::OutsideAdmissibleSet { .. }) => mu_r = mid,
            Err(e) => return Err(e.into()),
        }
    }
    let eval = extended_lqr::evaluate_policy(sys, &left.policy.ktilde)?;
    Ok(DsofuResult {
        mu: left.mu,
        value: eval.j,
        feasibility: eval.g,
        dual_value: left.value,
        policy: left.policy,
        branch: Branch::BackupModified,
        stop,
        iterations,
        bracket: vec![],
    })
}

/// Worst-case iteration count of the two-phase search, up to an additive constant.
pub fn iteration_bound(cfg: &DsofuConfig) -> f64 {
    let c = &cfg.constants;
    let inv = (1.0 / cfg.epsilon).log2().ceil();
    (c.alpha / c.lambda0).log2().ceil() + 3.0 * inv + c.alpha_mod.log2().ceil().max(0.0) + 2.0 * inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extended_lqr::{build_extended, dsofu_constants};
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, e: &[f64]) -> Matrix {
        matkit::from_rows(rows, cols, e).unwrap()
    }

    fn config(sys: &ExtendedLagrangianSystem, eps: f64) -> DsofuConfig {
        let c = sys.cost_matrix();
        let d_bound = 10.0 * c.trace();
        DsofuConfig::new(eps, dsofu_constants(d_bound, &c, sys).unwrap())
    }

    #[test]
    fn non_positive_gradient_returns_interior() {
        // D'(0) = 0.25 − β²V⁻¹ < 0 for β = 3, V = I
        let sys = build_extended(&m(2, 1, &[0.5, 1.0]), 3.0, &Matrix::identity(2, 2), &m(1, 1, &[1.0]), &m(1, 1, &[1.0])).unwrap();
        let res = ds_ofu(&sys, &config(&sys, 1e-3)).unwrap();
        assert_eq!(res.branch, Branch::Interior);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.mu, 0.0);
        assert_abs_diff_eq!(res.policy.ktilde, m(2, 1, &[0.0, -0.5]), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let sys = build_extended(&m(2, 1, &[0.5, 1.0]), 1.0, &Matrix::identity(2, 2), &m(1, 1, &[1.0]), &m(1, 1, &[1.0])).unwrap();
        let mut cfg = config(&sys, 0.1);
        cfg.epsilon = 0.5;
        assert!(matches!(ds_ofu(&sys, &cfg), Err(DsofuError::InvalidConfig(_))));
        cfg.epsilon = 0.1;
        cfg.constants.lambda0 = 0.0;
        assert!(matches!(ds_ofu(&sys, &cfg), Err(DsofuError::InvalidConfig(_))));
    }

    #[test]
    fn bracket_is_valid_and_halves() {
        let theta = m(3, 2, &[1.2, 0.1, -0.3, 0.8, 0.5, 0.4]);
        let sys = build_extended(&theta, 0.3, &(Matrix::identity(3, 3) * 2.0), &Matrix::identity(2, 2), &m(1, 1, &[1.0])).unwrap();
        let cfg = config(&sys, 1e-8);
        let res = ds_ofu(&sys, &cfg).unwrap();
        assert_eq!(res.branch, Branch::Dichotomy);
        assert!(res.feasibility <= cfg.epsilon && res.feasibility > 0.0);
        for s in &res.bracket {
            assert!(s.grad_l >= 0.0 && s.grad_r <= 0.0);
        }
        for w in res.bracket.windows(2) {
            let (a, b) = (w[0].mu_r - w[0].mu_l, w[1].mu_r - w[1].mu_l);
            // exact up to rounding of the endpoints
            assert!((b - 0.5 * a).abs() <= 4.0 * f64::EPSILON * w[0].mu_r, "width {a} -> {b}");
        }
        assert!((res.iterations as f64) <= iteration_bound(&cfg) + cfg.constants.mu_max.log2().ceil() + 2.0);
    }

    #[test]
    fn explicit_backup_cancels_constraint() {
        // B̂ = 0: ker(B̃) is the control direction, whose D block degenerates at μ = 1
        let theta = m(3, 2, &[0.9, 0.0, 0.2, 0.7, 0.0, 0.0]);
        let vinv = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.01, 0.01, 1.0]));
        let v = matkit::inverse(&vinv).unwrap();
        let sys = build_extended(&theta, 1.0, &v, &Matrix::identity(2, 2), &m(1, 1, &[1.0])).unwrap();
        let dp = crate::extended_lqr::dual_point(&sys, 0.9).unwrap();
        assert!(dp.grad > 0.0);
        let pol = backup_explicit(&sys, 0.9, &dp).unwrap();
        let eval = crate::extended_lqr::evaluate_policy(&sys, &pol.ktilde).unwrap();
        assert!(eval.g.abs() <= 1e-8, "g = {}", eval.g);
        // closed loop is untouched by a kernel direction
        assert_abs_diff_eq!(sys.closed_loop(&pol.ktilde), dp.closed_loop, epsilon = 1e-12);
        let (lker, v) = crate::extended_lqr::lambda_ker(&sys, &dp.d_mu).unwrap();
        let z = matkit::block(&sys.cg, 2, 2, 3, 3);
        let vzv = (v.transpose() * &z * &v)[(0, 0)];
        assert_abs_diff_eq!(eval.j - dp.value, lker * dp.grad / -vzv, epsilon = 1e-9);
    }

    #[test]
    fn explicit_backup_degenerate_gradient() {
        let sys = build_extended(&m(2, 1, &[0.5, 0.0]), 3.0, &Matrix::identity(2, 2), &m(1, 1, &[1.0]), &m(1, 1, &[1.0])).unwrap();
        let dp = crate::extended_lqr::dual_point(&sys, 0.0).unwrap();
        assert!(dp.grad <= 0.0);
        assert_eq!(backup_explicit(&sys, 0.0, &dp).unwrap(), dp.policy);
    }

    #[test]
    fn perturbation_is_psd_and_vanishes_on_deadbeat() {
        let theta = m(3, 2, &[1.2, 0.1, -0.3, 0.8, 0.5, 0.4]);
        let sys = build_extended(&theta, 0.3, &Matrix::identity(3, 3), &Matrix::identity(2, 2), &m(1, 1, &[1.0])).unwrap();
        let delta = curvature_perturbation(&sys);
        assert!(matkit::lambda_min(&delta).unwrap() >= -1e-12);
        assert_abs_diff_eq!(sys.closed_loop(&sys.kbar()), Matrix::zeros(2, 2), epsilon = 0.0);
    }

    #[test]
    fn orthogonal_direction() {
        let w = nalgebra::DVector::from_vec(vec![0.3, -1.0, 0.2]);
        let x = orthogonal_unit(&w).unwrap();
        assert_abs_diff_eq!(x.dot(&w), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x.norm(), 1.0, epsilon = 1e-15);
        assert!(orthogonal_unit(&nalgebra::DVector::from_vec(vec![2.0])).is_none());
        assert!(orthogonal_unit(&nalgebra::DVector::from_vec(vec![0.0])).is_some());
    }
}
