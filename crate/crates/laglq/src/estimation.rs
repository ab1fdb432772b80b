//! Regularized least squares for `θ = (A, B)ᵀ` and its confidence ellipsoid.
//!
//! With regressors `z_s = (x_s, u_s)`:
//! `V_t = λI + Σ z_s z_sᵀ`, `S_t = λθ₀ + Σ z_s x_{s+1}ᵀ`, `θ̂_t = V_t⁻¹ S_t`.

use crate::matkit::{self, MatError, Matrix};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

/// Full log-determinant refresh period.
const REFRESH_EVERY: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusParams {
    /// Noise sub-Gaussian scale.
    pub sigma: f64,
    /// Confidence level used inside the radius (δ/4 by default).
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceSet {
    pub theta_hat: Matrix,
    pub v: Matrix,
    pub s: Matrix,
    pub beta: f64,
    pub lambda: f64,
    pub theta0: Matrix,
    pub eps0: f64,
    pub log_det_v: f64,
    pub params: RadiusParams,
    pub updates: usize,
    since_refresh: usize,
}

impl ConfidenceSet {
    /// Empty design: `V = λI`, `θ̂ = θ₀`.
    pub fn new(theta0: Matrix, lambda: f64, eps0: f64, params: RadiusParams) -> Self {
        let p = theta0.nrows();
        let v = Matrix::identity(p, p) * lambda;
        let s = &theta0 * lambda;
        let mut cs = Self {
            theta_hat: theta0.clone(),
            log_det_v: p as f64 * lambda.ln(),
            v,
            s,
            beta: 0.0,
            lambda,
            theta0,
            eps0,
            params,
            updates: 0,
            since_refresh: 0,
        };
        cs.beta = beta_radius(&cs, params.sigma, params.delta, cs.n());
        cs
    }

    /// State dimension `n`.
    pub fn n(&self) -> usize {
        self.theta0.ncols()
    }

    /// Regressor dimension `n + d`.
    pub fn p(&self) -> usize {
        self.theta0.nrows()
    }

    pub fn log_det_lambda(&self) -> f64 {
        self.p() as f64 * self.lambda.ln()
    }

    /// `‖z‖²_{V⁻¹}` under the current design.
    pub fn z_norm_sq(&self, z: &DVector<f64>) -> f64 {
        match nalgebra::Cholesky::new(self.v.clone()) {
            Some(ch) => z.dot(&ch.solve(z)),
            None => f64::INFINITY,
        }
    }

    /// Recomputes `θ̂` and `log det V` from `V` and `S`.
    pub fn recompute(&mut self) -> Result<(), MatError> {
        let ch = nalgebra::Cholesky::new(matkit::symmetrize(&self.v)).ok_or(MatError::SingularMatrix { pivot: 0.0, threshold: 0.0 })?;
        self.theta_hat = ch.solve(&self.s);
        self.log_det_v = 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        self.since_refresh = 0;
        Ok(())
    }

    /// `‖V^{1/2}Δ‖_F`, the weighted Frobenius norm.
    pub fn weighted_norm(&self, delta: &Matrix) -> f64 {
        (delta.transpose() * &self.v * delta).trace().max(0.0).sqrt()
    }
}

/// Adds one transition; returns `‖z‖²_{V⁻¹}` measured before the update.
pub fn rls_update(cs: &mut ConfidenceSet, z: &DVector<f64>, x_next: &DVector<f64>) -> f64 {
    assert_eq!(z.len(), cs.p(), "regressor dimension");
    assert_eq!(x_next.len(), cs.n(), "state dimension");
    let ch = nalgebra::Cholesky::new(cs.v.clone()).expect("design matrix stays positive definite");
    let w = z.dot(&ch.solve(z));
    cs.v += z * z.transpose();
    cs.s += z * x_next.transpose();
    cs.updates += 1;
    cs.since_refresh += 1;
    if cs.since_refresh >= REFRESH_EVERY {
        cs.recompute().expect("design matrix stays positive definite");
    } else {
        cs.log_det_v += w.ln_1p();
        let ch = nalgebra::Cholesky::new(cs.v.clone()).expect("design matrix stays positive definite");
        cs.theta_hat = ch.solve(&cs.s);
    }
    cs.beta = beta_radius(cs, cs.params.sigma, cs.params.delta, cs.n());
    w
}

/// `β = σ√(2n·log(det(V)^{1/2}·n / (det(λI)^{1/2}·δ))) + √λ·ε₀`.
pub fn beta_radius(cs: &ConfidenceSet, sigma: f64, delta: f64, n: usize) -> f64 {
    let log_arg = 0.5 * (cs.log_det_v - cs.log_det_lambda()) + (n as f64 / delta).ln();
    sigma * (2.0 * n as f64 * log_arg.max(0.0)).sqrt() + cs.lambda.sqrt() * cs.eps0
}

/// `λ = (2nσ²/ε₀²)·(log(4n/δ) + (n+d)·log(1 + κX²T))`.
#[allow(clippy::too_many_arguments)]
pub fn lambda_reg(eps0: f64, sigma: f64, delta: f64, n: usize, d: usize, kappa: f64, x_bound: f64, horizon: f64) -> f64 {
    let nf = n as f64;
    2.0 * nf * sigma * sigma / (eps0 * eps0) * ((4.0 * nf / delta).ln() + (n + d) as f64 * (kappa * x_bound * x_bound * horizon).ln_1p())
}

/// State-norm bound `X = 20σ√(κ‖P*‖₂·log(4T/δ) / λ_min(C))`.
pub fn x_bound(sigma: f64, kappa: f64, p_star_norm2: f64, horizon: f64, delta: f64, lambda_min_c: f64) -> f64 {
    20.0 * sigma * (kappa * p_star_norm2 * (4.0 * horizon / delta).ln() / lambda_min_c).sqrt()
}

/// True once `det V` has at least doubled since the episode began.
pub fn should_update(cs: &ConfidenceSet, log_det_at_episode_start: f64) -> bool {
    cs.log_det_v >= log_det_at_episode_start + LN_2
}

/// Upper bound `(n+d)·log₂(1 + T·X²κ/λ)` on the number of determinant doublings.
pub fn episode_bound(p: usize, horizon: f64, x_bound: f64, kappa: f64, lambda: f64) -> f64 {
    p as f64 * (horizon * x_bound * x_bound * kappa / lambda).ln_1p() / LN_2
}

/// `‖V^{1/2}(θ − θ̂)‖_F ≤ β`, with a relative slack of `1e-9`.
pub fn ellipsoid_contains(cs: &ConfidenceSet, theta: &Matrix) -> bool {
    cs.weighted_norm(&(theta - &cs.theta_hat)) <= cs.beta * (1.0 + 1e-9)
}

/// Frobenius ball `{θ : ‖θ − θ₀‖_F ≤ ε₀}` of stabilizable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizingSet {
    pub theta0: Matrix,
    pub eps0: f64,
}

/// Plain RLS fit on warm-up data with an empirical Frobenius radius.
///
/// With residual scale `σ̂` and `a_i` the eigenvalues of `σ̂²V⁻¹`, each
/// repeated `n` times, the squared Frobenius error of a Gaussian linear
/// regression is a weighted chi-square. The radius is its Laurent-Massart
/// upper quantile at level `delta`:
/// `ε₀² = Σa + 2√(Σa²·L) + 2·max(a)·L` with `L = log(1/δ)`.
/// It is a plug-in estimate, not a certificate.
pub fn fit_stabilizing_set(zs: &[DVector<f64>], xs_next: &[DVector<f64>], delta: f64) -> Result<StabilizingSet, MatError> {
    assert_eq!(zs.len(), xs_next.len());
    assert!(!zs.is_empty(), "warm-up data is empty");
    let p = zs[0].len();
    let n = xs_next[0].len();
    let params = RadiusParams { sigma: 1.0, delta };
    let mut cs = ConfidenceSet::new(Matrix::zeros(p, n), 1.0, 0.0, params);
    for (z, x) in zs.iter().zip(xs_next) {
        rls_update(&mut cs, z, x);
    }
    cs.recompute()?;
    let mut sq = 0.0;
    for (z, x) in zs.iter().zip(xs_next) {
        let r = x - cs.theta_hat.transpose() * z;
        sq += r.norm_squared();
    }
    let s2 = sq / (zs.len() * n) as f64;
    let eig = matkit::sym_eig(&cs.v)?;
    let a: Vec<f64> = eig.eigenvalues.iter().map(|l| s2 / l).collect();
    let nf = n as f64;
    let sum = nf * a.iter().sum::<f64>();
    let sum_sq = nf * a.iter().map(|x| x * x).sum::<f64>();
    let amax = a.iter().copied().fold(0.0, f64::max);
    let l = (1.0 / delta).ln();
    let eps0 = (sum + 2.0 * (sum_sq * l).sqrt() + 2.0 * amax * l).sqrt();
    Ok(StabilizingSet { theta0: cs.theta_hat, eps0 })
}
