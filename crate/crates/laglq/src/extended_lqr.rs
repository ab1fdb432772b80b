//! Extended LQR with a perturbation control and its Lagrangian relaxation.
//!
//! The estimated system `x' = Âx + B̂u + ε` is augmented with a perturbation
//! input `w` so that `x' = Âx + B̃ũ + ε` with `B̃ = [B̂, I]` and `ũ = (u, w)`.
//! Blocks are always ordered `(x, u, w)`; `z = (x, u)`.
//!
//! For a multiplier `μ`, the Lagrangian cost is `C_μ = C† + μ·C_g` with
//! `C† = diag(Q, R, 0)` and `C_g = diag(−β²V⁻¹, I)`. Its dual function is
//! `D(μ) = Tr(P_μ)` and `D′(μ)` is the relaxed constraint evaluated at the
//! minimizing policy.

use crate::matkit::{self, Complex, MatError, Matrix};
use crate::riccati::{self, GeneralizedCost, RiccatiError, Side, SolverOptions};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtendedError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mu = {mu} is outside the admissible set: {reason}")]
    OutsideAdmissibleSet { mu: f64, reason: String },
    #[error("closed loop has an eigenvalue of modulus {modulus:.12} on the unit circle")]
    ClosedLoopOnUnitCircle { modulus: f64 },
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Mat(#[from] MatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedLagrangianSystem {
    pub ahat: Matrix,
    pub bhat: Matrix,
    pub btilde: Matrix,
    pub cdagger: Matrix,
    pub cg: Matrix,
    pub beta: f64,
    pub vinv: Matrix,
    pub q: Matrix,
    pub r: Matrix,
}

/// Assembles the extended system from `θ̂` (`(n+d) × n`, `θ̂ᵀ = (Â, B̂)`) and the design matrix `V`.
pub fn build_extended(theta_hat: &Matrix, beta: f64, v: &Matrix, q: &Matrix, r: &Matrix) -> Result<ExtendedLagrangianSystem, ExtendedError> {
    let n = q.nrows();
    let d = r.nrows();
    if theta_hat.shape() != (n + d, n) || v.shape() != (n + d, n + d) || !q.is_square() || !r.is_square() {
        return Err(ExtendedError::DimensionMismatch(format!(
            "theta {:?}, V {:?}, Q {:?}, R {:?}",
            theta_hat.shape(),
            v.shape(),
            q.shape(),
            r.shape()
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(ExtendedError::InvalidParameter(format!("beta = {beta}")));
    }
    if matkit::lambda_min(v)? <= 0.0 {
        return Err(ExtendedError::InvalidParameter("V is not positive definite".into()));
    }
    let vinv = matkit::symmetrize(&matkit::inverse(v)?);
    let (ahat, bhat) = riccati::split_theta(theta_hat, n, d)?;
    Ok(assemble(ahat, bhat, beta, vinv, q.clone(), r.clone()))
}

fn assemble(ahat: Matrix, bhat: Matrix, beta: f64, vinv: Matrix, q: Matrix, r: Matrix) -> ExtendedLagrangianSystem {
    let n = ahat.nrows();
    let id = Matrix::identity(n, n);
    let btilde = matkit::hstack(&[&bhat, &id]);
    let cdagger = matkit::block_diag(&[&q, &r, &Matrix::zeros(n, n)]);
    let cg = matkit::block_diag(&[&(&vinv * -(beta * beta)), &id]);
    ExtendedLagrangianSystem { ahat, bhat, btilde, cdagger, cg, beta, vinv, q, r }
}

impl ExtendedLagrangianSystem {
    pub fn n(&self) -> usize {
        self.ahat.nrows()
    }

    pub fn d(&self) -> usize {
        self.bhat.ncols()
    }

    /// Extended control dimension `n + d`.
    pub fn m(&self) -> usize {
        self.n() + self.d()
    }

    /// Same dynamics and constraint, different objective matrix.
    pub fn with_cdagger(&self, cdagger: Matrix) -> Self {
        Self { cdagger, ..self.clone() }
    }

    /// `C = diag(Q, R)`.
    pub fn cost_matrix(&self) -> Matrix {
        matkit::block_diag(&[&self.q, &self.r])
    }

    /// `C_μ = C† + μ·C_g`.
    pub fn lagrangian(&self, mu: f64) -> Matrix {
        &self.cdagger + &self.cg * mu
    }

    /// The deadbeat gain `K̄ = (0; −Â)`, which gives `Â + B̃K̄ = 0`.
    pub fn kbar(&self) -> Matrix {
        matkit::vstack(&[&Matrix::zeros(self.d(), self.n()), &(-&self.ahat)])
    }

    pub fn closed_loop(&self, ktilde: &Matrix) -> Matrix {
        &self.ahat + &self.btilde * ktilde
    }

    pub fn kernel_basis(&self) -> Result<Matrix, MatError> {
        matkit::kernel_basis(&self.btilde, 1e-12)
    }
}

/// Splits a full `(x, ũ)` quadratic form into state, cross and control blocks.
pub fn split_blocks(c: &Matrix, n: usize) -> GeneralizedCost {
    let m = c.nrows() - n;
    GeneralizedCost {
        qc: matkit::block(c, 0, 0, n, n),
        n: matkit::block(c, n, 0, m, n),
        rc: matkit::block(c, n, n, m, m),
    }
}

/// `(Q_μ, N_μ, R_μ)` blocks of `C_μ`.
pub fn cost_split(sys: &ExtendedLagrangianSystem, mu: f64) -> GeneralizedCost {
    split_blocks(&sys.lagrangian(mu), sys.n())
}

/// An extended linear policy `ũ = K̃x`, `K̃ = (K_u; K_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedPolicy {
    pub ktilde: Matrix,
    pub d: usize,
}

impl ExtendedPolicy {
    pub fn new(ktilde: Matrix, d: usize) -> Self {
        assert!(ktilde.nrows() > d, "extended gain needs a perturbation block");
        Self { ktilde, d }
    }

    pub fn ku(&self) -> Matrix {
        matkit::block(&self.ktilde, 0, 0, self.d, self.ktilde.ncols())
    }

    pub fn kw(&self) -> Matrix {
        let n = self.ktilde.ncols();
        matkit::block(&self.ktilde, self.d, 0, n, n)
    }
}

/// `(I; K)`.
pub fn lift(k: &Matrix) -> Matrix {
    matkit::vstack(&[&Matrix::identity(k.ncols(), k.ncols()), k])
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    /// Average cost under `C†`.
    pub j: f64,
    /// Relaxed constraint value under `C_g`.
    pub g: f64,
    /// Stationary state covariance `Σ = A_cΣA_cᵀ + I`.
    pub sigma: Matrix,
}

/// Average cost and constraint of an arbitrary stabilizing extended policy.
pub fn evaluate_policy(sys: &ExtendedLagrangianSystem, ktilde: &Matrix) -> Result<PolicyEvaluation, ExtendedError> {
    let ac = sys.closed_loop(ktilde);
    let l = lift(ktilde);
    let sigma = riccati::dlyap(&ac, &Matrix::identity(sys.n(), sys.n()), Side::Covariance)?;
    let j = (&sigma * (l.transpose() * &sys.cdagger * &l)).trace();
    let g = (&sigma * (l.transpose() * &sys.cg * &l)).trace();
    Ok(PolicyEvaluation { j, g, sigma })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualPoint {
    pub mu: f64,
    pub p: Matrix,
    pub policy: ExtendedPolicy,
    pub d_mu: Matrix,
    pub g_mu: Matrix,
    pub closed_loop: Matrix,
    /// `D(μ) = Tr(P_μ)`
    pub value: f64,
    /// `D′(μ) = Tr(G_μ)`
    pub grad: f64,
    /// Average cost of the minimizing policy under `C†`.
    pub j_pi: f64,
    pub lambda_min_d: f64,
}

/// Solves the Lagrangian extended LQR at `μ`.
pub fn dual_point(sys: &ExtendedLagrangianSystem, mu: f64) -> Result<DualPoint, ExtendedError> {
    dual_point_with(sys, mu, None, &SolverOptions::default())
}

/// As [`dual_point`], warm-started from a previously computed gain.
///
/// Falls back to `K̄ = (0; −Â)` when the warm start does not lead to an
/// admissible solution.
pub fn dual_point_with(sys: &ExtendedLagrangianSystem, mu: f64, warm: Option<&Matrix>, opts: &SolverOptions) -> Result<DualPoint, ExtendedError> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(ExtendedError::InvalidParameter(format!("mu = {mu}")));
    }
    let cost = cost_split(sys, mu);
    let kbar = sys.kbar();
    let outside = |e: RiccatiError| ExtendedError::OutsideAdmissibleSet { mu, reason: e.to_string() };
    let sol = match warm {
        Some(k0) => riccati::dare_generalized_with(&sys.ahat, &sys.btilde, &cost, Some(k0), opts)
            .or_else(|_| riccati::dare_generalized_with(&sys.ahat, &sys.btilde, &cost, Some(&kbar), opts)),
        None => riccati::dare_generalized_with(&sys.ahat, &sys.btilde, &cost, Some(&kbar), opts),
    }
    .map_err(outside)?;
    let l = lift(&sol.k);
    let g_mu = riccati::dlyap_with_margin(&sol.closed_loop, &(l.transpose() * &sys.cg * &l), Side::Cost, opts.stability_margin)
        .map_err(outside)?;
    let j_mat = riccati::dlyap_with_margin(&sol.closed_loop, &(l.transpose() * &sys.cdagger * &l), Side::Cost, opts.stability_margin)
        .map_err(outside)?;
    let lambda_min_d = matkit::lambda_min(&sol.d)?;
    Ok(DualPoint {
        mu,
        value: sol.j,
        grad: g_mu.trace(),
        j_pi: j_mat.trace(),
        policy: ExtendedPolicy::new(sol.k, sys.d()),
        p: sol.p,
        d_mu: sol.d,
        g_mu,
        closed_loop: sol.closed_loop,
        lambda_min_d,
    })
}

/// `μ_max = β⁻²·λ_max(C)·λ_max(V)`; the admissible set lies inside `[0, μ_max]`.
pub fn mu_max(sys: &ExtendedLagrangianSystem, c: &Matrix, v: &Matrix) -> Result<f64, ExtendedError> {
    Ok(matkit::lambda_max(c)? * matkit::lambda_max(v)? / (sys.beta * sys.beta))
}

/// Conservative constants driving the dichotomy stopping rules.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DsofuConstants {
    pub alpha: f64,
    pub lambda0: f64,
    pub mu_max: f64,
    pub kappa: f64,
    pub sigma2_btilde: f64,
    pub c_mu_max: f64,
    pub alpha_mod: f64,
    pub lambda_min_c: f64,
}

impl DsofuConstants {
    /// Weight of the curvature-restoring perturbation used by the modified backup system.
    pub fn eta(&self, epsilon: f64) -> f64 {
        let k = self.kappa;
        let a = self.c_mu_max / self.sigma2_btilde;
        let b = (self.lambda_min_c / (2.0 * k)).min(1.0) / (2.0 * k * k);
        a.min(b) * epsilon
    }
}

/// Computes `α`, `λ₀`, `μ_max` and the backup constants from the cost bound `D ≥ Tr(P*)`.
pub fn dsofu_constants(d_bound: f64, c: &Matrix, sys: &ExtendedLagrangianSystem) -> Result<DsofuConstants, ExtendedError> {
    if !(d_bound > 0.0) {
        return Err(ExtendedError::InvalidParameter(format!("D bound = {d_bound}")));
    }
    let n = sys.n() as i32;
    let lmin_c = matkit::lambda_min(c)?;
    let lmax_c = matkit::lambda_max(c)?;
    let kappa = d_bound / lmin_c;
    let cg2 = matkit::norm2(&sys.cg);
    let a2 = matkit::norm2(&sys.ahat);
    let b2 = matkit::norm2(&sys.bhat);
    let bt2 = matkit::norm2(&sys.btilde);
    let shape = ((2.0 + a2 * b2) * (1.0 + b2)).powi(2);
    let alpha = (cg2 / 2.0).max(1.0) * 8.0 * cg2 * kappa.powi(4) * shape;
    let sigma2_btilde = matkit::min_nonzero_gram_eig(&sys.btilde, 1e-12)?;
    // λ_max(V) = 1 / λ_min(V⁻¹)
    let mu_max = lmax_c / (matkit::lambda_min(&sys.vinv)? * sys.beta * sys.beta);
    let c_mu_max = (lmax_c + mu_max) * (1.0 + bt2 * bt2 * (1.0 + a2 * a2));
    let first = lmin_c / (2.0 * bt2 * bt2 * d_bound.max(1.0));
    let inner = ((lmin_c / (2.0 * kappa)).min(1.0) * sigma2_btilde / (2.0 * kappa * kappa * c_mu_max)).min(1.0);
    let second = (inner / (8f64.powi(2 * n + 1) * kappa.powi(2 * n))).powi(2);
    let lambda0 = first.min(second);
    let alpha_mod = 64.0 * cg2 * cg2 * kappa.powi(4) * shape / (lmin_c / (1.0 + b2).powi(2)).min(lambda0.sqrt() / 8.0);
    Ok(DsofuConstants { alpha, lambda0, mu_max, kappa, sigma2_btilde, c_mu_max, alpha_mod, lambda_min_c: lmin_c })
}

/// Smallest eigenvalue of `D` restricted to `ker(B̃)`, with its unit minimizing direction.
pub fn lambda_ker(sys: &ExtendedLagrangianSystem, d: &Matrix) -> Result<(f64, nalgebra::DVector<f64>), ExtendedError> {
    let basis = sys.kernel_basis()?;
    let eig = matkit::sym_eig(&(basis.transpose() * d * &basis))?;
    let v = &basis * eig.eigenvectors.column(0);
    Ok((eig.min(), v))
}

/// Minimum over sampled unit-circle points of `λ_min(Ψ^K_μ(z))`.
///
/// `Ψ^K_μ(z) = H(z)ᴴ·M·H(z)` with `H(z) = ((zI − A_c)⁻¹B̃; I)` and
/// `M = (I Kᵀ; 0 I)·C_μ·(I 0; K I)`. A positive minimum is numerical
/// evidence that `μ` is admissible.
pub fn popov_check(sys: &ExtendedLagrangianSystem, mu: f64, policy: &ExtendedPolicy, samples: usize) -> Result<f64, ExtendedError> {
    let n = sys.n();
    let m = sys.m();
    let k = &policy.ktilde;
    let ac = sys.closed_loop(k);
    for ev in matkit::eigenvalues(&ac)? {
        if (ev.norm() - 1.0).abs() <= 1e-9 {
            return Err(ExtendedError::ClosedLoopOnUnitCircle { modulus: ev.norm() });
        }
    }
    let mut left = Matrix::identity(n + m, n + m);
    left.view_mut((0, n), (n, m)).copy_from(&k.transpose());
    let weight = matkit::to_complex(&(&left * sys.lagrangian(mu) * left.transpose()));
    let acc = matkit::to_complex(&ac);
    let btc = matkit::to_complex(&sys.btilde);
    let mut worst = f64::INFINITY;
    for s in 0..samples.max(1) {
        let angle = 2.0 * std::f64::consts::PI * s as f64 / samples.max(1) as f64;
        let z = Complex::from_polar(1.0, angle);
        let resolvent = matkit::CMatrix::identity(n, n) * z - &acc;
        let top = resolvent
            .lu()
            .solve(&btc)
            .ok_or(ExtendedError::ClosedLoopOnUnitCircle { modulus: 1.0 })?;
        let mut h = matkit::CMatrix::zeros(n + m, m);
        h.view_mut((0, 0), (n, m)).copy_from(&top);
        h.view_mut((n, 0), (m, m)).copy_from(&matkit::CMatrix::identity(m, m));
        let psi = h.adjoint() * &weight * &h;
        worst = worst.min(matkit::hermitian_min_eig(&psi)?);
    }
    Ok(worst)
}

/// Default number of unit-circle samples for [`popov_check`].
pub const POPOV_SAMPLES: usize = 256;
