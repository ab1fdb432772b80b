//! Learning agents and the brute-force validation oracles.
//!
//! Learning agents keep an RLS confidence set and recompute their controller
//! only when `det V` doubles. Between updates the controller is frozen.

use crate::dsofu::{self, Branch, DsofuConfig, DsofuError, DsofuResult};
use crate::estimation::{self, ConfidenceSet};
use crate::extended_lqr::{self, ExtendedError, ExtendedLagrangianSystem, ExtendedPolicy};
use crate::matkit::{self, MatError, Matrix};
use crate::riccati::{self, LqrInstance, RiccatiError};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest parameter count `(n+d)·n` the grid oracle accepts.
pub const GRID_MAX_PARAMS: usize = 8;
/// Largest DS-OFU tolerance; the search requires `ε < 1/2`.
pub const EPSILON_CAP: f64 = 0.49;
const MC_BATCHES: usize = 50;
const MC_BURN_IN: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Dsofu(#[from] DsofuError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Extended(#[from] ExtendedError),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error("estimated closed loop is unstable: rho = {rho}")]
    Unstable { rho: f64 },
    #[error("grid oracle refuses {params} parameters (limit {GRID_MAX_PARAMS})")]
    TooManyParameters { params: usize },
    #[error("no stabilizable grid point among {evaluated}")]
    GridTooCoarse { evaluated: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EpsilonRule {
    /// `ε = 1/√t`, evaluated when the episode starts.
    InvSqrt,
    Constant { value: f64 },
}

impl EpsilonRule {
    pub fn eval(&self, t: usize) -> f64 {
        let e = match self {
            EpsilonRule::InvSqrt => 1.0 / (t.max(1) as f64).sqrt(),
            EpsilonRule::Constant { value } => *value,
        };
        e.min(EPSILON_CAP)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CecceConfig {
    /// Base exploration variance; the injected variance is `σ_in²·t^{-1/2}`.
    /// When absent it is set by [`cecce_recipe_variance`] on the initial estimate.
    #[serde(default)]
    pub sigma_in_sq: Option<f64>,
    /// Divide the variance by `√‖P̂‖₂`.
    #[serde(default)]
    pub tuned_shrink: bool,
}

/// `σ_in² = √n·‖P₀‖₂^{9/2}·max(1, ‖B₀‖₂)·√log(‖P₀‖₂/δ)` with unit constants.
pub fn cecce_recipe_variance(n: usize, p0_norm: f64, b0_norm: f64, delta: f64) -> f64 {
    (n as f64).sqrt() * p0_norm.powf(4.5) * b0_norm.max(1.0) * (p0_norm / delta).ln().max(0.0).sqrt()
}

impl CecceConfig {
    /// Injected-noise variance at step `t` for base variance `sigma_in_sq` and `‖P̂‖₂`.
    pub fn variance(&self, sigma_in_sq: f64, t: usize, p_hat_norm: f64) -> f64 {
        let base = sigma_in_sq / (t.max(1) as f64).sqrt();
        if self.tuned_shrink {
            base / p_hat_norm.sqrt()
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentKind {
    Laglq,
    Cecce(CecceConfig),
    OfuOracle { grid_density: usize },
    Fixed,
}

impl AgentKind {
    pub fn label(&self) -> String {
        match self {
            AgentKind::Laglq => "laglq".into(),
            AgentKind::Cecce(c) if c.tuned_shrink => "cecce_tuned".into(),
            AgentKind::Cecce(_) => "cecce".into(),
            AgentKind::OfuOracle { .. } => "ofu_oracle".into(),
            AgentKind::Fixed => "fixed".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// `‖z‖²_{V⁻¹}` before the update; `None` for non-learning agents.
    pub z_norm_sq: Option<f64>,
    pub updated: bool,
}

/// One controller recomputation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub t: usize,
    pub epsilon: f64,
    pub accepted: bool,
    /// `ρ(Â + B̂K_u)` of the candidate, when one was produced.
    pub rho_estimated: Option<f64>,
    pub branch: Option<Branch>,
    pub iterations: usize,
    /// Constraint value `g` of the DS-OFU output.
    pub feasibility: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub kind: AgentKind,
    pub cs: ConfidenceSet,
    pub ku: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    /// Upper bound `D` on the optimal average cost.
    pub d_bound: f64,
    pub epsilon_rule: EpsilonRule,
    pub episode_start_logdet: f64,
    pub episode_index: usize,
    pub failures: usize,
    /// `‖P̂‖₂` from the last certainty-equivalence solve.
    pub p_hat_norm: f64,
    /// Resolved base exploration variance; zero for agents that do not inject noise.
    pub sigma_in_sq: f64,
    pub history: Vec<EpisodeRecord>,
}

impl AgentState {
    pub fn new(kind: AgentKind, cs: ConfidenceSet, k0: Matrix, q: Matrix, r: Matrix, d_bound: f64, epsilon_rule: EpsilonRule) -> Self {
        let episode_start_logdet = cs.log_det_v;
        let mut st = Self {
            kind,
            cs,
            ku: k0,
            q,
            r,
            d_bound,
            epsilon_rule,
            episode_start_logdet,
            episode_index: 0,
            failures: 0,
            p_hat_norm: 1.0,
            sigma_in_sq: 0.0,
            history: vec![],
        };
        if let AgentKind::Cecce(cfg) = kind {
            st.sigma_in_sq = cfg.sigma_in_sq.unwrap_or_else(|| st.recipe_variance());
        }
        st
    }

    /// CECCE recipe on the current estimate at the confidence level of the set.
    fn recipe_variance(&self) -> f64 {
        let (p0, b0) = match self.estimate().and_then(|est| Ok((riccati::dare_standard(&est)?, est.b))) {
            Ok((sol, b)) => (matkit::norm2(&sol.p), matkit::norm2(&b)),
            Err(_) => (1.0, 1.0),
        };
        cecce_recipe_variance(self.cs.n(), p0, b0, self.cs.params.delta)
    }

    pub fn is_learning(&self) -> bool {
        !matches!(self.kind, AgentKind::Fixed)
    }

    /// Control at step `t ≥ 1`.
    pub fn control<G: Rng + ?Sized>(&self, x: &DVector<f64>, t: usize, rng: &mut G) -> DVector<f64> {
        match self.kind {
            AgentKind::Cecce(cfg) => cecce_control(self, &cfg, x, t, rng),
            _ => &self.ku * x,
        }
    }

    /// Feeds one transition and recomputes the controller if `det V` doubled.
    pub fn observe(&mut self, z: &DVector<f64>, x_next: &DVector<f64>, t: usize) -> Observation {
        if !self.is_learning() {
            return Observation { z_norm_sq: None, updated: false };
        }
        let w = estimation::rls_update(&mut self.cs, z, x_next);
        let updated = estimation::should_update(&self.cs, self.episode_start_logdet);
        if updated {
            self.update(t);
        }
        Observation { z_norm_sq: Some(w), updated }
    }

    /// Recomputes the controller from the current confidence set.
    ///
    /// Any failure keeps the previous controller and bumps `failures`.
    pub fn update(&mut self, t: usize) {
        let record = match self.kind {
            AgentKind::Laglq => laglq_policy_update(self, t),
            AgentKind::Cecce(_) => cecce_update(self, t),
            AgentKind::OfuOracle { grid_density } => oracle_update(self, t, grid_density),
            AgentKind::Fixed => return,
        };
        if !record.accepted {
            self.failures += 1;
        }
        self.history.push(record);
        self.episode_start_logdet = self.cs.log_det_v;
        self.episode_index += 1;
    }

    fn estimate(&self) -> Result<LqrInstance, AgentError> {
        let n = self.cs.n();
        let base = LqrInstance::new(Matrix::zeros(n, n), Matrix::zeros(n, self.r.nrows()), self.q.clone(), self.r.clone())?;
        Ok(base.with_theta(&self.cs.theta_hat)?)
    }

    /// Accepts `ku` if it stabilizes the estimated closed loop.
    fn try_accept(&mut self, ku: Matrix, record: &mut EpisodeRecord) {
        let rho = self.estimate().and_then(|est| Ok(matkit::spectral_radius(&(&est.a + &est.b * &ku))?));
        match rho {
            Ok(rho) => {
                record.rho_estimated = Some(rho);
                if rho < 1.0 {
                    self.ku = ku;
                    record.accepted = true;
                } else {
                    record.error = Some(AgentError::Unstable { rho }.to_string());
                }
            }
            Err(e) => record.error = Some(e.to_string()),
        }
    }
}

fn blank_record(t: usize, epsilon: f64) -> EpisodeRecord {
    EpisodeRecord { t, epsilon, accepted: false, rho_estimated: None, branch: None, iterations: 0, feasibility: None, error: None }
}

/// Extended system and DS-OFU configuration for the current confidence set.
pub fn laglq_problem(st: &AgentState, epsilon: f64) -> Result<(ExtendedLagrangianSystem, DsofuConfig), AgentError> {
    let sys = extended_lqr::build_extended(&st.cs.theta_hat, st.cs.beta, &st.cs.v, &st.q, &st.r)?;
    let consts = extended_lqr::dsofu_constants(st.d_bound, &sys.cost_matrix(), &sys)?;
    Ok((sys, DsofuConfig::new(epsilon, consts)))
}

/// Runs DS-OFU on the current confidence set and extracts `K_u`.
pub fn laglq_policy_update(st: &mut AgentState, t: usize) -> EpisodeRecord {
    let eps = st.epsilon_rule.eval(t);
    let mut record = blank_record(t, eps);
    let solved: Result<DsofuResult, AgentError> = laglq_problem(st, eps).and_then(|(sys, cfg)| Ok(dsofu::ds_ofu(&sys, &cfg)?));
    match solved {
        Ok(res) => {
            record.branch = Some(res.branch);
            record.iterations = res.iterations;
            record.feasibility = Some(res.feasibility);
            st.try_accept(res.policy.ku(), &mut record);
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Certainty-equivalence controller `K(θ̂)` from the standard DARE.
pub fn cecce_update(st: &mut AgentState, t: usize) -> EpisodeRecord {
    let mut record = blank_record(t, 0.0);
    match st.estimate().and_then(|est| Ok(riccati::dare_standard(&est)?)) {
        Ok(sol) => {
            st.p_hat_norm = matkit::norm2(&sol.p);
            st.try_accept(sol.k, &mut record);
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

fn oracle_update(st: &mut AgentState, t: usize, density: usize) -> EpisodeRecord {
    let mut record = blank_record(t, 0.0);
    let found = ofu_grid_oracle(&st.cs, &st.q, &st.r, density).and_then(|opt| {
        let sys = st.estimate()?.with_theta(&opt.theta)?;
        Ok(riccati::dare_standard(&sys)?)
    });
    match found {
        Ok(sol) => st.try_accept(sol.k, &mut record),
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// `u = K̂x + η`, `η ~ N(0, σ²·t^{-1/2}·I)`, with `σ²` shrunk by `√‖P̂‖₂` when tuned.
pub fn cecce_control<G: Rng + ?Sized>(st: &AgentState, cfg: &CecceConfig, x: &DVector<f64>, t: usize, rng: &mut G) -> DVector<f64> {
    let mut u = &st.ku * x;
    let sd = cfg.variance(st.sigma_in_sq, t, st.p_hat_norm).sqrt();
    if sd > 0.0 {
        for ui in u.iter_mut() {
            *ui += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    u
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOptimum {
    pub theta: Matrix,
    pub j: f64,
    /// Grid points inside the whitened unit ball.
    pub evaluated: usize,
    pub stabilizable: usize,
    /// Coordinate spacing in the whitened ball.
    pub spacing: f64,
}

/// Minimizes `J(θ)` over a uniform grid of the confidence ellipsoid.
///
/// Points are `θ = θ̂ + β·V^{-1/2}Ξ` with `Ξ` on a cube grid of
/// `grid_density` points per coordinate and `‖Ξ‖_F ≤ 1`.
pub fn ofu_grid_oracle(cs: &ConfidenceSet, q: &Matrix, r: &Matrix, grid_density: usize) -> Result<GridOptimum, AgentError> {
    let (p, n) = (cs.p(), cs.n());
    let params = p * n;
    if params > GRID_MAX_PARAMS {
        return Err(AgentError::TooManyParameters { params });
    }
    let g = grid_density.max(1);
    let coords: Vec<f64> = if g == 1 { vec![0.0] } else { (0..g).map(|k| -1.0 + 2.0 * k as f64 / (g - 1) as f64).collect() };
    let spacing = if g == 1 { 2.0 } else { 2.0 / (g - 1) as f64 };
    let eig = matkit::sym_eig(&cs.v)?;
    let inv_sqrt = Matrix::from_diagonal(&DVector::from_iterator(p, eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt())));
    let w = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * cs.beta;
    let base = LqrInstance::new(Matrix::zeros(n, n), Matrix::zeros(n, p - n), q.clone(), r.clone())?;
    let mut best: Option<(f64, Matrix)> = None;
    let (mut evaluated, mut stabilizable) = (0, 0);
    let mut idx = vec![0usize; params];
    let mut xi = Matrix::zeros(p, n);
    loop {
        let mut sq = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            xi[(k % p, k / p)] = coords[i];
            sq += coords[i] * coords[i];
        }
        if sq <= 1.0 + 1e-12 {
            evaluated += 1;
            let theta = &cs.theta_hat + &w * &xi;
            if let Ok(sol) = base.with_theta(&theta).and_then(|s| riccati::dare_standard(&s)) {
                stabilizable += 1;
                if best.as_ref().is_none_or(|(j, _)| sol.j < *j) {
                    best = Some((sol.j, theta));
                }
            }
        }
        // mixed-radix increment
        let mut k = 0;
        while k < params {
            idx[k] += 1;
            if idx[k] < g {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == params {
            break;
        }
    }
    match best {
        Some((j, theta)) => Ok(GridOptimum { theta, j, evaluated, stabilizable, spacing }),
        None => Err(AgentError::GridTooCoarse { evaluated }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub g_hat: f64,
    /// Batch-means standard error; infinite when the rollout carries no signal.
    pub stderr: f64,
    pub steps: usize,
}

/// Time-average estimate of `‖w‖² − β²‖z‖²_{V⁻¹}` along one rollout.
///
/// The extended closed loop is driven by `noise_scale·N(0, I)` from
/// `x₀ = 0`. The first `1000` steps are discarded.
pub fn mc_constraint_oracle<G: Rng + ?Sized>(
    sys: &ExtendedLagrangianSystem,
    policy: &ExtendedPolicy,
    steps: usize,
    noise_scale: f64,
    rng: &mut G,
) -> Result<McEstimate, AgentError> {
    let ac = sys.closed_loop(&policy.ktilde);
    let rho = matkit::spectral_radius(&ac)?;
    if rho >= 1.0 {
        return Err(AgentError::Unstable { rho });
    }
    if noise_scale == 0.0 || steps == 0 {
        return Ok(McEstimate { g_hat: 0.0, stderr: f64::INFINITY, steps });
    }
    let (n, d) = (sys.n(), sys.d());
    let b2 = sys.beta * sys.beta;
    let batch = (steps / MC_BATCHES).max(1);
    let mut means = vec![];
    let mut acc = 0.0;
    let mut x = DVector::<f64>::zeros(n);
    for s in 0..MC_BURN_IN + steps {
        let ut = &policy.ktilde * &x;
        if s >= MC_BURN_IN {
            let mut z = DVector::zeros(n + d);
            z.rows_mut(0, n).copy_from(&x);
            z.rows_mut(n, d).copy_from(&ut.rows(0, d));
            let w = ut.rows(d, n);
            acc += w.norm_squared() - b2 * z.dot(&(&sys.vinv * &z));
            if (s - MC_BURN_IN + 1).is_multiple_of(batch) {
                means.push(acc / batch as f64);
                acc = 0.0;
            }
        }
        let mut next = &ac * &x;
        for v in next.iter_mut() {
            *v += noise_scale * rng.sample::<f64, _>(StandardNormal);
        }
        x = next;
    }
    let k = means.len() as f64;
    let g_hat = means.iter().sum::<f64>() / k;
    let var = means.iter().map(|m| (m - g_hat).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
    Ok(McEstimate { g_hat, stderr: (var / k).sqrt(), steps })
}
