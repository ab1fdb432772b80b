//! Environment simulation, regret accounting and seeded multi-agent experiments.
//!
//! Randomness is split by purpose. Trajectory `i` of master seed `s` draws
//! from `ChaCha8` keyed by `(s, i)` as little-endian words, with the stream
//! number selecting the purpose (see [`streams`]). Every stream is consumed
//! sequentially within a trajectory, so agents run with the same seed
//! see the same warm-up data and the same process noise.

use crate::agents::{AgentKind, AgentState, EpisodeRecord, EpsilonRule};
use crate::estimation::{self, ConfidenceSet, RadiusParams, StabilizingSet};
use crate::matkit::{self, MatError, Matrix};
use crate::riccati::{self, LqrInstance, RiccatiError, RiccatiSolution, SolverOptions};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stream numbers for [`stream_rng`].
pub mod streams {
    pub const WARMUP_INPUT: u64 = 0;
    pub const WARMUP_NOISE: u64 = 1;
    pub const PROCESS_NOISE: u64 = 2;
    pub const AGENT: u64 = 3;
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Mat(#[from] MatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Row-major matrix as nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRows(pub Vec<Vec<f64>>);

impl MatrixRows {
    pub fn to_matrix(&self, name: &str) -> Result<Matrix, SimError> {
        let rows = self.0.len();
        let cols = self.0.first().map_or(0, |r| r.len());
        if rows == 0 || cols == 0 || self.0.iter().any(|r| r.len() != cols) {
            return Err(SimError::InvalidConfig(format!("{name} must be a non-empty rectangular array")));
        }
        let flat: Vec<f64> = self.0.iter().flatten().copied().collect();
        Ok(matkit::from_rows(rows, cols, &flat)?)
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        MatrixRows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub a: MatrixRows,
    pub b: MatrixRows,
    pub q: MatrixRows,
    pub r: MatrixRows,
}

impl SystemConfig {
    /// The two-state, two-input benchmark with one slightly unstable mode.
    pub fn benchmark() -> Self {
        let eye = MatrixRows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        Self { a: MatrixRows(vec![vec![1.01, 0.01], vec![0.01, 0.5]]), b: eye.clone(), q: eye.clone(), r: eye }
    }

    pub fn instance(&self) -> Result<LqrInstance, SimError> {
        Ok(LqrInstance::new(self.a.to_matrix("a")?, self.b.to_matrix("b")?, self.q.to_matrix("q")?, self.r.to_matrix("r")?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// Independent `N(0, σ²)` components.
    Gaussian { sigma: f64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let NoiseModel::Gaussian { sigma } = *self;
        if sigma > 0.0 && sigma.is_finite() {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(format!("noise sigma = {sigma}")))
        }
    }

    pub fn sample<G: Rng + ?Sized>(&self, n: usize, rng: &mut G) -> DVector<f64> {
        let NoiseModel::Gaussian { sigma } = *self;
        DVector::from_fn(n, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "T0")]
    pub warmup: usize,
    pub n_seeds: usize,
    pub master_seed: u64,
    pub delta: f64,
    pub sigma: f64,
    #[serde(rename = "D_bound")]
    pub d_bound: f64,
    pub epsilon_rule: EpsilonRule,
    pub agents: Vec<AgentKind>,
    pub output: PathBuf,
    /// Warm-up controller; defaults to the LQR gain of the system with `A` scaled by 0.9.
    pub k0: Option<MatrixRows>,
    /// Overrides the regularizer derived from the warm-up radius.
    pub lambda: Option<f64>,
    pub state_guard: f64,
    /// Also export full per-step traces.
    pub write_traces: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::benchmark(),
            horizon: 100_000,
            warmup: 2_000,
            n_seeds: 20,
            master_seed: 2024,
            delta: 0.05,
            sigma: 1.0,
            d_bound: 5.0,
            epsilon_rule: EpsilonRule::InvSqrt,
            agents: vec![
                AgentKind::Laglq,
                AgentKind::Cecce(crate::agents::CecceConfig { sigma_in_sq: None, tuned_shrink: false }),
                AgentKind::Cecce(crate::agents::CecceConfig { sigma_in_sq: None, tuned_shrink: true }),
            ],
            output: PathBuf::from("out"),
            k0: None,
            lambda: None,
            state_guard: 1e6,
            write_traces: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.horizon < 1 || self.n_seeds < 1 {
            return bad(format!("T = {} and n_seeds = {} must be at least 1", self.horizon, self.n_seeds));
        }
        let sys = self.system.instance()?;
        if self.warmup < sys.n() + sys.d() {
            return bad(format!("T0 = {} is shorter than the regressor dimension", self.warmup));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta = {}", self.delta));
        }
        NoiseModel::Gaussian { sigma: self.sigma }.validate()?;
        if !(self.d_bound > 0.0) || !(self.state_guard > 0.0) {
            return bad("D_bound and state_guard must be positive".into());
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) {
                return bad(format!("lambda = {l}"));
            }
        }
        if let Some(k0) = &self.k0 {
            let k = k0.to_matrix("k0")?;
            if k.shape() != (sys.d(), sys.n()) {
                return bad(format!("k0 has shape {:?}", k.shape()));
            }
        }
        Ok(())
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel::Gaussian { sigma: self.sigma }
    }
}

/// `x' = Ax + Bu + ε` and `c = xᵀQx + uᵀRu`.
pub fn step_env(sys: &LqrInstance, x: &DVector<f64>, u: &DVector<f64>, eps: &DVector<f64>) -> (DVector<f64>, f64) {
    let x_next = &sys.a * x + &sys.b * u + eps;
    let cost = x.dot(&(&sys.q * x)) + u.dot(&(&sys.r * u));
    (x_next, cost)
}

pub fn stream_rng(master_seed: u64, trajectory: u64, stream: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&trajectory.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng
}

fn regressor(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

/// Warm-up data: `T0` steps of `u = K₀x + N(0, I)` from `x₀ = 0`.
pub fn warm_up(cfg: &ExperimentConfig, truth: &LqrInstance, k0: &Matrix, trajectory: u64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut rin = stream_rng(cfg.master_seed, trajectory, streams::WARMUP_INPUT);
    let mut rnoise = stream_rng(cfg.master_seed, trajectory, streams::WARMUP_NOISE);
    let input = NoiseModel::Gaussian { sigma: 1.0 };
    let noise = cfg.noise();
    let mut x = DVector::zeros(truth.n());
    let (mut zs, mut xs) = (Vec::with_capacity(cfg.warmup), Vec::with_capacity(cfg.warmup));
    for _ in 0..cfg.warmup {
        let u = k0 * &x + input.sample(truth.d(), &mut rin);
        let (xn, _) = step_env(truth, &x, &u, &noise.sample(truth.n(), &mut rnoise));
        zs.push(regressor(&x, &u));
        xs.push(xn.clone());
        x = xn;
    }
    (zs, xs)
}

/// Regularization and radius quantities derived from the warm-up fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearningSetup {
    pub eps0: f64,
    pub kappa: f64,
    pub x_bound: f64,
    pub lambda: f64,
    pub beta0: f64,
    /// `(n+d)·log₂(1 + T·X²κ/λ)`.
    pub episode_bound: f64,
}

/// `κ = D/λ_min(C)`, the state bound `X`, `λ` from the warm-up radius and `β` at level `δ/4`.
///
/// `X` needs `‖P*‖₂`, which only the harness knows; the learner sees it through `λ` alone.
pub fn learning_setup(cfg: &ExperimentConfig, truth: &LqrInstance, set: &StabilizingSet, p_star_norm: f64) -> Result<(LearningSetup, ConfidenceSet), SimError> {
    let (n, d) = (truth.n(), truth.d());
    let lmin_c = matkit::lambda_min(&truth.cost_matrix())?;
    let kappa = cfg.d_bound / lmin_c;
    let t = cfg.horizon as f64;
    let x_bound = estimation::x_bound(cfg.sigma, kappa, p_star_norm, t, cfg.delta, lmin_c);
    let lambda = cfg.lambda.unwrap_or_else(|| estimation::lambda_reg(set.eps0, cfg.sigma, cfg.delta, n, d, kappa, x_bound, t));
    let cs = ConfidenceSet::new(set.theta0.clone(), lambda, set.eps0, RadiusParams { sigma: cfg.sigma, delta: cfg.delta / 4.0 });
    let setup = LearningSetup {
        eps0: set.eps0,
        kappa,
        x_bound,
        lambda,
        beta0: cs.beta,
        episode_bound: estimation::episode_bound(n + d, t, x_bound, kappa, lambda),
    };
    Ok((setup, cs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub episode: usize,
    pub x_norm: f64,
    pub cost: f64,
    pub regret: f64,
    pub updated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub agent: String,
    pub seed: u64,
    pub j_star: f64,
    pub rows: Vec<TraceRow>,
    /// Step at which `‖x‖` exceeded the guard; the run stops there.
    pub exploded_at: Option<usize>,
    pub failures: usize,
    pub episodes: Vec<EpisodeRecord>,
    /// `ρ(A* + B*K)` of the controller in force after each recomputation.
    pub true_rho: Vec<f64>,
    /// `max_t [Σ min(1, ‖z‖²_{V⁻¹}) − 2·log(det V_t / det V_0)]`; non-positive when the bound holds.
    pub self_normalized_excess: f64,
    pub setup: LearningSetup,
    /// Base exploration variance actually used; zero for noiseless agents.
    pub sigma_in_sq: f64,
    pub final_set: ConfidenceSet,
}

impl RegretTrace {
    /// Checks `R_t = Σ_{s≤t}(c_s − J*)` row by row, recomputed in logged order.
    pub fn accounting_holds(&self) -> bool {
        let mut r = 0.0;
        let mut prev_t = 0;
        for row in &self.rows {
            r += row.cost - self.j_star;
            if row.regret != r || row.t <= prev_t {
                return false;
            }
            prev_t = row.t;
        }
        true
    }

    pub fn digest(&self, checkpoints: &[usize]) -> TraceDigest {
        digest_rows(&self.agent, self.seed, &self.rows, checkpoints)
    }
}

/// Regret values at checkpoints; `None` past an explosion.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDigest {
    pub agent: String,
    pub seed: u64,
    pub regrets: Vec<Option<f64>>,
}

fn digest_rows(agent: &str, seed: u64, rows: &[TraceRow], checkpoints: &[usize]) -> TraceDigest {
    let regrets = checkpoints.iter().map(|&t| rows.get(t.wrapping_sub(1)).filter(|r| r.t == t).map(|r| r.regret)).collect();
    TraceDigest { agent: agent.to_string(), seed, regrets }
}

/// Quantities shared by every trajectory of one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub truth: LqrInstance,
    pub optimal: RiccatiSolution,
    pub k0: Matrix,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let truth = cfg.system.instance()?;
        let optimal = riccati::dare_standard(&truth)?;
        let k0 = match &cfg.k0 {
            Some(k) => k.to_matrix("k0")?,
            None => {
                let guess = LqrInstance::new(&truth.a * 0.9, truth.b.clone(), truth.q.clone(), truth.r.clone())?;
                riccati::dare_standard(&guess)?.k
            }
        };
        Ok(Self { cfg: cfg.clone(), truth, optimal, k0 })
    }

    pub fn j_star(&self) -> f64 {
        self.optimal.j
    }

    pub fn p_star_norm(&self) -> f64 {
        matkit::norm2(&self.optimal.p)
    }

    /// Warm-up fit for one trajectory.
    pub fn stabilizing_set(&self, trajectory: u64) -> Result<StabilizingSet, SimError> {
        let (zs, xs) = warm_up(&self.cfg, &self.truth, &self.k0, trajectory);
        Ok(estimation::fit_stabilizing_set(&zs, &xs, self.cfg.delta)?)
    }

    /// Agent initialized from the warm-up of `trajectory`, before its first controller update.
    pub fn agent(&self, kind: AgentKind, trajectory: u64) -> Result<(AgentState, LearningSetup), SimError> {
        let set = self.stabilizing_set(trajectory)?;
        let (setup, cs) = learning_setup(&self.cfg, &self.truth, &set, self.p_star_norm())?;
        let k_init = if matches!(kind, AgentKind::Fixed) { self.optimal.k.clone() } else { self.k0.clone() };
        let st = AgentState::new(kind, cs, k_init, self.truth.q.clone(), self.truth.r.clone(), self.cfg.d_bound, self.cfg.epsilon_rule);
        Ok((st, setup))
    }

    pub fn run(&self, kind: AgentKind, trajectory: u64) -> Result<RegretTrace, SimError> {
        let cfg = &self.cfg;
        let truth = &self.truth;
        let j_star = self.j_star();
        let (mut st, setup) = self.agent(kind, trajectory)?;
        let true_rho_of = |k: &Matrix| matkit::spectral_radius(&(&truth.a + &truth.b * k)).unwrap_or(f64::INFINITY);
        let mut true_rho = vec![];
        if st.is_learning() {
            st.update(0);
            true_rho.push(true_rho_of(&st.ku));
        }
        let logdet0 = st.cs.log_det_v;
        let mut penv = stream_rng(cfg.master_seed, trajectory, streams::PROCESS_NOISE);
        let mut pagent = stream_rng(cfg.master_seed, trajectory, streams::AGENT);
        let noise = cfg.noise();
        let mut x = DVector::zeros(truth.n());
        let mut regret = 0.0;
        let mut sn_sum = 0.0;
        let mut sn_excess = f64::NEG_INFINITY;
        let mut rows = Vec::with_capacity(cfg.horizon);
        let mut exploded_at = None;
        for t in 1..=cfg.horizon {
            let u = st.control(&x, t, &mut pagent);
            let z = regressor(&x, &u);
            let (xn, cost) = step_env(truth, &x, &u, &noise.sample(truth.n(), &mut penv));
            let obs = st.observe(&z, &xn, t);
            if let Some(w) = obs.z_norm_sq {
                sn_sum += w.min(1.0);
                sn_excess = sn_excess.max(sn_sum - 2.0 * (st.cs.log_det_v - logdet0));
            }
            if obs.updated {
                true_rho.push(true_rho_of(&st.ku));
            }
            regret += cost - j_star;
            rows.push(TraceRow { t, episode: st.episode_index, x_norm: x.norm(), cost, regret, updated: obs.updated });
            x = xn;
            if !(x.norm() <= cfg.state_guard) {
                exploded_at = Some(t);
                break;
            }
        }
        Ok(RegretTrace {
            agent: kind.label(),
            seed: trajectory,
            j_star,
            rows,
            exploded_at,
            failures: st.failures,
            episodes: st.history,
            true_rho,
            self_normalized_excess: sn_excess,
            setup,
            sigma_in_sq: st.sigma_in_sq,
            final_set: st.cs,
        })
    }
}

/// One seeded trajectory of `agent` under `cfg`.
pub fn run_trajectory(cfg: &ExperimentConfig, agent: AgentKind, seed: u64) -> Result<RegretTrace, SimError> {
    Prepared::new(cfg)?.run(agent, seed)
}

/// `round(√2^k)` for `k = 0, 1, …` up to `T`, plus `T/4` and `T`, sorted and deduplicated.
///
/// `T/4` is kept so the regret doubling ratio `R_T / R_{T/4}` can be read off the summary.
pub fn checkpoints(horizon: usize) -> Vec<usize> {
    let mut out: Vec<usize> = vec![horizon];
    if horizon >= 4 {
        out.push(horizon / 4);
    }
    let mut k = 0;
    loop {
        let t = 2f64.powf(k as f64 / 2.0).round() as usize;
        if t > horizon {
            break;
        }
        out.push(t);
        k += 1;
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub agent: String,
    pub t: usize,
    pub mean_regret: f64,
    pub p90_regret: f64,
    pub n_seeds: usize,
}

/// Linear-interpolation quantile of a sorted, non-empty slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and 90th percentile per agent and checkpoint over trajectories still running there.
pub fn summarize(agents: &[String], digests: &[TraceDigest], checkpoints: &[usize]) -> Vec<SummaryRow> {
    let mut out = vec![];
    for agent in agents {
        let mine: Vec<&TraceDigest> = digests.iter().filter(|d| &d.agent == agent).collect();
        for (i, &t) in checkpoints.iter().enumerate() {
            let mut vals: Vec<f64> = mine.iter().filter_map(|d| d.regrets[i]).collect();
            if vals.is_empty() {
                continue;
            }
            vals.sort_by(f64::total_cmp);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            out.push(SummaryRow { agent: agent.clone(), t, mean_regret: mean, p90_regret: quantile_sorted(&vals, 0.9), n_seeds: vals.len() });
        }
    }
    out
}

/// Unique column labels for the roster, suffixing repeats with their position.
pub fn agent_labels(roster: &[AgentKind]) -> Vec<String> {
    let mut labels: Vec<String> = vec![];
    for (i, a) in roster.iter().enumerate() {
        let base = a.label();
        let label = if labels.contains(&base) { format!("{base}_{i}") } else { base };
        labels.push(label);
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryInfo {
    pub agent: String,
    pub seed: u64,
    pub eps0: f64,
    pub lambda: f64,
    pub beta0: f64,
    pub sigma_in_sq: f64,
    pub episodes: usize,
    pub episode_bound: f64,
    pub failures: usize,
    pub exploded_at: Option<usize>,
    /// See [`RegretTrace::self_normalized_excess`]; absent for agents that do not learn.
    pub self_normalized_excess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleFactors {
    pub horizon: f64,
    pub warmup: f64,
    pub n_seeds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub rng: String,
    pub j_star: f64,
    /// `‖P*‖₂`, used only for the state bound `X`.
    pub p_star_norm: f64,
    pub k0: MatrixRows,
    pub solver: SolverOptions,
    /// Ratios to the full-scale protocol (10⁶ steps, 2·10⁴ warm-up, 100 trajectories).
    pub scale: ScaleFactors,
    pub checkpoints: Vec<usize>,
    pub trajectories: Vec<TrajectoryInfo>,
}

const RNG_RULE: &str = "ChaCha8 keyed by (master_seed, trajectory) as little-endian u64 words; stream 0 warm-up input, 1 warm-up noise, 2 process noise, 3 agent exploration";

pub struct Comparison {
    pub summary: Vec<SummaryRow>,
    pub traces: Vec<RegretTrace>,
    pub digests: Vec<TraceDigest>,
    pub manifest: Manifest,
}

/// Runs every agent of the roster on `n_seeds` trajectories in parallel.
///
/// Full per-step rows are kept only when `write_traces` is set.
pub fn compare_experiment(cfg: &ExperimentConfig) -> Result<Comparison, SimError> {
    if cfg.agents.is_empty() {
        return Err(SimError::InvalidConfig("agent roster is empty".into()));
    }
    let prep = Prepared::new(cfg)?;
    let labels = agent_labels(&cfg.agents);
    let cps = checkpoints(cfg.horizon);
    let jobs: Vec<(usize, u64)> = (0..cfg.agents.len()).flat_map(|a| (0..cfg.n_seeds as u64).map(move |s| (a, s))).collect();
    type JobOutput = (TraceDigest, TrajectoryInfo, Option<RegretTrace>);
    let results: Vec<Result<JobOutput, SimError>> = jobs
        .par_iter()
        .map(|&(a, seed)| {
            let mut trace = prep.run(cfg.agents[a], seed)?;
            trace.agent = labels[a].clone();
            let info = TrajectoryInfo {
                agent: trace.agent.clone(),
                seed,
                eps0: trace.setup.eps0,
                lambda: trace.setup.lambda,
                beta0: trace.setup.beta0,
                sigma_in_sq: trace.sigma_in_sq,
                episodes: trace.episodes.len(),
                episode_bound: trace.setup.episode_bound,
                failures: trace.failures,
                exploded_at: trace.exploded_at,
                self_normalized_excess: Some(trace.self_normalized_excess).filter(|v| v.is_finite()),
            };
            let digest = trace.digest(&cps);
            Ok((digest, info, cfg.write_traces.then_some(trace)))
        })
        .collect();
    let (mut digests, mut infos, mut traces) = (vec![], vec![], vec![]);
    for r in results {
        let (d, i, t) = r?;
        digests.push(d);
        infos.push(i);
        traces.extend(t);
    }
    let summary = summarize(&labels, &digests, &cps);
    let manifest = Manifest {
        version: VERSION.to_string(),
        config: cfg.clone(),
        seeds: (0..cfg.n_seeds as u64).collect(),
        rng: RNG_RULE.to_string(),
        j_star: prep.j_star(),
        p_star_norm: prep.p_star_norm(),
        k0: MatrixRows::from_matrix(&prep.k0),
        solver: SolverOptions::default(),
        scale: ScaleFactors { horizon: cfg.horizon as f64 / 1e6, warmup: cfg.warmup as f64 / 2e4, n_seeds: cfg.n_seeds as f64 / 100.0 },
        checkpoints: cps,
        trajectories: infos,
    };
    Ok(Comparison { summary, traces, digests, manifest })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTraceRow {
    pub agent: String,
    pub seed: u64,
    pub t: usize,
    pub episode: usize,
    pub x_norm: f64,
    pub cost: f64,
    pub regret: f64,
    pub updated: bool,
}

impl StoredTraceRow {
    fn new(agent: &str, seed: u64, r: &TraceRow) -> Self {
        Self { agent: agent.to_string(), seed, t: r.t, episode: r.episode, x_norm: r.x_norm, cost: r.cost, regret: r.regret, updated: r.updated }
    }

    fn row(&self) -> TraceRow {
        TraceRow { t: self.t, episode: self.episode, x_norm: self.x_norm, cost: self.cost, regret: self.regret, updated: self.updated }
    }
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>, SimError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_traces_csv(path: &Path, traces: &[RegretTrace]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path)?;
    for tr in traces {
        for row in &tr.rows {
            w.serialize(StoredTraceRow::new(&tr.agent, tr.seed, row))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads an exported trace file back into per-trajectory digests.
pub fn digests_from_traces_csv(path: &Path, checkpoints: &[usize]) -> Result<Vec<TraceDigest>, SimError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut groups: Vec<(String, u64, Vec<TraceRow>)> = vec![];
    for rec in r.deserialize::<StoredTraceRow>() {
        let rec = rec?;
        match groups.last_mut() {
            Some((a, s, rows)) if *a == rec.agent && *s == rec.seed => rows.push(rec.row()),
            _ => groups.push((rec.agent.clone(), rec.seed, vec![rec.row()])),
        }
    }
    Ok(groups.iter().map(|(a, s, rows)| digest_rows(a, *s, rows, checkpoints)).collect())
}

pub fn write_manifest(path: &Path, manifest: &impl Serialize) -> Result<(), SimError> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Paths written by [`write_comparison`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFiles {
    pub summary: PathBuf,
    pub manifest: PathBuf,
    pub traces: Option<PathBuf>,
}

pub fn write_comparison(dir: &Path, cmp: &Comparison) -> Result<OutputFiles, SimError> {
    fs::create_dir_all(dir)?;
    let summary = dir.join("summary.csv");
    let manifest = dir.join("summary.manifest.json");
    write_summary_csv(&summary, &cmp.summary)?;
    write_manifest(&manifest, &cmp.manifest)?;
    let traces = if cmp.traces.is_empty() {
        None
    } else {
        let p = dir.join("traces.csv");
        write_traces_csv(&p, &cmp.traces)?;
        Some(p)
    };
    Ok(OutputFiles { summary, manifest, traces })
}
