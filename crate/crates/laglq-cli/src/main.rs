use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use laglq::agents::{self, AgentKind, CecceConfig};
use laglq::dsofu::{self, DsofuConfig};
use laglq::extended_lqr::{self, ExtendedLagrangianSystem};
use laglq::matkit::Matrix;
use laglq::riccati::{self, LqrInstance};
use laglq::simlab::{self, ExperimentConfig, MatrixRows, SystemConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "laglq", version, about = "Optimistic LQR control via Lagrangian relaxation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the Riccati equation of a system and print the solution.
    Dare(SystemArgs),
    /// Sweep D(mu) and D'(mu) over a uniform multiplier grid.
    Dual {
        #[command(flatten)]
        problem: ProblemArgs,
        /// Number of grid points on [0, mu_max].
        #[arg(long, default_value_t = 51)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one dichotomy search and print the outcome.
    Dsofu {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        /// Upper bound on the optimal average cost.
        #[arg(long, default_value_t = 5.0)]
        d_bound: f64,
    },
    /// Run one agent on one seeded trajectory and export its trace.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// laglq, cecce, cecce_tuned, fixed or ofu_oracle.
        #[arg(long, default_value = "laglq")]
        agent: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full multi-seed comparison of the configured roster.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; overrides the config value.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate DS-OFU on a warm-up confidence set against the grid and Monte-Carlo oracles.
    Oracle {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        #[arg(long, default_value_t = 5)]
        grid_density: usize,
        #[arg(long, default_value_t = 1_000_000)]
        mc_steps: usize,
    },
}

#[derive(Args)]
struct SystemArgs {
    /// JSON file with keys a, b, q, r; defaults to the benchmark system.
    #[arg(long)]
    system: Option<PathBuf>,
}

#[derive(Args)]
struct ProblemArgs {
    #[command(flatten)]
    system: SystemArgs,
    /// Confidence radius.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Design matrix V = lambda * I.
    #[arg(long, default_value_t = 100.0)]
    lambda: f64,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment JSON; missing keys take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl SystemArgs {
    fn load(&self) -> Result<(SystemConfig, LqrInstance)> {
        let cfg = match &self.system {
            Some(p) => serde_json::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => SystemConfig::benchmark(),
        };
        let sys = cfg.instance()?;
        Ok((cfg, sys))
    }
}

impl ProblemArgs {
    fn load(&self) -> Result<(SystemConfig, ExtendedLagrangianSystem)> {
        let (cfg, sys) = self.system.load()?;
        let v = Matrix::identity(sys.n() + sys.d(), sys.n() + sys.d()) * self.lambda;
        let ext = extended_lqr::build_extended(&sys.theta(), self.beta, &v, &sys.q, &sys.r)?;
        Ok((cfg, ext))
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => Ok(ExperimentConfig::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn rows(m: &Matrix) -> MatrixRows {
    MatrixRows::from_matrix(m)
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn agent_from_name(name: &str) -> Result<AgentKind> {
    Ok(match name {
        "laglq" => AgentKind::Laglq,
        "cecce" => AgentKind::Cecce(CecceConfig { sigma_in_sq: None, tuned_shrink: false }),
        "cecce_tuned" => AgentKind::Cecce(CecceConfig { sigma_in_sq: None, tuned_shrink: true }),
        "fixed" => AgentKind::Fixed,
        "ofu_oracle" => AgentKind::OfuOracle { grid_density: 5 },
        other => bail!("unknown agent {other:?}"),
    })
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Dare(args) => {
            let (_, sys) = args.load()?;
            let sol = riccati::dare_standard(&sys)?;
            print_json(&json!({
                "p": rows(&sol.p),
                "k": rows(&sol.k),
                "j": sol.j,
                "iterations": sol.iterations,
                "spectral_radius": laglq::matkit::spectral_radius(&sol.closed_loop)?,
            }))
        }
        Command::Dual { problem, points, out } => {
            let (sys_cfg, ext) = problem.load()?;
            let c = ext.cost_matrix();
            let mu_max = extended_lqr::mu_max(&ext, &c, &ext.vinv.clone().try_inverse().context("V is singular")?)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["mu", "admissible", "value", "grad", "j_pi", "lambda_min_d"])?;
            for i in 0..points.max(1) {
                let mu = if points <= 1 { 0.0 } else { mu_max * i as f64 / (points - 1) as f64 };
                match extended_lqr::dual_point(&ext, mu) {
                    Ok(dp) => w.write_record([mu.to_string(), "true".into(), dp.value.to_string(), dp.grad.to_string(), dp.j_pi.to_string(), dp.lambda_min_d.to_string()])?,
                    Err(_) => w.write_record([mu.to_string(), "false".into(), String::new(), String::new(), String::new(), String::new()])?,
                }
            }
            w.flush()?;
            let manifest = json!({
                "version": simlab::VERSION,
                "system": sys_cfg,
                "beta": problem.beta,
                "lambda": problem.lambda,
                "points": points,
                "mu_max": mu_max,
                "solver": riccati::SolverOptions::default(),
            });
            simlab::write_manifest(&manifest_path(&out), &manifest)?;
            Ok(())
        }
        Command::Dsofu { problem, epsilon, d_bound } => {
            let (_, ext) = problem.load()?;
            let consts = extended_lqr::dsofu_constants(d_bound, &ext.cost_matrix(), &ext)?;
            let res = dsofu::ds_ofu(&ext, &DsofuConfig::new(epsilon, consts))?;
            print_json(&json!({
                "branch": res.branch,
                "stop": res.stop,
                "iterations": res.iterations,
                "mu": res.mu,
                "value": res.value,
                "feasibility": res.feasibility,
                "dual_value": res.dual_value,
                "k_tilde": rows(&res.policy.ktilde),
                "k_u": rows(&res.policy.ku()),
            }))
        }
        Command::Simulate { config, agent, seed, out } => {
            let cfg = config.load()?;
            let kind = agent_from_name(&agent)?;
            let trace = simlab::run_trajectory(&cfg, kind, seed)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            simlab::write_traces_csv(&out, std::slice::from_ref(&trace))?;
            let manifest = json!({
                "version": simlab::VERSION,
                "config": cfg,
                "agent": kind,
                "seed": seed,
                "j_star": trace.j_star,
                "setup": trace.setup,
                "episodes": trace.episodes.len(),
                "failures": trace.failures,
                "exploded_at": trace.exploded_at,
                "solver": riccati::SolverOptions::default(),
            });
            simlab::write_manifest(&manifest_path(&out), &manifest)?;
            let last = trace.rows.last().map(|r| r.regret).unwrap_or(0.0);
            eprintln!("{} seed {seed}: regret {last:.3} over {} steps, {} episodes", trace.agent, trace.rows.len(), trace.episodes.len());
            Ok(())
        }
        Command::Compare { config, out } => {
            let mut cfg = config.load()?;
            if let Some(o) = out {
                cfg.output = o;
            }
            let cmp = simlab::compare_experiment(&cfg)?;
            let files = simlab::write_comparison(&cfg.output, &cmp)?;
            for label in simlab::agent_labels(&cfg.agents) {
                if let Some(r) = cmp.summary.iter().rev().find(|r| r.agent == label) {
                    eprintln!("{label}: mean regret {:.3}, p90 {:.3} at t = {} ({} seeds)", r.mean_regret, r.p90_regret, r.t, r.n_seeds);
                }
            }
            eprintln!("wrote {}", files.summary.display());
            Ok(())
        }
        Command::Oracle { config, seed, epsilon, grid_density, mc_steps } => {
            let cfg = config.load()?;
            let prep = simlab::Prepared::new(&cfg)?;
            let (st, setup) = prep.agent(AgentKind::Laglq, seed)?;
            let (ext, dcfg) = agents::laglq_problem(&st, epsilon)?;
            let res = dsofu::ds_ofu(&ext, &dcfg)?;
            let eval = extended_lqr::evaluate_policy(&ext, &res.policy.ktilde)?;
            let grid = agents::ofu_grid_oracle(&st.cs, &st.q, &st.r, grid_density)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mc = agents::mc_constraint_oracle(&ext, &res.policy, mc_steps, 1.0, &mut rng)?;
            print_json(&json!({
                "setup": setup,
                "dsofu": {
                    "branch": res.branch,
                    "iterations": res.iterations,
                    "value": res.value,
                    "dual_value": res.dual_value,
                    "feasibility": eval.g,
                },
                "grid": {
                    "density": grid_density,
                    "evaluated": grid.evaluated,
                    "stabilizable": grid.stabilizable,
                    "j_opt": grid.j,
                    "relaxation_holds": res.dual_value <= grid.j + epsilon,
                },
                "monte_carlo": {
                    "steps": mc.steps,
                    "g_hat": mc.g_hat,
                    "stderr": mc.stderr,
                    "g_lyapunov": eval.g,
                    "z_score": (mc.g_hat - eval.g) / mc.stderr,
                },
            }))
        }
    }
}
