//! Monte Carlo simulation of the closed-loop population and the optimality gap.

use crate::finite_riccati::{solve_check, solve_finite};
use crate::gains::{Flavor, GainSet, GainsAt};
use crate::limit_riccati::LimitSolution;
use crate::linalg::SingularInverse;
use crate::model::{InitialLaw, ModelParams};
use crate::odecore::Options;
use crate::SolveError;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

type Mat = DMatrix<f64>;
type Vector = DVector<f64>;

pub const DEFAULT_STEPS: usize = 400;
const BATCH: usize = 32;
const AGENT_BITS: u32 = 24;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("state became non-finite on path {path} at t = {t}")]
    NonFiniteState { path: usize, t: f64 },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Singular(#[from] SingularInverse),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_agents: usize,
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub law: InitialLaw,
    pub crn: bool,
}

impl SimConfig {
    /// Config with `dt = horizon / DEFAULT_STEPS` and common random numbers on.
    pub fn new(n_agents: usize, paths: usize, seed: u64, law: InitialLaw, horizon: f64) -> Self {
        Self {
            n_agents,
            paths,
            dt: horizon / DEFAULT_STEPS as f64,
            seed,
            law,
            crn: true,
        }
    }

    /// Number of Euler steps on `[0, horizon]`.
    pub fn steps(&self, horizon: f64) -> Result<usize, SimError> {
        if self.paths == 0 || self.n_agents == 0 {
            return Err(SimError::InvalidConfig("paths and N must be positive".into()));
        }
        if self.n_agents >= 1 << AGENT_BITS {
            return Err(SimError::InvalidConfig("too many agents".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig("dt must be positive".into()));
        }
        let k = (horizon / self.dt).round();
        if k < 1.0 || ((k * self.dt) - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(SimError::InvalidConfig(format!(
                "dt = {} does not divide T = {horizon}",
                self.dt
            )));
        }
        Ok(k as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimResult {
    pub j_soc_hat: f64,
    pub ci_half: f64,
    pub per_agent: f64,
    pub second_moment_max: f64,
    pub mf_error: Option<f64>,
}

/// Monte Carlo averages at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStats {
    pub t: Vec<f64>,
    /// Mean of `|X_i|²` over agents and paths.
    pub second_moment: Vec<f64>,
    /// Mean of `|X^(N) − X̄|²`, when `X̄` is simulated.
    pub mf_sq: Option<Vec<f64>>,
    /// Mean social running cost.
    pub running_cost: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub result: SimResult,
    pub stats: NodeStats,
    pub path_costs: Vec<f64>,
}

struct Grid {
    t: Vec<f64>,
    agent: Vec<GainsAt>,
    mean_field: Option<Vec<GainsAt>>,
}

struct PathOut {
    cost: f64,
    second: Vec<f64>,
    mf: Vec<f64>,
    running: Vec<f64>,
}

/// Counter-based substream for `(path, agent)`; agent slot 0 carries `W0`.
fn stream(seed: u64, path: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((path as u64) << AGENT_BITS) | slot as u64);
    rng
}

fn sym_sqrt(s: &Mat) -> Mat {
    let e = SymmetricEigen::new(s.clone());
    let d = Mat::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn control(g: &GainsAt, x: &Vector, z: &Vector) -> Vector {
    let u = -(&g.theta * x) - &g.theta1 * z - &g.theta2;
    Vector::from_column_slice(u.as_slice())
}

fn col(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

fn add_to_columns(m: &mut Mat, v: &Vector) {
    for mut c in m.column_iter_mut() {
        c += v;
    }
}

/// One path; agent states are the columns of an `n × N` matrix.
fn run_path(
    m: &ModelParams,
    grid: &Grid,
    cfg: &SimConfig,
    roots: &[Mat],
    centralized: bool,
    path: usize,
) -> Result<PathOut, SimError> {
    let (n, n1, na) = (m.n, m.n1, cfg.n_agents);
    let nf = na as f64;
    let steps = grid.t.len() - 1;
    let (dt, sq) = (cfg.dt, cfg.dt.sqrt());
    let (d, d0) = (col(&m.d), col(&m.d0));
    let mut common = stream(cfg.seed, path, 0);
    let mut rngs: Vec<ChaCha8Rng> = (0..na).map(|i| stream(cfg.seed, path, i + 1)).collect();
    let mu = &cfg.law.mu0;
    let mut x = Mat::zeros(n, na);
    for (i, r) in rngs.iter_mut().enumerate() {
        x.set_column(i, &(mu + &roots[i % roots.len()] * normals(r, n)));
    }
    let mut xbar = grid.mean_field.as_ref().map(|_| mu.clone());
    let mut out = PathOut {
        cost: 0.0,
        second: Vec::with_capacity(steps + 1),
        mf: Vec::with_capacity(steps + 1),
        running: Vec::with_capacity(steps + 1),
    };
    let mut u = Mat::zeros(n1, na);
    let mut e = Mat::zeros(n, na);
    let mut qe = Mat::zeros(n, na);
    let mut ru = Mat::zeros(n1, na);
    let mut drift = Mat::zeros(n, na);
    let mut diff = Mat::zeros(n, na);
    let mut dw = vec![0.0; na];
    for k in 0..=steps {
        let t = grid.t[k];
        let xn = x.column_sum() / nf;
        if !xn.iter().all(|v| v.is_finite()) || xbar.as_ref().is_some_and(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(SimError::NonFiniteState { path, t });
        }
        let z = if centralized {
            &xn
        } else {
            xbar.as_ref().expect("mean field process")
        };
        let g = &grid.agent[k];
        let w = &g.theta1 * z + col(&g.theta2);
        u.gemm(-1.0, &g.theta, &x, 0.0);
        add_to_columns(&mut u, &(-&w));
        e.copy_from(&x);
        add_to_columns(&mut e, &(-(&m.gamma * &xn)));
        qe.gemm(1.0, &m.q, &e, 0.0);
        ru.gemm(1.0, &m.r, &u, 0.0);
        let run = e.dot(&qe) + u.dot(&ru);
        out.running.push(run);
        out.second.push(x.norm_squared() / nf);
        if let Some(xb) = &xbar {
            out.mf.push((&xn - xb).norm_squared());
        }
        if k == steps {
            let w = if steps == 0 { 0.0 } else { 0.5 };
            out.cost += dt * w * run;
            e.copy_from(&x);
            add_to_columns(&mut e, &(-(&m.gamma_f * &xn)));
            qe.gemm(1.0, &m.qf, &e, 0.0);
            out.cost += e.dot(&qe) + 2.0 * (m.k.transpose() * &xn)[(0, 0)] * nf;
            break;
        }
        out.cost += dt * if k == 0 { 0.5 * run } else { run };
        let un = -(&g.theta * &xn) - &w;
        let dw0: f64 = common.sample::<f64, _>(StandardNormal) * sq;
        for (v, r) in dw.iter_mut().zip(rngs.iter_mut()) {
            *v = r.sample::<f64, _>(StandardNormal) * sq;
        }
        let shift = &m.g * &xn * dt + (&m.b0 * &un + &d0) * dw0;
        drift.gemm(dt, &m.a, &x, 0.0);
        drift.gemm(dt, &m.b, &u, 1.0);
        diff.gemm(1.0, &m.b1, &u, 0.0);
        add_to_columns(&mut diff, &d);
        for (i, v) in dw.iter().enumerate() {
            diff.column_mut(i).scale_mut(*v);
        }
        x += &drift;
        x += &diff;
        add_to_columns(&mut x, &shift);
        if let (Some(xb), Some(mg)) = (xbar.as_mut(), grid.mean_field.as_ref()) {
            let ub = control(&mg[k], xb, xb);
            let dx = ((&m.a + &m.g) * &*xb + &m.b * &ub) * dt + (&m.b0 * &ub + &d0) * dw0;
            *xb += dx;
        }
    }
    Ok(out)
}

fn gains_on(gs: &GainSet, t: &[f64]) -> Result<Vec<GainsAt>, SingularInverse> {
    t.iter().map(|t| gs.at(*t)).collect()
}

/// Simulate under `gains`; `mean_field` drives a co-simulated `X̄`.
///
/// Decentralized gains always co-simulate `X̄` with their own gains.
pub fn simulate_detailed(
    m: &ModelParams,
    gains: &GainSet,
    mean_field: Option<&GainSet>,
    cfg: &SimConfig,
) -> Result<SimOutput, SimError> {
    let horizon = gains.horizon();
    let steps = cfg.steps(horizon)?;
    cfg.law.validate().map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    if cfg.law.mu0.len() != m.n {
        return Err(SimError::InvalidConfig("initial mean has wrong dimension".into()));
    }
    let t: Vec<f64> = (0..=steps)
        .map(|k| if k == steps { horizon } else { k as f64 * cfg.dt })
        .collect();
    let centralized = matches!(gains.flavor, Flavor::Centralized(_));
    let mf_source = if centralized {
        mean_field
    } else {
        Some(mean_field.unwrap_or(gains))
    };
    let grid = Grid {
        agent: gains_on(gains, &t)?,
        mean_field: mf_source.map(|g| gains_on(g, &t)).transpose()?,
        t,
    };
    let roots: Vec<Mat> = match &cfg.law.per_agent_sigma {
        Some(v) => v.iter().map(sym_sqrt).collect(),
        None => vec![sym_sqrt(&cfg.law.sigma0)],
    };
    let batches = cfg.paths.div_ceil(BATCH);
    let results: Vec<Result<Vec<PathOut>, SimError>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            (b * BATCH..((b + 1) * BATCH).min(cfg.paths))
                .map(|p| run_path(m, &grid, cfg, &roots, centralized, p))
                .collect()
        })
        .collect();
    let nodes = steps + 1;
    let mut second = vec![0.0; nodes];
    let mut mf = vec![0.0; nodes];
    let mut running = vec![0.0; nodes];
    let mut path_costs = Vec::with_capacity(cfg.paths);
    for batch in results {
        for p in batch? {
            if !p.cost.is_finite() {
                return Err(SimError::NonFiniteState {
                    path: path_costs.len(),
                    t: horizon,
                });
            }
            path_costs.push(p.cost);
            for k in 0..nodes {
                second[k] += p.second[k];
                running[k] += p.running[k];
            }
            for (k, v) in p.mf.iter().enumerate() {
                mf[k] += v;
            }
        }
    }
    let np = cfg.paths as f64;
    let avg = |v: Vec<f64>| v.into_iter().map(|x| x / np).collect::<Vec<_>>();
    let (second, running) = (avg(second), avg(running));
    let mf_sq = grid.mean_field.as_ref().map(|_| avg(mf));
    let (j, ci) = mean_ci(&path_costs);
    let result = SimResult {
        j_soc_hat: j,
        ci_half: ci,
        per_agent: j / cfg.n_agents as f64,
        second_moment_max: second.iter().cloned().fold(0.0, f64::max),
        mf_error: mf_sq.as_ref().map(|v| v.iter().cloned().fold(0.0, f64::max)),
    };
    Ok(SimOutput {
        result,
        stats: NodeStats {
            t: grid.t,
            second_moment: second,
            mf_sq,
            running_cost: running,
        },
        path_costs,
    })
}

/// Sample mean and 95% half-width `1.96·std/√n`.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

pub fn simulate(m: &ModelParams, gains: &GainSet, cfg: &SimConfig) -> Result<SimResult, SimError> {
    simulate_detailed(m, gains, None, cfg).map(|o| o.result)
}

/// `sup_t Ê|X^(N) − X̄|²` with `X^(N)` under centralized gains and `X̄` under limit gains.
pub fn mf_error(
    m: &ModelParams,
    limit_gains: &GainSet,
    centralized: &GainSet,
    cfg: &SimConfig,
) -> Result<f64, SimError> {
    if !matches!(centralized.flavor, Flavor::Centralized(n) if n == cfg.n_agents) {
        return Err(SimError::InvalidConfig("centralized gains must match N".into()));
    }
    let out = simulate_detailed(m, centralized, Some(limit_gains), cfg)?;
    Ok(out.result.mf_error.expect("mean field process simulated"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapEstimate {
    pub j_ud_hat: f64,
    pub j_uo_hat: f64,
    pub gap_hat: f64,
    pub ci: f64,
}

/// Monte Carlo estimate of `J_soc(decentralized) − J_soc(centralized)`.
pub fn gap_monte_carlo(
    m: &ModelParams,
    decentralized: &GainSet,
    centralized: &GainSet,
    cfg: &SimConfig,
) -> Result<GapEstimate, SimError> {
    let d = simulate_detailed(m, decentralized, None, cfg)?;
    let other = SimConfig {
        seed: if cfg.crn {
            cfg.seed
        } else {
            cfg.seed ^ 0x9e37_79b9_7f4a_7c15
        },
        ..cfg.clone()
    };
    let c = simulate_detailed(m, centralized, None, &other)?;
    let (gap_hat, ci) = if cfg.crn {
        let diffs: Vec<f64> = d.path_costs.iter().zip(&c.path_costs).map(|(a, b)| a - b).collect();
        mean_ci(&diffs)
    } else {
        (
            d.result.j_soc_hat - c.result.j_soc_hat,
            d.result.ci_half.hypot(c.result.ci_half),
        )
    };
    Ok(GapEstimate {
        j_ud_hat: d.result.j_soc_hat,
        j_uo_hat: c.result.j_soc_hat,
        gap_hat,
        ci,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapBreakdown {
    pub n_agents: usize,
    pub gap: f64,
    pub zeta0n: f64,
    pub linear_term: f64,
    pub constant_term: f64,
    /// `Λ̌1 + Λ̌2 + Λ̌12 + Λ̌12ᵀ + Λ̌22 − Λ1ᴺ − Λ2ᴺ` at `t = 0`.
    #[serde(skip)]
    pub sum_difference: Mat,
}

/// Exact `J_soc(decentralized) − J_soc(centralized)` from the finite and check systems.
pub fn gap_exact(
    m: &ModelParams,
    n_agents: usize,
    limit: &LimitSolution,
    law: &InitialLaw,
    opts: &Options,
) -> Result<GapBreakdown, SolveError> {
    let nf = n_agents as f64;
    let f = solve_finite(m, n_agents, opts)?.initial();
    let c = solve_check(m, n_agents, limit, opts)?.initial();
    let mu = Mat::from_column_slice(law.mu0.len(), 1, law.mu0.as_slice());
    let q = |w: &Mat| (mu.transpose() * w * &mu)[(0, 0)];
    let sum_difference = &c.l1 + &c.l2 + &c.l12 + c.l12.transpose() + &c.l22 - &f.l1 - &f.l2;
    let dl1 = &c.l1 - &f.l1;
    let traces: f64 = (0..n_agents).map(|i| (&dl1 * law.sigma(i)).trace()).sum();
    let zeta0n = traces + nf * q(&sum_difference) - q(&(&c.l2 - &f.l2));
    let linear_term = 2.0 * nf * (mu.transpose() * (&c.s1 + &c.s2 - &f.s))[(0, 0)];
    let constant_term = nf * (c.r - f.r);
    Ok(GapBreakdown {
        n_agents,
        gap: zeta0n + linear_term + constant_term,
        zeta0n,
        linear_term,
        constant_term,
        sum_difference,
    })
}
