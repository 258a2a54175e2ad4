//! `mflq`: solve, simulate and compare linear-quadratic mean field social problems.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mflq::finite_riccati::{convergence_table, solve_finite};
use mflq::full_oracle::{eig_factorization_mismatch, extract_blocks, optimal_value, solve_full, DEFAULT_CAP};
use mflq::gains::{centralized_gains, decentralized_gains, GainSet};
use mflq::limit_riccati::{solve_limit, LimitSolution};
use mflq::mfg_compare::{compare, difference_trajectory};
use mflq::model::{preset, ModelConfig, PRESETS};
use mflq::odecore::{sup_distance, Failure, MatrixTrajectory, Options};
use mflq::portfolio::{closed_forms, verify_against_solver, PortfolioParams};
use mflq::simulate::{gap_exact, gap_monte_carlo, simulate_detailed, SimConfig, SimError};
use mflq::{InitialLaw, ModelParams, SolveError};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "mflq", version, about = "Linear-quadratic mean field social optimization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// JSON model file.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named model: example1, example2, example3, decoupled_m0, portfolio_lq.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    rtol: Option<f64>,
    #[arg(long, global = true)]
    atol: Option<f64>,
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Solve the limiting system and report asymptotic solvability.
    SolveLimit,
    /// Solve the rescaled finite-population system.
    SolveFinite {
        #[arg(long = "N", short = 'N')]
        n: usize,
    },
    /// Brute-force full-population solve with block extraction checks.
    Oracle {
        #[arg(long = "N", short = 'N')]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: usize,
    },
    /// Exact optimality gap of decentralized control over a list of population sizes.
    GapSweep {
        /// Comma list with optional ranges, e.g. `1..200` or `1,2,5..8`.
        #[arg(long = "N-list", default_value = "1..200")]
        n_list: String,
    },
    /// Monte Carlo simulation of the closed loop.
    Simulate {
        #[arg(long = "N", short = 'N')]
        n: usize,
        #[arg(long, default_value_t = 2000)]
        paths: usize,
        /// Euler steps on [0, T].
        #[arg(long, default_value_t = mflq::simulate::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, value_parser = ["centralized", "decentralized"], default_value = "centralized")]
        flavor: String,
        /// Also estimate the gap with common random numbers.
        #[arg(long)]
        gap: bool,
    },
    /// Mean field game equilibrium versus the social optimum.
    MfgCompare,
    /// Mean-variance portfolio closed forms against the solver.
    Portfolio {
        #[arg(long, default_value_t = 0.05)]
        rho: f64,
        #[arg(long, default_value_t = 0.15)]
        alpha: f64,
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1.0)]
        x0: f64,
    },
    /// Sup-norm distance of finite-N solutions to the limit.
    Convergence {
        #[arg(long = "N-list", default_value = "25,50,100,200")]
        n_list: String,
    },
}

/// Files written by one command, with their hashes.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), text).with_context(|| format!("writing {name}"))?;
        self.files.push((name.to_string(), sha256_hex(text.as_bytes())));
        Ok(())
    }

    fn json(&mut self, name: &str, v: &Value) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(v)? + "\n"))
    }

    fn trajectory(&mut self, name: &str, t: &MatrixTrajectory) -> Result<()> {
        self.write(name, &trajectory_csv(t))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn matrix_header(r: usize, c: usize) -> String {
    let mut h = Vec::with_capacity(r * c);
    for i in 1..=r {
        for j in 1..=c {
            h.push(format!("m_{i}_{j}"));
        }
    }
    h.join(",")
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

fn trajectory_csv(t: &MatrixTrajectory) -> String {
    let (r, c) = t.values.first().map(|m| (m.nrows(), m.ncols())).unwrap_or((0, 0));
    let mut s = format!("t,{}\n", matrix_header(r, c));
    for (time, v) in t.times.iter().zip(&t.values) {
        s.push_str(&num(*time));
        for x in row_major(v) {
            s.push(',');
            s.push_str(&num(x));
        }
        s.push('\n');
    }
    s
}

fn parse_n_list(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (usize, usize) = (a.trim().parse()?, b.trim_start_matches('=').trim().parse()?);
            if a > b {
                bail!("empty range {part}");
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse()?);
        }
    }
    if out.is_empty() || out.contains(&0) {
        bail!("N list must hold positive sizes");
    }
    Ok(out)
}

fn options(g: &Global) -> Options {
    let mut o = Options::default();
    if let Some(r) = g.rtol {
        o.rtol = r;
    }
    if let Some(a) = g.atol {
        o.atol = a;
    }
    o
}

struct Loaded {
    model: ModelParams,
    law: InitialLaw,
    source: Value,
}

fn load(g: &Global) -> Result<Loaded> {
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = ModelConfig::from_json(&text)?;
        let model = cfg.model()?;
        let law = match cfg.law(model.n)? {
            Some(l) => l,
            None => InitialLaw::deterministic(DVector::from_element(model.n, 1.0)),
        };
        Ok(Loaded {
            source: json!({"config": path.display().to_string(), "sha256": sha256_hex(text.as_bytes())}),
            model,
            law,
        })
    } else if let Some(name) = &g.preset {
        let model = preset(name)?;
        Ok(Loaded {
            law: InitialLaw::deterministic(DVector::from_element(model.n, 1.0)),
            source: json!({"preset": name}),
            model,
        })
    } else {
        bail!(
            "one of --config or --preset is required (presets: {})",
            PRESETS.join(", ")
        )
    }
}

fn failure_json(f: &Failure) -> Value {
    let (kind, constraint) = match f {
        Failure::PositivityViolation { constraint, .. } => ("positivity_violation", Some(constraint.clone())),
        Failure::BlowUp { .. } => ("blow_up", None),
        Failure::StepFailure { .. } => ("step_failure", None),
    };
    json!({
        "solvable": false,
        "failure_time": f.time(),
        "failure_kind": kind,
        "failed_constraint": constraint,
        "message": f.to_string(),
    })
}

/// Outcome of a command: solved, or a clean unsolvable verdict.
enum Status {
    Solved,
    Unsolvable,
}

/// Turns a solver failure into an unsolvable verdict written to `verdict.json`.
fn verdict_or_error<T>(r: Result<T, SolveError>, out: &mut Outputs, what: &str) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(SolveError::Failed(f)) => {
            let mut v = failure_json(&f.failure);
            v["system"] = json!(what);
            out.json("verdict.json", &v)?;
            let parts = f.partial.trajectories();
            for (name, t) in parts {
                out.trajectory(&format!("partial_{name}.csv"), &t)?;
            }
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn gains_csv(out: &mut Outputs, g: &GainSet) -> Result<()> {
    for (name, t) in g.trajectories() {
        out.trajectory(&format!("{name}.csv"), &t)?;
    }
    Ok(())
}

fn cmd_solve_limit(g: &Global, out: &mut Outputs) -> Result<Status> {
    let l = load(g)?;
    let Some(lim) = verdict_or_error(solve_limit(&l.model, &options(g)), out, "limit")? else {
        return Ok(Status::Unsolvable);
    };
    out.json("verdict.json", &json!({"solvable": true, "system": "limit"}))?;
    out.trajectory("Lambda1.csv", &lim.lambda1())?;
    out.trajectory("Lambda2.csv", &lim.lambda2())?;
    out.trajectory("Lambda3.csv", &lim.lambda3())?;
    out.trajectory("S.csv", &lim.s())?;
    out.trajectory("r.csv", &lim.r())?;
    gains_csv(out, &decentralized_gains(&l.model, &lim)?)?;
    Ok(Status::Solved)
}

fn cmd_solve_finite(g: &Global, out: &mut Outputs, n: usize) -> Result<Status> {
    let l = load(g)?;
    let Some(f) = verdict_or_error(solve_finite(&l.model, n, &options(g)), out, "finite")? else {
        return Ok(Status::Unsolvable);
    };
    let v = optimal_value(&f, &l.law);
    out.json(
        "verdict.json",
        &json!({"solvable": true, "system": "finite", "N": n, "j_soc": v.j_soc, "j_i": v.j_i}),
    )?;
    out.trajectory("Lambda1N.csv", &f.lambda1())?;
    out.trajectory("Lambda2N.csv", &f.lambda2())?;
    out.trajectory("SN.csv", &f.s())?;
    out.trajectory("rN.csv", &f.r())?;
    gains_csv(out, &centralized_gains(&l.model, &f)?)?;
    Ok(Status::Solved)
}

fn cmd_oracle(g: &Global, out: &mut Outputs, n: usize, cap: usize) -> Result<Status> {
    let l = load(g)?;
    let opts = options(g);
    let Some(full) = verdict_or_error(solve_full(&l.model, n, cap, &opts), out, "full")? else {
        return Ok(Status::Unsolvable);
    };
    let ex = extract_blocks(&full)?;
    let Some(f) = verdict_or_error(solve_finite(&l.model, n, &opts), out, "finite")? else {
        return Ok(Status::Unsolvable);
    };
    let d = [
        sup_distance(&ex.lambda1, &f.lambda1()),
        if n > 1 {
            sup_distance(&ex.lambda2, &f.lambda2())
        } else {
            0.0
        },
        sup_distance(&ex.s, &f.s()),
        sup_distance(&ex.r, &f.r()),
    ];
    let eig = full
        .solution
        .times()
        .iter()
        .map(|t| eig_factorization_mismatch(&l.model, &full, *t))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let pass = d.iter().all(|x| *x <= 1e-6) && eig <= 1e-7;
    out.json(
        "oracle.json",
        &json!({
            "N": n,
            "structure_defect": ex.structure_defect,
            "lambda1_distance": d[0],
            "lambda2_distance": d[1],
            "s_distance": d[2],
            "r_distance": d[3],
            "eig_factorization_mismatch": eig,
            "all_pass": pass,
        }),
    )?;
    out.trajectory("Pi1.csv", &ex.pi1)?;
    out.trajectory("Pi2.csv", &ex.pi2)?;
    out.trajectory("S_block.csv", &ex.s_block)?;
    Ok(Status::Solved)
}

fn cmd_gap_sweep(g: &Global, out: &mut Outputs, list: &str) -> Result<Status> {
    let l = load(g)?;
    let ns = parse_n_list(list)?;
    let opts = options(g);
    let Some(lim) = verdict_or_error(solve_limit(&l.model, &opts), out, "limit")? else {
        return Ok(Status::Unsolvable);
    };
    let rows = ns
        .par_iter()
        .map(|&n| gap_exact(&l.model, n, &lim, &l.law, &opts))
        .collect::<Result<Vec<_>, _>>();
    let Some(rows) = verdict_or_error(rows, out, "finite")? else {
        return Ok(Status::Unsolvable);
    };
    let mut gap = String::from("N,gap,zeta0N,linear,constant\n");
    let n = l.model.n;
    let mut sd = format!("N,{}\n", matrix_header(n, n));
    for r in &rows {
        let _ = writeln!(
            gap,
            "{},{},{},{},{}",
            r.n_agents,
            num(r.gap),
            num(r.zeta0n),
            num(r.linear_term),
            num(r.constant_term)
        );
        let vals: Vec<String> = row_major(&r.sum_difference).map(num).collect();
        let _ = writeln!(sd, "{},{}", r.n_agents, vals.join(","));
    }
    out.write("gap.csv", &gap)?;
    out.write("sum-difference.csv", &sd)?;
    let (imax, max) = rows.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |a, (i, r)| if r.gap > a.1 { (i, r.gap) } else { a },
    );
    let min = rows.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min);
    out.json(
        "gap.json",
        &json!({
            "max_gap": max,
            "argmax_N": rows[imax].n_agents,
            "min_gap": min,
            "bounded": max.is_finite(),
        }),
    )?;
    Ok(Status::Solved)
}

fn cmd_simulate(
    g: &Global,
    out: &mut Outputs,
    n: usize,
    paths: usize,
    steps: usize,
    flavor: &str,
    with_gap: bool,
) -> Result<Status> {
    let l = load(g)?;
    let m = &l.model;
    let opts = options(g);
    if steps == 0 {
        bail!("--steps must be positive");
    }
    let Some(lim) = verdict_or_error(solve_limit(m, &opts), out, "limit")? else {
        return Ok(Status::Unsolvable);
    };
    let Some(fin) = verdict_or_error(solve_finite(m, n, &opts), out, "finite")? else {
        return Ok(Status::Unsolvable);
    };
    let dec = decentralized_gains(m, &lim)?;
    let cen = centralized_gains(m, &fin)?;
    let cfg = SimConfig {
        dt: m.horizon / steps as f64,
        ..SimConfig::new(n, paths, g.seed, l.law.clone(), m.horizon)
    };
    let run = |gs: &GainSet, mf: Option<&GainSet>| simulate_detailed(m, gs, mf, &cfg).map_err(sim_err);
    let o = if flavor == "centralized" {
        run(&cen, Some(&dec))?
    } else {
        run(&dec, None)?
    };
    let reference = if flavor == "centralized" {
        optimal_value(&fin, &l.law).j_soc
    } else {
        gap_exact(m, n, &lim, &l.law, &opts)?.gap + optimal_value(&fin, &l.law).j_soc
    };
    let mut summary = json!({
        "N": n,
        "paths": paths,
        "dt": cfg.dt,
        "seed": g.seed,
        "flavor": flavor,
        "result": o.result,
        "j_soc_exact": reference,
        "z_score": (o.result.j_soc_hat - reference) / (o.result.ci_half / 1.96),
    });
    if with_gap {
        let est = gap_monte_carlo(m, &dec, &cen, &cfg).map_err(sim_err)?;
        summary["gap_monte_carlo"] = serde_json::to_value(&est)?;
        summary["gap_exact"] = json!(gap_exact(m, n, &lim, &l.law, &opts)?.gap);
    }
    out.json("sim.json", &summary)?;
    let s = &o.stats;
    let mut csv = String::from("t,second_moment,mf_sq,running_cost\n");
    for k in 0..s.t.len() {
        let mf = s.mf_sq.as_ref().map(|v| num(v[k])).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            num(s.t[k]),
            num(s.second_moment[k]),
            mf,
            num(s.running_cost[k])
        );
    }
    out.write("stats.csv", &csv)?;
    Ok(Status::Solved)
}

fn sim_err(e: SimError) -> anyhow::Error {
    anyhow!(e)
}

fn cmd_mfg_compare(g: &Global, out: &mut Outputs) -> Result<Status> {
    let l = load(g)?;
    let Some((c, mfg, lim)) = verdict_or_error(compare(&l.model, &l.law, &options(g)), out, "mfg")? else {
        return Ok(Status::Unsolvable);
    };
    out.json("comparison.json", &serde_json::to_value(&c)?)?;
    for k in 1..=4 {
        out.trajectory(&format!("Lambda{k}g.csv"), &mfg.lambda(k))?;
    }
    out.trajectory("game_sum.csv", &mfg.game_sum())?;
    out.trajectory("Lambda1.csv", &lim.lambda1())?;
    out.trajectory("Lambda3.csv", &lim.lambda3())?;
    out.trajectory("difference.csv", &difference_trajectory(&mfg, &lim))?;
    Ok(Status::Solved)
}

fn cmd_portfolio(g: &Global, out: &mut Outputs, p: PortfolioParams) -> Result<Status> {
    let (report, lim): (_, LimitSolution) = verify_against_solver(p, &options(g))?;
    out.json("portfolio.json", &serde_json::to_value(&report)?)?;
    let cf = closed_forms(p);
    let m = p.model().build()?;
    let gs = decentralized_gains(&m, &lim)?;
    let mut csv = String::from("t,Lambda1,S,Theta,Theta2,C_over_A\n");
    for t in lim.solution.times() {
        let st = lim.at(t);
        let k = gs.at(t)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            num(t),
            num(st.l1[(0, 0)]),
            num(st.s[(0, 0)]),
            num(k.theta[(0, 0)]),
            num(k.theta2[(0, 0)]),
            num(cf.c(t) / cf.a(t))
        );
    }
    out.write("portfolio.csv", &csv)?;
    if !report.passed {
        bail!("closed forms disagree with the solver");
    }
    Ok(Status::Solved)
}

fn cmd_convergence(g: &Global, out: &mut Outputs, list: &str) -> Result<Status> {
    let l = load(g)?;
    let ns = parse_n_list(list)?;
    let Some(rows) = verdict_or_error(convergence_table(&l.model, &ns, &options(g)), out, "finite")? else {
        return Ok(Status::Unsolvable);
    };
    let mut csv = String::from("N,e_lambda1,e_lambda2,e_s,e_r\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.n_agents,
            num(r.e1),
            num(r.e2),
            num(r.e_s),
            num(r.e_r)
        );
    }
    out.write("convergence.csv", &csv)?;
    Ok(Status::Solved)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MFLQ_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("MFLQ_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn command_json(c: &Command) -> Value {
    match c {
        Command::SolveLimit => json!({"name": "solve-limit"}),
        Command::SolveFinite { n } => json!({"name": "solve-finite", "N": n}),
        Command::Oracle { n, cap } => json!({"name": "oracle", "N": n, "cap": cap}),
        Command::GapSweep { n_list } => json!({"name": "gap-sweep", "N_list": n_list}),
        Command::Simulate {
            n,
            paths,
            steps,
            flavor,
            gap,
        } => json!({"name": "simulate", "N": n, "paths": paths, "steps": steps, "flavor": flavor, "gap": gap}),
        Command::MfgCompare => json!({"name": "mfg-compare"}),
        Command::Portfolio {
            rho,
            alpha,
            sigma,
            gamma,
            horizon,
            x0,
        } => {
            json!({"name": "portfolio", "rho": rho, "alpha": alpha, "sigma": sigma, "gamma": gamma, "T": horizon, "x0": x0})
        }
        Command::Convergence { n_list } => json!({"name": "convergence", "N_list": n_list}),
    }
}

fn run(cli: &Cli) -> Result<Status> {
    configure_threads()?;
    let g = &cli.global;
    let mut out = Outputs::new(&g.out)?;
    let status = match &cli.command {
        Command::SolveLimit => cmd_solve_limit(g, &mut out)?,
        Command::SolveFinite { n } => cmd_solve_finite(g, &mut out, *n)?,
        Command::Oracle { n, cap } => cmd_oracle(g, &mut out, *n, *cap)?,
        Command::GapSweep { n_list } => cmd_gap_sweep(g, &mut out, n_list)?,
        Command::Simulate {
            n,
            paths,
            steps,
            flavor,
            gap,
        } => cmd_simulate(g, &mut out, *n, *paths, *steps, flavor, *gap)?,
        Command::MfgCompare => cmd_mfg_compare(g, &mut out)?,
        Command::Portfolio {
            rho,
            alpha,
            sigma,
            gamma,
            horizon,
            x0,
        } => cmd_portfolio(
            g,
            &mut out,
            PortfolioParams {
                rho: *rho,
                alpha: *alpha,
                sigma: *sigma,
                gamma: *gamma,
                horizon: *horizon,
                x0: *x0,
            },
        )?,
        Command::Convergence { n_list } => cmd_convergence(g, &mut out, n_list)?,
    };
    let source = match (&g.config, &g.preset) {
        (None, None) => Value::Null,
        _ => load(g)?.source,
    };
    let opts = options(g);
    let manifest = json!({
        "command": command_json(&cli.command),
        "source": source,
        "options": {"rtol": opts.rtol, "atol": opts.atol, "seed": g.seed},
        "out": g.out.display().to_string(),
        "status": match status { Status::Solved => "solved", Status::Unsolvable => "unsolvable" },
        "artifacts": out.files.iter().map(|(f, h)| json!({"file": f, "sha256": h})).collect::<Vec<_>>(),
    });
    std::fs::write(
        g.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Status::Solved) => ExitCode::SUCCESS,
        Ok(Status::Unsolvable) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
