//! Primary acceptance criteria 1–9, one PASS/FAIL line each.

use mflq::finite_riccati::{solve_check, solve_finite};
use mflq::full_oracle::{eig_factorization_mismatch, extract_blocks, optimal_value, solve_full, DEFAULT_CAP};
use mflq::gains::{centralized_gains, decentralized_gains};
use mflq::limit_riccati::{solve_limit, LimitSolution};
use mflq::mfg_compare::compare;
use mflq::model::preset;
use mflq::odecore::{sup_distance, Options};
use mflq::portfolio::{verify_against_solver, PortfolioParams};
use mflq::simulate::{gap_exact, gap_monte_carlo, mf_error, simulate, SimConfig};
use mflq::{InitialLaw, ModelParams};
use nalgebra::{DMatrix, DVector};
use serde_json::Value;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn opts() -> Options {
    Options::default()
}

fn unit_law(n: usize) -> InitialLaw {
    InitialLaw::deterministic(DVector::from_element(n, 1.0))
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mflq(args: &[&str], out: &Path, threads: &str) -> (i32, Value) {
    let status = Command::new(env!("CARGO_BIN_EXE_mflq"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("MFLQ_THREADS", threads)
        .output()
        .expect("run mflq");
    let manifest = std::fs::read_to_string(out.join("manifest.json")).map(|s| serde_json::from_str(&s).unwrap());
    (status.status.code().unwrap_or(-1), manifest.unwrap_or(Value::Null))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn criterion1() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    for (p, want_exit) in [("example1", 0), ("example2", 0), ("example3", 2)] {
        let out = dir.path().join(p);
        let t = Instant::now();
        let (code, _) = mflq(&["solve-limit", "--preset", p], &out, "1");
        let el = t.elapsed();
        let v = read_json(&out.join("verdict.json"));
        ensure(code == want_exit, format!("{p}: exit {code}"))?;
        ensure(el < Duration::from_secs(5), format!("{p}: {el:?}"))?;
        let solvable = v["solvable"].as_bool().unwrap();
        ensure(solvable == (want_exit == 0), format!("{p}: solvable={solvable}"))?;
        if !solvable {
            let ft = v["failure_time"].as_f64().unwrap();
            ensure(ft > 0.0 && ft < 2.0, format!("{p}: failure time {ft}"))?;
            notes.push(format!("{p} fails at t={ft:.4}"));
        }
    }
    Ok(format!("example1/2 solvable, {}", notes.join(", ")))
}

fn criterion2() -> Outcome {
    let t = Instant::now();
    let m = preset("decoupled_m0").unwrap();
    let l1 = solve_limit(&m, &opts()).map_err(|e| e.to_string())?.initial().l1[(0, 0)];
    ensure((l1 - 0.5).abs() <= 1e-8, format!("M0 Λ1(0) = {l1}"))?;
    let (r, _) = verify_against_solver(PortfolioParams::default(), &opts()).map_err(|e| e.to_string())?;
    ensure(
        r.lambda1_error <= 1e-8 && r.s_error <= 1e-8,
        format!("portfolio errors {} {}", r.lambda1_error, r.s_error),
    )?;
    ensure(r.lambda3_sup <= 1e-9, format!("Λ3 sup {}", r.lambda3_sup))?;
    ensure(r.identity_error <= 1e-12, format!("identity {}", r.identity_error))?;
    ensure(t.elapsed() < Duration::from_secs(2), format!("{:?}", t.elapsed()))?;
    Ok(format!(
        "M0 Λ1(0)={l1:.10}, portfolio Λ1 err {:.1e}, S err {:.1e}, identity err {:.1e}",
        r.lambda1_error, r.s_error, r.identity_error
    ))
}

fn criterion3() -> Outcome {
    let t = Instant::now();
    let mut worst = [0.0f64; 3];
    for p in ["example1", "example2", "decoupled_m0"] {
        let m = preset(p).unwrap();
        for n in [1, 2, 3, 5, 8] {
            let full = solve_full(&m, n, DEFAULT_CAP, &opts()).map_err(|e| format!("{p} N={n}: {e}"))?;
            let ex = extract_blocks(&full).map_err(|e| format!("{p} N={n}: {e}"))?;
            let f = solve_finite(&m, n, &opts()).map_err(|e| format!("{p} N={n}: {e}"))?;
            let d = [
                sup_distance(&ex.lambda1, &f.lambda1()),
                if n > 1 {
                    sup_distance(&ex.lambda2, &f.lambda2())
                } else {
                    0.0
                },
                sup_distance(&ex.s, &f.s()),
                sup_distance(&ex.r, &f.r()),
            ]
            .into_iter()
            .fold(0.0, f64::max);
            let eig = full
                .solution
                .times()
                .iter()
                .map(|t| eig_factorization_mismatch(&m, &full, *t).unwrap())
                .fold(0.0, f64::max);
            ensure(d <= 1e-6, format!("{p} N={n}: extraction distance {d:e}"))?;
            ensure(
                ex.structure_defect <= 1e-7,
                format!("{p} N={n}: structure {:e}", ex.structure_defect),
            )?;
            ensure(eig <= 1e-7, format!("{p} N={n}: eigenvalues {eig:e}"))?;
            worst = [worst[0].max(d), worst[1].max(ex.structure_defect), worst[2].max(eig)];
        }
    }
    ensure(t.elapsed() < Duration::from_secs(60), format!("{:?}", t.elapsed()))?;
    Ok(format!(
        "max extraction {:.1e}, structure {:.1e}, eigen factorization {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

const RATE_NAMES: [&str; 11] = [
    "Λ1ᴺ",
    "Λ2ᴺ",
    "Sᴺ",
    "rᴺ",
    "Θᴺ",
    "Θ1ᴺ",
    "Θ2ᴺ",
    "Λ̌1−Λ1ᴺ",
    "five-sum",
    "Sᴺ−Š",
    "rᴺ−ř",
];

fn rate_errors(m: &ModelParams, n: usize, lim: &LimitSolution) -> [f64; 11] {
    let f = solve_finite(m, n, &opts()).unwrap();
    let c = solve_check(m, n, lim, &opts()).unwrap();
    let cg = centralized_gains(m, &f).unwrap();
    let dg = decentralized_gains(m, lim).unwrap();
    let mut e = [0.0f64; 11];
    e[0] = sup_distance(&f.lambda1(), &lim.lambda1());
    e[1] = sup_distance(&f.lambda2(), &lim.lambda2());
    e[2] = sup_distance(&f.s(), &lim.s());
    e[3] = sup_distance(&f.r(), &lim.r());
    for t in lim.solution.times() {
        let (fs, cs) = (f.at(t), c.at(t));
        let (a, b) = (cg.at(t).unwrap(), dg.at(t).unwrap());
        let mx = |x: DMatrix<f64>| x.abs().max();
        e[4] = e[4].max(mx(&a.theta - &b.theta));
        e[5] = e[5].max(mx(&a.theta1 - &b.theta1));
        e[6] = e[6].max(mx(&a.theta2 - &b.theta2));
        e[7] = e[7].max(mx(&cs.l1 - &fs.l1));
        let five = &cs.l1 + &cs.l2 + &cs.l12 + cs.l12.transpose() + &cs.l22;
        e[8] = e[8].max(mx(five - &fs.l1 - &fs.l2));
        e[9] = e[9].max(mx(&fs.s - &cs.s1 - &cs.s2));
        e[10] = e[10].max((fs.r - cs.r).abs());
    }
    e
}

fn criterion4() -> Outcome {
    let t = Instant::now();
    let base = preset("example1").unwrap();
    let mut offsets = base.clone();
    offsets.d = DMatrix::from_element(1, 1, 0.3);
    offsets.d0 = DMatrix::from_element(1, 1, 0.3);
    let mut checked = 0;
    let mut zero = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for (label, m) in [("example1", &base), ("example1 with D=D0=0.3", &offsets)] {
        let lim = solve_limit(m, &opts()).unwrap();
        let e: Vec<[f64; 11]> = [25, 50, 100].iter().map(|&n| rate_errors(m, n, &lim)).collect();
        for k in 0..11 {
            if e.iter().all(|x| x[k] == 0.0) {
                zero.push(format!("{} ({label})", RATE_NAMES[k]));
                continue;
            }
            for w in e.windows(2) {
                let r = w[0][k] / w[1][k];
                ensure(
                    (1.5..=2.5).contains(&r),
                    format!("{label}: {} ratio {r:.3}", RATE_NAMES[k]),
                )?;
                lo = lo.min(r);
                hi = hi.max(r);
                checked += 1;
            }
        }
    }
    ensure(t.elapsed() < Duration::from_secs(30), format!("{:?}", t.elapsed()))?;
    Ok(format!(
        "{checked} ratios in [{lo:.3}, {hi:.3}]; exactly zero on example1: {}",
        zero.iter()
            .map(|z| z.split(' ').next().unwrap())
            .collect::<Vec<_>>()
            .join(" ")
    ))
}

fn criterion5() -> Outcome {
    let t = Instant::now();
    let m = preset("example1").unwrap();
    let lim = solve_limit(&m, &opts()).unwrap();
    let law = unit_law(1);
    let rows: Vec<_> = (1..=200)
        .map(|n| gap_exact(&m, n, &lim, &law, &opts()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let gaps: Vec<f64> = rows.iter().map(|g| g.gap).collect();
    let sd: Vec<f64> = rows.iter().map(|g| g.sum_difference.abs().max()).collect();
    ensure(
        sd[199] < sd[99] && sd[99] < sd[49] && sd[199] < 0.02 * sd[0].max(1e-300),
        format!("sum difference {} {} {} {}", sd[0], sd[49], sd[99], sd[199]),
    )?;
    let min = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let (imax, max) = gaps
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (i, g)| if *g > a.1 { (i, *g) } else { a });
    ensure(min >= -1e-8, format!("negative gap {min}"))?;
    ensure(
        max.is_finite() && imax + 1 < 200,
        format!("max {max} at N={}", imax + 1),
    )?;
    let (p50, p100) = (gaps[49] / 50.0, gaps[99] / 100.0);
    ensure(p100 < p50, format!("per-agent gap {p100} vs {p50}"))?;
    let m0 = preset("decoupled_m0").unwrap();
    let lim0 = solve_limit(&m0, &opts()).unwrap();
    let z = (1..=200)
        .map(|n| gap_exact(&m0, n, &lim0, &law, &opts()).unwrap().gap.abs())
        .fold(0.0, f64::max);
    ensure(z <= 1e-9, format!("M0 gap {z}"))?;
    ensure(t.elapsed() < Duration::from_secs(120), format!("{:?}", t.elapsed()))?;
    Ok(format!(
        "min {min:.4}, max {max:.4} at N={}, gap(200)={:.4}, per-agent {p50:.4}→{p100:.4}, sum difference {:.2e}→{:.2e}, M0 max |gap| {z:.1e}",
        imax + 1,
        gaps[199],
        sd[0],
        sd[199]
    ))
}

fn criterion6() -> Outcome {
    let t = Instant::now();
    let m = preset("example1").unwrap();
    let lim = solve_limit(&m, &opts()).unwrap();
    let fin = solve_finite(&m, 20, &opts()).unwrap();
    let (cen, dec) = (
        centralized_gains(&m, &fin).unwrap(),
        decentralized_gains(&m, &lim).unwrap(),
    );
    let cfg = SimConfig::new(20, 2000, 7, unit_law(1), m.horizon);
    let r = simulate(&m, &cen, &cfg).map_err(|e| e.to_string())?;
    let exact = optimal_value(&fin, &cfg.law).j_soc;
    ensure(
        (r.j_soc_hat - exact).abs() <= 3.0 * r.ci_half,
        format!("J_soc_hat {} vs {exact} ± {}", r.j_soc_hat, r.ci_half),
    )?;
    let g = gap_monte_carlo(&m, &dec, &cen, &cfg).map_err(|e| e.to_string())?;
    let ge = gap_exact(&m, 20, &lim, &cfg.law, &opts()).unwrap().gap;
    ensure(
        (g.gap_hat - ge).abs() <= 3.0 * g.ci,
        format!("gap_hat {} vs {ge} ± {}", g.gap_hat, g.ci),
    )?;
    ensure(t.elapsed() < Duration::from_secs(120), format!("{:?}", t.elapsed()))?;
    Ok(format!(
        "J_soc_hat {:.3} ± {:.3} vs {exact:.3}; gap_hat {:.3} ± {:.3} vs {ge:.3}",
        r.j_soc_hat, r.ci_half, g.gap_hat, g.ci
    ))
}

fn criterion7() -> Outcome {
    let t = Instant::now();
    let m = preset("example1").unwrap();
    let lim = solve_limit(&m, &opts()).unwrap();
    let dec = decentralized_gains(&m, &lim).unwrap();
    let errs: Vec<f64> = [10, 20, 40]
        .iter()
        .map(|&n| {
            let cen = centralized_gains(&m, &solve_finite(&m, n, &opts()).unwrap()).unwrap();
            mf_error(&m, &dec, &cen, &SimConfig::new(n, 5000, 7, unit_law(1), m.horizon)).unwrap()
        })
        .collect();
    let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
    for r in ratios {
        ensure((1.4..=2.8).contains(&r), format!("ratio {r:.3} from {errs:?}"))?;
    }
    ensure(t.elapsed() < Duration::from_secs(180), format!("{:?}", t.elapsed()))?;
    Ok(format!(
        "errors {:.3e} {:.3e} {:.3e}, ratios {:.3} {:.3}",
        errs[0], errs[1], errs[2], ratios[0], ratios[1]
    ))
}

fn criterion8() -> Outcome {
    let t = Instant::now();
    let (c, _, _) = compare(&preset("example1").unwrap(), &unit_law(1), &opts()).map_err(|e| e.to_string())?;
    ensure(
        c.lambda1_distance <= 1e-7,
        format!("Λ1g distance {}", c.lambda1_distance),
    )?;
    ensure(c.gain >= -1e-8, format!("gain {}", c.gain))?;
    let (z, _, _) = compare(&preset("decoupled_m0").unwrap(), &unit_law(1), &opts()).map_err(|e| e.to_string())?;
    ensure(z.gain.abs() <= 1e-12, format!("M0 gain {}", z.gain))?;
    ensure(t.elapsed() < Duration::from_secs(5), format!("{:?}", t.elapsed()))?;
    Ok(format!(
        "gain {:.6}, |Λ1g − Λ1| {:.1e}, M0 gain {:.1e}",
        c.gain, c.lambda1_distance, z.gain
    ))
}

fn criterion9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let commands: [&[&str]; 10] = [
        &["solve-limit", "--preset", "example1"],
        &["solve-limit", "--preset", "example3"],
        &["solve-finite", "--preset", "example2", "-N", "7"],
        &["oracle", "--preset", "example1", "-N", "3"],
        &["gap-sweep", "--preset", "example1", "--N-list", "1..12,50"],
        &[
            "simulate", "--preset", "example1", "-N", "6", "--paths", "150", "--steps", "100", "--gap",
        ],
        &[
            "simulate",
            "--preset",
            "example1",
            "-N",
            "4",
            "--paths",
            "90",
            "--steps",
            "50",
            "--flavor",
            "decentralized",
        ],
        &["mfg-compare", "--preset", "example1"],
        &["portfolio"],
        &["convergence", "--preset", "example1", "--N-list", "5,10"],
    ];
    for (i, args) in commands.iter().enumerate() {
        let runs: Vec<(i32, Value)> = ["1", "4", "4"]
            .iter()
            .enumerate()
            .map(|(k, th)| mflq(args, &dir.path().join(format!("{i}_{k}")), th))
            .collect();
        let arts = &runs[0].1["artifacts"];
        ensure(
            arts.as_array().is_some_and(|a| !a.is_empty()),
            format!("{}: no artifacts", args.join(" ")),
        )?;
        for r in &runs[1..] {
            ensure(r.0 == runs[0].0, format!("{}: exit codes differ", args.join(" ")))?;
            ensure(&r.1["artifacts"] == arts, format!("{}: hashes differ", args.join(" ")))?;
        }
    }
    Ok(format!(
        "{} commands, identical hashes at 1 and 4 workers",
        commands.len()
    ))
}

#[test]
fn primary_acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 solvability verdicts", criterion1),
        ("2 analytic Riccati", criterion2),
        ("3 oracle equivalence", criterion3),
        ("4 O(1/N) rates", criterion4),
        ("5 optimality gap", criterion5),
        ("6 Monte Carlo consistency", criterion6),
        ("7 mean field error rate", criterion7),
        ("8 MFG comparison", criterion8),
        ("9 determinism", criterion9),
    ];
    let mut failed = Vec::new();
    let mut stdout = std::io::stdout();
    for (name, f) in criteria {
        let t = Instant::now();
        let r = f();
        let line = match &r {
            Ok(d) => format!("criterion {name}: PASS ({:.1}s) {d}\n", t.elapsed().as_secs_f64()),
            Err(d) => format!("criterion {name}: FAIL ({:.1}s) {d}\n", t.elapsed().as_secs_f64()),
        };
        stdout.write_all(line.as_bytes()).unwrap();
        stdout.flush().unwrap();
        if r.is_err() {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
