//! Brute-force `Nn`-dimensional systems for small populations.
//!
//! The optimal value `V = xᵀPx + 2xᵀS + r` is solved without any use of the
//! block structure, and the cost of the decentralized control is obtained
//! from the Kolmogorov backward equation of the joint linear closed loop
//! `(x, x̄)`. Extraction then checks the exchangeable block structure and
//! rescales to the `n × n` quantities of the finite-`N` solvers.

use crate::finite_riccati::{CheckSolution, FiniteSolution};
use crate::gains::{centralized_at, decentralized_at, GainsAt};
use crate::limit_riccati::LimitSolution;
use crate::linalg::{inv_sym, kron, ones, sym, sym_eigenvalues, SingularInverse};
use crate::model::{InitialLaw, ModelParams};
use crate::odecore::{self, Constraint, Layout, MatrixTrajectory, Options, Solution};
use crate::SolveError;
use nalgebra::{DMatrix, DVector};

type Mat = DMatrix<f64>;

pub const DEFAULT_CAP: usize = 64;
pub const BLOCK_TOL: f64 = 1e-8;

/// Compact `N`-agent system matrices.
#[derive(Debug, Clone)]
pub struct BigSystem {
    pub n_agents: usize,
    pub n: usize,
    pub n1: usize,
    pub a: Mat,
    pub b_hat: Mat,
    pub b0: Mat,
    pub d0: Mat,
    /// `e_k ⊗ B1`.
    pub b_k: Vec<Mat>,
    /// `e_k ⊗ D`.
    pub d_k: Vec<Mat>,
    pub q: Mat,
    pub qf: Mat,
    pub r: Mat,
    /// `1ᵀ ⊗ I_{n1}`.
    pub i_hat: Mat,
}

fn unit(n_agents: usize, k: usize) -> Mat {
    let mut e = Mat::zeros(n_agents, 1);
    e[(k, 0)] = 1.0;
    e
}

/// `e_k = (e_k ⊗ I_{n1})ᵀ`, the selector of agent `k`'s control.
fn selector(n_agents: usize, n1: usize, k: usize) -> Mat {
    kron(&unit(n_agents, k), &Mat::identity(n1, n1)).transpose()
}

pub fn assemble(m: &ModelParams, n_agents: usize, cap: usize) -> Result<BigSystem, SolveError> {
    let nn = n_agents * m.n;
    if nn > cap {
        return Err(SolveError::CapExceeded(nn, cap));
    }
    let nf = n_agents as f64;
    let w = m.derived();
    let eye = Mat::identity(n_agents, n_agents);
    let all = ones(n_agents, n_agents);
    Ok(BigSystem {
        n_agents,
        n: m.n,
        n1: m.n1,
        a: kron(&eye, &m.a) + kron(&all, &(&m.g / nf)),
        b_hat: kron(&eye, &m.b),
        b0: kron(&ones(n_agents, 1), &(&m.b0 / nf)),
        d0: kron(&ones(n_agents, 1), &m.d0),
        b_k: (0..n_agents).map(|k| kron(&unit(n_agents, k), &m.b1)).collect(),
        d_k: (0..n_agents).map(|k| kron(&unit(n_agents, k), &m.d)).collect(),
        q: kron(&eye, &m.q) + kron(&all, &(&w.q_gamma / nf)),
        qf: kron(&eye, &m.qf) + kron(&all, &(&w.qf_gamma / nf)),
        r: kron(&eye, &m.r),
        i_hat: kron(&ones(1, n_agents), &Mat::identity(m.n1, m.n1)),
    })
}

impl BigSystem {
    /// `M0(Z) = ½ Σ D_kᵀ Z D_k + ½ D0ᵀ Z D0`.
    pub fn m0(&self, z: &Mat) -> f64 {
        let mut acc = (self.d0.transpose() * z * &self.d0)[(0, 0)];
        for d in &self.d_k {
            acc += (d.transpose() * z * d)[(0, 0)];
        }
        0.5 * acc
    }

    /// `M1(Z) = Σ D_kᵀ Z B_k e_k + D0ᵀ Z B0 Î`, a row of length `N n1`.
    pub fn m1(&self, z: &Mat) -> Mat {
        let mut acc = self.d0.transpose() * z * &self.b0 * &self.i_hat;
        for (k, (d, b)) in self.d_k.iter().zip(&self.b_k).enumerate() {
            acc += d.transpose() * z * b * selector(self.n_agents, self.n1, k);
        }
        acc
    }

    /// `M2(Z) = ½ Σ e_kᵀ B_kᵀ Z B_k e_k + ½ Îᵀ B0ᵀ Z B0 Î`.
    pub fn m2(&self, z: &Mat) -> Mat {
        let mut acc = self.i_hat.transpose() * self.b0.transpose() * z * &self.b0 * &self.i_hat;
        for (k, b) in self.b_k.iter().enumerate() {
            let e = selector(self.n_agents, self.n1, k);
            acc += e.transpose() * b.transpose() * z * b * e;
        }
        acc * 0.5
    }

    /// `R + 2 M2(P)`.
    pub fn effective_weight(&self, p: &Mat) -> Mat {
        sym(&(&self.r + self.m2(p) * 2.0))
    }
}

/// Full optimal-value system.
#[derive(Debug, Clone)]
pub struct FullSolution {
    pub system: BigSystem,
    /// Blocks `P`, `S`, `r`.
    pub solution: Solution,
}

impl FullSolution {
    pub fn p(&self) -> MatrixTrajectory {
        self.solution.block("P")
    }
    pub fn s(&self) -> MatrixTrajectory {
        self.solution.block("S")
    }
    pub fn r(&self) -> MatrixTrajectory {
        self.solution.block("r")
    }

    /// Smallest eigenvalue of `R + 2 M2(P)` at every node.
    pub fn min_eig_margin(&self) -> Vec<(f64, f64)> {
        let p = self.p();
        p.times
            .iter()
            .zip(&p.values)
            .map(|(t, v)| (*t, crate::linalg::min_eig(&self.system.effective_weight(v))))
            .collect()
    }

    /// `‖P(t)‖_{l1} / N` at every node.
    pub fn scaled_l1_norm(&self) -> Vec<(f64, f64)> {
        let p = self.p();
        let nf = self.system.n_agents as f64;
        p.times
            .iter()
            .zip(&p.values)
            .map(|(t, v)| (*t, v.abs().sum() / nf))
            .collect()
    }

    /// `V(0, x) = xᵀP(0)x + 2xᵀS(0) + r(0)`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        let y = self.solution.initial_state();
        let l = &self.solution.layout;
        let (p, s) = (l.get(y, 0), l.get(y, 1));
        (x.transpose() * p * x)[(0, 0)] + 2.0 * (x.transpose() * s)[(0, 0)] + y[l.len() - 1]
    }
}

pub fn solve_full(m: &ModelParams, n_agents: usize, cap: usize, opts: &Options) -> Result<FullSolution, SolveError> {
    let sys = assemble(m, n_agents, cap)?;
    let nn = n_agents * m.n;
    let layout = Layout::new().with("P", nn, nn, true);
    let rhs = |_t: f64, y: &[f64], out: &mut [f64]| {
        let p = layout.get(y, 0);
        let kinv = inv_sym(&sys.effective_weight(&p))?;
        let pb = &p * &sys.b_hat;
        let dp = &pb * kinv * pb.transpose() - &p * &sys.a - sys.a.transpose() * &p - &sys.q;
        layout.put(out, 0, &sym(&dp));
        Ok(())
    };
    let constraints = [Constraint::new("R+2M2(P)", |y: &[f64]| {
        sys.effective_weight(&layout.get(y, 0))
    })];
    let base = odecore::integrate_backward(
        &layout,
        &rhs,
        layout.pack(&[sys.qf.clone()]),
        m.horizon,
        opts,
        &constraints,
    )?;

    let sr = Layout::new().with("S", nn, 1, false).with("r", 1, 1, false);
    let srhs = |_t: f64, b: &[f64], y: &[f64], out: &mut [f64]| {
        let p = layout.get(b, 0);
        let s = sr.get(y, 0);
        let kinv = inv_sym(&sys.effective_weight(&p))?;
        let v = sys.b_hat.transpose() * &s + sys.m1(&p).transpose();
        sr.put(out, 0, &(&p * &sys.b_hat * &kinv * &v - sys.a.transpose() * &s));
        sr.put(
            out,
            1,
            &(v.transpose() * &kinv * &v - Mat::from_element(1, 1, 2.0 * sys.m0(&p))),
        );
        Ok(())
    };
    let s_terminal = kron(&ones(n_agents, 1), &m.k);
    let follower = odecore::follow(&base, &sr, &srhs, sr.pack(&[s_terminal, Mat::zeros(1, 1)]), opts)?;
    drop(constraints);
    Ok(FullSolution {
        system: sys,
        solution: base.concat(&follower),
    })
}

/// Extracted blocks and their rescaled counterparts.
#[derive(Debug, Clone)]
pub struct Extracted {
    pub pi1: MatrixTrajectory,
    pub pi2: MatrixTrajectory,
    pub s_block: MatrixTrajectory,
    pub lambda1: MatrixTrajectory,
    pub lambda2: MatrixTrajectory,
    pub s: MatrixTrajectory,
    pub r: MatrixTrajectory,
    /// Largest block-equality defect seen.
    pub structure_defect: f64,
}

fn block(m: &Mat, i: usize, j: usize, r: usize, c: usize) -> Mat {
    m.view((i * r, j * c), (r, c)).into_owned()
}

/// Diagonal and off-diagonal blocks of an exchangeable matrix, with the largest defect.
fn two_block(m: &Mat, n_agents: usize, n: usize) -> (Mat, Mat, f64) {
    let d = block(m, 0, 0, n, n);
    let o = if n_agents > 1 {
        block(m, 0, 1, n, n)
    } else {
        Mat::zeros(n, n)
    };
    let mut defect: f64 = 0.0;
    for i in 0..n_agents {
        for j in 0..n_agents {
            let b = block(m, i, j, n, n);
            let want = if i == j { &d } else { &o };
            defect = defect.max((&b - want).abs().max());
        }
    }
    defect = defect.max(crate::linalg::asymmetry(&o));
    (d, o, defect)
}

/// Common block of a stacked vector or matrix of `N` equal `r × c` blocks.
fn stacked(m: &Mat, n_agents: usize, r: usize, c: usize) -> (Mat, f64) {
    let first = block(m, 0, 0, r, c);
    let defect = (0..n_agents)
        .map(|i| (block(m, i, 0, r, c) - &first).abs().max())
        .fold(0.0, f64::max);
    (first, defect)
}

fn structure_check(defect: f64, scale: f64, what: &str) -> Result<(), SolveError> {
    if defect > BLOCK_TOL * (1.0 + scale) {
        Err(SolveError::StructureViolation(format!("{what}: defect {defect:e}")))
    } else {
        Ok(())
    }
}

pub fn extract_blocks(full: &FullSolution) -> Result<Extracted, SolveError> {
    let sys = &full.system;
    let (nag, n) = (sys.n_agents, sys.n);
    let nf = nag as f64;
    let l = &full.solution.layout;
    let mut defect: f64 = 0.0;
    for (_, y) in full.solution.nodes() {
        let p = l.get(y, 0);
        let (_, _, e) = two_block(&p, nag, n);
        let (s, es) = stacked(&l.get(y, 1), nag, n, 1);
        structure_check(e, p.abs().max(), "P blocks")?;
        structure_check(es, s.abs().max(), "S blocks")?;
        defect = defect.max(e).max(es);
    }
    let layout = Layout::new()
        .with("Pi1", n, n, true)
        .with("Pi2", n, n, true)
        .with("S", n, 1, false)
        .with("r", 1, 1, false);
    let sol = full.solution.map_linear(layout.clone(), |y| {
        let (d, o, _) = two_block(&l.get(y, 0), nag, n);
        let s = block(&l.get(y, 1), 0, 0, n, 1);
        layout.pack(&[d, o, s, Mat::from_element(1, 1, y[l.len() - 1] / nf)])
    });
    let pi2 = sol.block("Pi2");
    Ok(Extracted {
        pi1: sol.block("Pi1"),
        lambda1: sol.block("Pi1"),
        lambda2: pi2.scale(nf),
        pi2,
        s_block: sol.block("S"),
        s: sol.block("S"),
        r: sol.block("r"),
        structure_defect: defect,
    })
}

/// `Fᴺ` and `Kᴺ` from the rescaled solution at one time.
pub fn f_k(m: &ModelParams, n_agents: usize, l1: &Mat, l2: &Mat) -> (Mat, Mat) {
    let nf = n_agents as f64;
    let k = m.b0.transpose() * (l1 + l2 * (1.0 - 1.0 / nf)) * &m.b0 / nf;
    let f = &k + m.r1(l1);
    (sym(&f), sym(&k))
}

/// Eigenvalues of `R + 2M2(P)` versus `eig(F + (N−1)K) ∪ eig(F − K)^{N−1}`.
///
/// Returns the largest mismatch of the sorted lists.
pub fn eig_factorization_mismatch(m: &ModelParams, full: &FullSolution, t: f64) -> Result<f64, SolveError> {
    let sys = &full.system;
    let nag = sys.n_agents;
    let p = full.solution.value("P", t);
    let direct = sym_eigenvalues(&sys.effective_weight(&p));
    let (d, o, _) = two_block(&p, nag, sys.n);
    let (f, k) = f_k(m, nag, &d, &(o * nag as f64));
    Ok(factorized_mismatch(&direct, &f, &k, nag))
}

pub fn factorized_mismatch(direct: &[f64], f: &Mat, k: &Mat, n_agents: usize) -> f64 {
    let mut fact = sym_eigenvalues(&(f + k * (n_agents as f64 - 1.0)));
    let single = sym_eigenvalues(&(f - k));
    for _ in 1..n_agents {
        fact.extend_from_slice(&single);
    }
    fact.sort_by(|a, b| a.total_cmp(b));
    if fact.len() != direct.len() {
        return f64::INFINITY;
    }
    direct.iter().zip(&fact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn eig_factorization_check(m: &ModelParams, full: &FullSolution, t: f64) -> bool {
    matches!(eig_factorization_mismatch(m, full, t), Ok(e) if e <= 1e-7)
}

/// Per-agent and social optimal cost.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct OptimalValue {
    pub j_soc: f64,
    pub j_i: f64,
}

/// `J_i = Tr[Λ1ᴺΣ0] + μ0ᵀ(Λ1ᴺ + (1−1/N)Λ2ᴺ)μ0 + 2Sᴺᵀμ0 + rᴺ` at `t = 0`.
pub fn optimal_value(finite: &FiniteSolution, law: &InitialLaw) -> OptimalValue {
    let nag = finite.n_agents;
    let nf = nag as f64;
    let st = finite.initial();
    let mu = Mat::from_column_slice(law.mu0.len(), 1, law.mu0.as_slice());
    let quad = (mu.transpose() * (&st.l1 + &st.l2 * (1.0 - 1.0 / nf)) * &mu)[(0, 0)]
        + 2.0 * (st.s.transpose() * &mu)[(0, 0)]
        + st.r;
    let traces: Vec<f64> = (0..nag).map(|i| (&st.l1 * law.sigma(i)).trace()).collect();
    let j_soc = nf * quad + traces.iter().sum::<f64>();
    OptimalValue { j_soc, j_i: j_soc / nf }
}

/// Coefficients of a linear closed loop `dY = (𝔄Y + 𝔟)dt + Σ_k (𝔠_k Y + 𝔡_k) dW_k`
/// with running cost `YᵀQY + 2Yᵀq + c`.
#[derive(Debug, Clone)]
pub struct LinearLoop {
    pub drift: Mat,
    pub offset: Mat,
    pub noise: Vec<(Mat, Mat)>,
    pub q: Mat,
    pub q_lin: Mat,
    pub q_const: f64,
}

/// Backward equations of `E[∫ cost + terminal] = YᵀV2Y + 2YᵀV1 + V0` along `base`'s steps.
///
/// Returns a solution with blocks `V2`, `V1`, `V0`.
pub fn closed_loop_cost(
    base: &Solution,
    dim: usize,
    coeffs: &dyn Fn(f64, &[f64]) -> Result<LinearLoop, SingularInverse>,
    terminal_q: Mat,
    terminal_lin: Mat,
    opts: &Options,
) -> Result<Solution, SolveError> {
    let layout = Layout::new()
        .with("V2", dim, dim, true)
        .with("V1", dim, 1, false)
        .with("V0", 1, 1, false);
    let rhs = |t: f64, b: &[f64], y: &[f64], out: &mut [f64]| {
        let c = coeffs(t, b)?;
        let (v2, v1) = (layout.get(y, 0), layout.get(y, 1));
        let mut d2 = &v2 * &c.drift + c.drift.transpose() * &v2 + &c.q;
        let mut d1 = c.drift.transpose() * &v1 + &v2 * &c.offset + &c.q_lin;
        let mut d0 = 2.0 * (c.offset.transpose() * &v1)[(0, 0)] + c.q_const;
        for (cc, dd) in &c.noise {
            let v2c = &v2 * cc;
            d2 += cc.transpose() * &v2c;
            d1 += v2c.transpose() * dd;
            d0 += (dd.transpose() * &v2 * dd)[(0, 0)];
        }
        layout.put(out, 0, &(-sym(&d2)));
        layout.put(out, 1, &(-d1));
        out[layout.len() - 1] = -d0;
        Ok(())
    };
    let terminal = layout.pack(&[terminal_q, terminal_lin, Mat::zeros(1, 1)]);
    Ok(odecore::follow(base, &layout, &rhs, terminal, opts)?)
}

/// Closed loop of `(x, x̄)` under the decentralized control `U = −Θ̂x − Θ̂1x̄ − Θ̂2`.
pub fn decentralized_loop(m: &ModelParams, sys: &BigSystem, g: &GainsAt) -> LinearLoop {
    let (nag, n) = (sys.n_agents, sys.n);
    let nf = nag as f64;
    let nn = nag * n;
    let dim = nn + n;
    let th_hat = kron(&Mat::identity(nag, nag), &g.theta);
    let th1_hat = kron(&ones(nag, 1), &g.theta1);
    let th2_hat = kron(&ones(nag, 1), &g.theta2);
    let z0 = -(&m.b0 * (&g.theta + &g.theta1));
    let z1 = &m.a + &m.g - &m.b * (&g.theta + &g.theta1);

    let mut drift = Mat::zeros(dim, dim);
    drift
        .view_mut((0, 0), (nn, nn))
        .copy_from(&(&sys.a - &sys.b_hat * &th_hat));
    drift.view_mut((0, nn), (nn, n)).copy_from(&(-(&sys.b_hat * &th1_hat)));
    drift.view_mut((nn, nn), (n, n)).copy_from(&z1);
    let mut offset = Mat::zeros(dim, 1);
    offset.view_mut((0, 0), (nn, 1)).copy_from(&(-(&sys.b_hat * &th2_hat)));
    offset.view_mut((nn, 0), (n, 1)).copy_from(&(-(&m.b * &g.theta2)));

    let mut noise = Vec::with_capacity(nag + 1);
    for k in 0..nag {
        let sel = kron(&unit(nag, k), &Mat::identity(n, n)).transpose();
        let bk = &sys.b_k[k];
        let mut c = Mat::zeros(dim, dim);
        c.view_mut((0, 0), (nn, nn)).copy_from(&(-(bk * &g.theta * sel)));
        c.view_mut((0, nn), (nn, n)).copy_from(&(-(bk * &g.theta1)));
        let mut d = Mat::zeros(dim, 1);
        d.view_mut((0, 0), (nn, 1)).copy_from(&(&sys.d_k[k] - bk * &g.theta2));
        noise.push((c, d));
    }
    let sum_theta = kron(&ones(1, nag), &g.theta);
    let mut c0 = Mat::zeros(dim, dim);
    c0.view_mut((0, 0), (nn, nn)).copy_from(&(-(&sys.b0 * &sum_theta)));
    c0.view_mut((0, nn), (nn, n)).copy_from(&(-(&sys.b0 * &g.theta1) * nf));
    c0.view_mut((nn, nn), (n, n)).copy_from(&z0);
    let mut d0 = Mat::zeros(dim, 1);
    d0.view_mut((0, 0), (nn, 1))
        .copy_from(&(&sys.d0 - &sys.b0 * &g.theta2 * nf));
    d0.view_mut((nn, 0), (n, 1)).copy_from(&(&m.d0 - &m.b0 * &g.theta2));
    noise.push((c0, d0));

    let mut gain = Mat::zeros(nag * sys.n1, dim);
    gain.view_mut((0, 0), (nag * sys.n1, nn)).copy_from(&th_hat);
    gain.view_mut((0, nn), (nag * sys.n1, n)).copy_from(&th1_hat);
    let mut q = gain.transpose() * &sys.r * &gain;
    let mut qx = q.view((0, 0), (nn, nn)).into_owned();
    qx += &sys.q;
    q.view_mut((0, 0), (nn, nn)).copy_from(&qx);
    LinearLoop {
        drift,
        offset,
        noise,
        q: sym(&q),
        q_lin: gain.transpose() * &sys.r * &th2_hat,
        q_const: (th2_hat.transpose() * &sys.r * &th2_hat)[(0, 0)],
    }
}

/// Closed loop of `x` under the centralized control `u_i = −Θᴺx_i − Θ1ᴺx^{(N)} − Θ2ᴺ`.
pub fn centralized_loop(m: &ModelParams, sys: &BigSystem, g: &GainsAt) -> LinearLoop {
    let nag = sys.n_agents;
    let nf = nag as f64;
    let avg = kron(&ones(1, nag), &Mat::identity(m.n, m.n)) / nf;
    let gain = kron(&Mat::identity(nag, nag), &g.theta) + kron(&ones(nag, 1), &(&g.theta1 * &avg));
    let th2_hat = kron(&ones(nag, 1), &g.theta2);
    let mut noise = Vec::with_capacity(nag + 1);
    for k in 0..nag {
        let e = selector(nag, sys.n1, k);
        let bk = &sys.b_k[k];
        noise.push((-(bk * &e * &gain), &sys.d_k[k] - bk * &e * &th2_hat));
    }
    noise.push((
        -(&sys.b0 * &sys.i_hat * &gain),
        &sys.d0 - &sys.b0 * &sys.i_hat * &th2_hat,
    ));
    LinearLoop {
        drift: &sys.a - &sys.b_hat * &gain,
        offset: -(&sys.b_hat * &th2_hat),
        noise,
        q: sym(&(&sys.q + gain.transpose() * &sys.r * &gain)),
        q_lin: gain.transpose() * &sys.r * &th2_hat,
        q_const: (th2_hat.transpose() * &sys.r * &th2_hat)[(0, 0)],
    }
}

/// Cost of the centralized control evaluated on the finite solution's steps.
pub fn centralized_cost(
    m: &ModelParams,
    finite: &FiniteSolution,
    cap: usize,
    opts: &Options,
) -> Result<Solution, SolveError> {
    let sys = assemble(m, finite.n_agents, cap)?;
    let nag = finite.n_agents;
    let coeffs = |_t: f64, b: &[f64]| {
        let st = finite.state_from(b);
        let k = centralized_at(m, nag, &st.l1, &st.l2, &st.s)?;
        Ok(centralized_loop(
            m,
            &sys,
            &GainsAt {
                theta: k.theta,
                theta1: k.theta1,
                theta2: k.theta2,
            },
        ))
    };
    let nn = nag * m.n;
    closed_loop_cost(
        &finite.solution,
        nn,
        &coeffs,
        sys.qf.clone(),
        kron(&ones(nag, 1), &m.k),
        opts,
    )
}

/// Full decentralized-cost solution with its rescaled extraction.
#[derive(Debug, Clone)]
pub struct FullCheck {
    pub system: BigSystem,
    /// Blocks `V2`, `V1`, `V0` of the joint `(x, x̄)` value.
    pub solution: Solution,
    /// Rescaled extraction with blocks named as in the finite check system.
    pub rescaled: CheckSolution,
    pub structure_defect: f64,
}

impl FullCheck {
    /// `V̌(0, x, x̄)`.
    pub fn value(&self, x: &DVector<f64>, xbar: &DVector<f64>) -> f64 {
        let mut yv = x.as_slice().to_vec();
        yv.extend_from_slice(xbar.as_slice());
        let y = DVector::from_vec(yv);
        let s = self.solution.initial_state();
        let l = &self.solution.layout;
        let (v2, v1) = (l.get(s, 0), l.get(s, 1));
        (y.transpose() * v2 * &y)[(0, 0)] + 2.0 * (y.transpose() * v1)[(0, 0)] + s[l.len() - 1]
    }
}

pub fn solve_full_check(
    m: &ModelParams,
    n_agents: usize,
    limit: &LimitSolution,
    cap: usize,
    opts: &Options,
) -> Result<FullCheck, SolveError> {
    let sys = assemble(m, n_agents, cap)?;
    let (n, nag) = (m.n, n_agents);
    let nf = nag as f64;
    let nn = nag * n;
    let dim = nn + n;
    let coeffs = |_t: f64, b: &[f64]| {
        let st = limit.state_from(b);
        let k = decentralized_at(m, &st.l1, &st.l2, &st.s)?;
        Ok(decentralized_loop(
            m,
            &sys,
            &GainsAt {
                theta: k.theta,
                theta1: k.theta1,
                theta2: k.theta2,
            },
        ))
    };
    let mut tq = Mat::zeros(dim, dim);
    tq.view_mut((0, 0), (nn, nn)).copy_from(&sys.qf);
    let mut tl = Mat::zeros(dim, 1);
    tl.view_mut((0, 0), (nn, 1)).copy_from(&kron(&ones(nag, 1), &m.k));
    let sol = closed_loop_cost(&limit.solution, dim, &coeffs, tq, tl, opts)?;

    let split = |y: &[f64]| {
        let l = &sol.layout;
        let (v2, v1) = (l.get(y, 0), l.get(y, 1));
        (
            v2.view((0, 0), (nn, nn)).into_owned(),
            v2.view((0, nn), (nn, n)).into_owned(),
            v2.view((nn, nn), (n, n)).into_owned(),
            v1.view((0, 0), (nn, 1)).into_owned(),
            v1.view((nn, 0), (n, 1)).into_owned(),
            y[l.len() - 1],
        )
    };
    let mut defect: f64 = 0.0;
    for (_, y) in sol.nodes() {
        let (p1, p12, _, s1, _, _) = split(y);
        let (_, _, e1) = two_block(&p1, nag, n);
        let (_, e2) = stacked(&p12, nag, n, n);
        let (_, e3) = stacked(&s1, nag, n, 1);
        structure_check(e1, p1.abs().max(), "decentralized P1 blocks")?;
        structure_check(e2, p12.abs().max(), "decentralized P12 blocks")?;
        structure_check(e3, s1.abs().max(), "decentralized S1 blocks")?;
        defect = defect.max(e1).max(e2).max(e3);
    }
    let layout = crate::finite_riccati::check_layout(n);
    let rescaled = sol.map_linear(layout.clone(), |y| {
        let (p1, p12, p2, s1, s2, r) = split(y);
        let (d, o, _) = two_block(&p1, nag, n);
        layout.pack(&[
            d,
            o * nf,
            block(&p12, 0, 0, n, n),
            p2 / nf,
            block(&s1, 0, 0, n, 1),
            s2 / nf,
            Mat::from_element(1, 1, r / nf),
        ])
    });
    let rescaled = CheckSolution {
        n_agents: nag,
        solution: rescaled,
    };
    Ok(FullCheck {
        system: sys,
        solution: sol,
        rescaled,
        structure_defect: defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_riccati::{solve_check, solve_finite};
    use crate::limit_riccati::solve_limit;
    use crate::model::preset;
    use crate::odecore::sup_distance;
    use proptest::prelude::*;

    fn s(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn single_agent_collapse() {
        let m = preset("example1").unwrap();
        let sys = assemble(&m, 1, DEFAULT_CAP).unwrap();
        let w = m.derived();
        assert!((sys.a[(0, 0)] - 3.0).abs() < 1e-15);
        assert_eq!(sys.b_hat[(0, 0)], 1.0);
        assert!((sys.q[(0, 0)] - (m.q[(0, 0)] + w.q_gamma[(0, 0)])).abs() < 1e-15);
        let sys2 = assemble(&m, 2, DEFAULT_CAP).unwrap();
        assert!((sys2.a[(0, 1)] - 1.0).abs() < 1e-15);
        assert!(matches!(
            assemble(&m, 65, DEFAULT_CAP),
            Err(SolveError::CapExceeded(65, 64))
        ));
    }

    #[test]
    fn m2_hand_value() {
        let mut m = preset("example1").unwrap();
        m.b1 = s(0.7);
        m.b0 = s(0.4);
        let sys = assemble(&m, 2, DEFAULT_CAP).unwrap();
        let got = sys.m2(&Mat::identity(2, 2));
        // 𝐁0ᵀ I 𝐁0 = 2 (b0/2)², spread over every control pair by Î
        let want = Mat::identity(2, 2) * (0.5 * 0.49) + ones(2, 2) * (0.16 / 4.0);
        assert!((got - want).abs().max() < 1e-15);
    }

    #[test]
    fn factorization_by_hand() {
        let direct = [1.5, 1.5, 3.0];
        assert!(factorized_mismatch(&direct, &s(2.0), &s(0.5), 3) < 1e-15);
        let direct = [2.0, 2.0, 2.0, 2.0];
        assert!(factorized_mismatch(&direct, &s(2.0), &s(0.0), 4) < 1e-15);
    }

    #[test]
    fn decoupled_full() {
        let m = preset("decoupled_m0").unwrap();
        let f = solve_full(&m, 3, DEFAULT_CAP, &Options::default()).unwrap();
        let e = extract_blocks(&f).unwrap();
        assert!(e.pi2.sup_norm() < 1e-12);
        assert!(f.s().sup_norm() == 0.0 && f.r().sup_norm() == 0.0);
        assert!((e.lambda1.first()[(0, 0)] - 0.5).abs() < 1e-8);
        let lim = solve_limit(&m, &Options::default()).unwrap();
        let c = solve_full_check(&m, 2, &lim, DEFAULT_CAP, &Options::default()).unwrap();
        assert!(sup_distance(&c.rescaled.block("cL1"), &lim.lambda1()) < 1e-9);
        for b in ["cL2", "cL12", "cL22", "cS1", "cS2", "cr"] {
            assert!(c.rescaled.block(b).sup_norm() < 1e-12, "{b}");
        }
    }

    #[test]
    fn example1_equivalence_and_value() {
        let m = preset("example1").unwrap();
        let o = Options::default();
        for n in [1, 2, 3] {
            let full = solve_full(&m, n, DEFAULT_CAP, &o).unwrap();
            let e = extract_blocks(&full).unwrap();
            let fin = solve_finite(&m, n, &o).unwrap();
            assert!(sup_distance(&e.lambda1, &fin.lambda1()) < 1e-6);
            if n > 1 {
                assert!(sup_distance(&e.lambda2, &fin.lambda2()) < 1e-6);
            }
            let law = InitialLaw::deterministic(DVector::from_element(1, 1.0));
            let v = optimal_value(&fin, &law);
            let x = DVector::from_element(n, 1.0);
            assert!((v.j_soc - full.value(&x)).abs() < 1e-6 * (1.0 + v.j_soc.abs()));
        }
    }

    #[test]
    fn permutation_invariance() {
        let m = preset("example1").unwrap();
        let full = solve_full(&m, 4, DEFAULT_CAP, &Options::default()).unwrap();
        let p = full.p();
        let mut j = Mat::identity(4, 4);
        j.swap_rows(0, 2);
        for v in &p.values {
            assert!((&j * v * j.transpose() - v).abs().max() <= 1e-9);
        }
        assert!(eig_factorization_check(&m, &full, 0.0));
    }

    #[test]
    fn centralized_cost_equals_optimal_value() {
        let mut m = preset("example1").unwrap();
        m.d = s(0.3);
        m.d0 = s(-0.2);
        let o = Options::default();
        let fin = solve_finite(&m, 3, &o).unwrap();
        let full = solve_full(&m, 3, DEFAULT_CAP, &o).unwrap();
        let c = centralized_cost(&m, &fin, DEFAULT_CAP, &o).unwrap();
        let x = DVector::from_row_slice(&[1.0, -0.5, 2.0]);
        let y = c.initial_state();
        let l = &c.layout;
        let v =
            (x.transpose() * l.get(y, 0) * &x)[(0, 0)] + 2.0 * (x.transpose() * l.get(y, 1))[(0, 0)] + y[l.len() - 1];
        assert!((v - full.value(&x)).abs() < 1e-6, "{v} vs {}", full.value(&x));
    }

    #[test]
    fn decentralized_check_matches_rescaled() {
        let mut m = preset("example1").unwrap();
        m.d = s(0.3);
        m.d0 = s(-0.2);
        let o = Options::default();
        let lim = solve_limit(&m, &o).unwrap();
        for n in [1, 2, 3] {
            let full = solve_full_check(&m, n, &lim, DEFAULT_CAP, &o).unwrap();
            let small = solve_check(&m, n, &lim, &o).unwrap();
            for b in ["cL1", "cL12", "cL22", "cS1", "cS2", "cr"] {
                let d = sup_distance(&full.rescaled.block(b), &small.block(b));
                assert!(d < 1e-6, "N={n} {b}: {d}");
            }
            if n > 1 {
                assert!(sup_distance(&full.rescaled.block("cL2"), &small.block("cL2")) < 1e-6);
            }
        }
    }

    #[test]
    fn decentralized_is_suboptimal() {
        let m = preset("example1").unwrap();
        let o = Options::default();
        let lim = solve_limit(&m, &o).unwrap();
        let c = solve_full_check(&m, 3, &lim, DEFAULT_CAP, &o).unwrap();
        let f = solve_full(&m, 3, DEFAULT_CAP, &o).unwrap();
        let x = DVector::from_element(3, 1.0);
        assert!(c.value(&x, &DVector::from_element(1, 1.0)) >= f.value(&x) - 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn eigen_factorization_identity(vf in proptest::collection::vec(-2.0f64..2.0, 4),
                                        vk in proptest::collection::vec(-2.0f64..2.0, 4),
                                        n_agents in 1usize..7) {
            let f = sym(&Mat::from_row_slice(2, 2, &vf));
            let k = sym(&Mat::from_row_slice(2, 2, &vk));
            let e = Mat::identity(n_agents, n_agents);
            let big = kron(&e, &(&f - &k)) + kron(&ones(n_agents, n_agents), &k);
            let mut direct = sym_eigenvalues(&big);
            direct.sort_by(|a, b| a.total_cmp(b));
            prop_assert!(factorized_mismatch(&direct, &f, &k, n_agents) < 1e-9);
        }
    }
}
