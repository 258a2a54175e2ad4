//! Limiting Riccati system `(Λ1, Λ2)` with its linear companions `(S, r)`.
//!
//! `Λ1' = Ψ1(Λ1)`, `Λ2' = Ψ2(Λ1, Λ2)` backward from `Λ1(T) = QF`,
//! `Λ2(T) = QF^Γ` under `R1(Λ1) > 0`, `R2(Λ1, Λ2) > 0`. Existence on the whole
//! horizon is equivalent to asymptotic solvability of the social problem.

use crate::linalg::{inv_sym, min_eig, sym, SingularInverse};
use crate::model::{DerivedWeights, ModelParams};
use crate::odecore::{self, Constraint, Failure, Layout, MatrixTrajectory, Options, Solution};
use crate::SolveError;
use nalgebra::DMatrix;

type Mat = DMatrix<f64>;

pub fn r1(m: &ModelParams, l1: &Mat) -> Mat {
    m.r1(l1)
}

pub fn r2(m: &ModelParams, l1: &Mat, l2: &Mat) -> Mat {
    m.r2(l1, l2)
}

/// `Ψ1 = L1 B R1⁻¹ Bᵀ L1 − L1 A − Aᵀ L1 − Q`.
pub fn psi1(m: &ModelParams, l1: &Mat) -> Result<Mat, SingularInverse> {
    let h = inv_sym(&m.r1(l1))?;
    let lb = l1 * &m.b;
    Ok(sym(&(&lb * h * lb.transpose()
        - l1 * &m.a
        - m.a.transpose() * l1
        - &m.q)))
}

/// `Ψ2 = (L1+L2) B R2⁻¹ Bᵀ (L1+L2) − L1 B R1⁻¹ Bᵀ L1 − [L1 G + L2 (A+G)] − [·]ᵀ − Q^Γ`.
pub fn psi2(m: &ModelParams, w: &DerivedWeights, l1: &Mat, l2: &Mat) -> Result<Mat, SingularInverse> {
    let h = inv_sym(&m.r1(l1))?;
    let h1 = inv_sym(&m.r2(l1, l2))?;
    let l3b = (l1 + l2) * &m.b;
    let l1b = l1 * &m.b;
    let apg = &m.a + &m.g;
    let lin = l1 * &m.g + l2 * &apg;
    Ok(sym(&(&l3b * h1 * l3b.transpose()
        - &l1b * h * l1b.transpose()
        - &lin
        - lin.transpose()
        - &w.q_gamma)))
}

/// Right side of the `Λ3 = Λ1 + Λ2` equation.
pub fn psi3(m: &ModelParams, w: &DerivedWeights, l1: &Mat, l3: &Mat) -> Result<Mat, SingularInverse> {
    let k = &m.r + m.b1.transpose() * l1 * &m.b1 + m.b0.transpose() * l3 * &m.b0;
    let h = inv_sym(&sym(&k))?;
    let lb = l3 * &m.b;
    let apg = &m.a + &m.g;
    Ok(sym(&(&lb * h * lb.transpose()
        - l3 * &apg
        - apg.transpose() * l3
        - &w.q3)))
}

/// `w = Bᵀ S + B1ᵀ L1 D + B0ᵀ (L1 + L2) D0`.
fn s_drive(m: &ModelParams, l1: &Mat, l2: &Mat, s: &Mat) -> Mat {
    m.b.transpose() * s + m.b1.transpose() * l1 * &m.d + m.b0.transpose() * (l1 + l2) * &m.d0
}

/// `φ1 = (L1 + L2) B R2⁻¹ w − (A + G)ᵀ S`.
pub fn phi1(m: &ModelParams, l1: &Mat, l2: &Mat, s: &Mat) -> Result<Mat, SingularInverse> {
    let h1 = inv_sym(&m.r2(l1, l2))?;
    let w = s_drive(m, l1, l2, s);
    Ok((l1 + l2) * &m.b * h1 * w - (&m.a + &m.g).transpose() * s)
}

/// `φ2 = wᵀ R2⁻¹ w − Dᵀ L1 D − D0ᵀ (L1 + L2) D0`.
pub fn phi2(m: &ModelParams, l1: &Mat, l2: &Mat, s: &Mat) -> Result<Mat, SingularInverse> {
    let h1 = inv_sym(&m.r2(l1, l2))?;
    let w = s_drive(m, l1, l2, s);
    Ok(w.transpose() * h1 * &w - m.d.transpose() * l1 * &m.d - m.d0.transpose() * (l1 + l2) * &m.d0)
}

pub(crate) fn riccati_layout(n: usize, a: &str, b: &str) -> Layout {
    Layout::new().with(a, n, n, true).with(b, n, n, true)
}

pub(crate) fn sr_layout(n: usize, s: &str, r: &str) -> Layout {
    Layout::new().with(s, n, 1, false).with(r, 1, 1, false)
}

/// Solved limit system.
#[derive(Debug, Clone)]
pub struct LimitSolution {
    pub model: ModelParams,
    /// Blocks `L1`, `L2`, `S`, `r` on the Riccati step sequence.
    pub solution: Solution,
}

/// Limit quantities at one time.
#[derive(Debug, Clone)]
pub struct LimitState {
    pub l1: Mat,
    pub l2: Mat,
    pub s: Mat,
    pub r: f64,
}

impl LimitSolution {
    pub fn lambda1(&self) -> MatrixTrajectory {
        self.solution.block("L1")
    }
    pub fn lambda2(&self) -> MatrixTrajectory {
        self.solution.block("L2")
    }
    pub fn lambda3(&self) -> MatrixTrajectory {
        let l1 = self.lambda1();
        let l2 = self.lambda2();
        MatrixTrajectory {
            times: l1.times.clone(),
            values: l1.values.iter().zip(&l2.values).map(|(a, b)| a + b).collect(),
            derivs: l1.derivs.iter().zip(&l2.derivs).map(|(a, b)| a + b).collect(),
        }
    }
    pub fn s(&self) -> MatrixTrajectory {
        self.solution.block("S")
    }
    pub fn r(&self) -> MatrixTrajectory {
        self.solution.block("r")
    }

    pub fn min_eig_r1(&self) -> Vec<(f64, f64)> {
        self.lambda1()
            .times
            .iter()
            .zip(self.lambda1().values.iter())
            .map(|(t, l1)| (*t, min_eig(&self.model.r1(l1))))
            .collect()
    }

    pub fn min_eig_r2(&self) -> Vec<(f64, f64)> {
        let l2 = self.lambda2();
        self.lambda1()
            .times
            .iter()
            .zip(self.lambda1().values.iter().zip(&l2.values))
            .map(|(t, (a, b))| (*t, min_eig(&self.model.r2(a, b))))
            .collect()
    }

    pub fn state_from(&self, y: &[f64]) -> LimitState {
        let l = &self.solution.layout;
        LimitState {
            l1: l.get(y, 0),
            l2: l.get(y, 1),
            s: l.get(y, 2),
            r: y[l.len() - 1],
        }
    }

    pub fn at(&self, t: f64) -> LimitState {
        self.state_from(&self.solution.at(t))
    }

    pub fn initial(&self) -> LimitState {
        self.state_from(self.solution.initial_state())
    }
}

/// Split a joint `[Λ, Λ] + [S, r]` state.
pub(crate) fn split4(y: &[f64], n: usize) -> (Mat, Mat, Mat, f64) {
    let nn = n * n;
    (
        Mat::from_column_slice(n, n, &y[..nn]),
        Mat::from_column_slice(n, n, &y[nn..2 * nn]),
        Mat::from_column_slice(n, 1, &y[2 * nn..2 * nn + n]),
        y[2 * nn + n],
    )
}

pub(crate) fn split2(y: &[f64], n: usize) -> (Mat, Mat) {
    let nn = n * n;
    (
        Mat::from_column_slice(n, n, &y[..nn]),
        Mat::from_column_slice(n, n, &y[nn..2 * nn]),
    )
}

/// Solve `(Λ1, Λ2)` backward under both positivity constraints, then `(S, r)`.
pub fn solve_limit(m: &ModelParams, opts: &Options) -> Result<LimitSolution, SolveError> {
    let n = m.n;
    let w = m.derived();
    let layout = riccati_layout(n, "L1", "L2");
    let rhs = |_t: f64, y: &[f64], out: &mut [f64]| {
        let (l1, l2) = split2(y, n);
        layout.put(out, 0, &psi1(m, &l1)?);
        layout.put(out, 1, &psi2(m, &w, &l1, &l2)?);
        Ok(())
    };
    let constraints = [
        Constraint::new("R1", |y: &[f64]| m.r1(&split2(y, n).0)),
        Constraint::new("R2", |y: &[f64]| {
            let (l1, l2) = split2(y, n);
            m.r2(&l1, &l2)
        }),
    ];
    let terminal = layout.pack(&[m.qf.clone(), w.qf_gamma.clone()]);
    let base = odecore::integrate_backward(&layout, &rhs, terminal, m.horizon, opts, &constraints)?;

    let sr = sr_layout(n, "S", "r");
    let srhs = |_t: f64, b: &[f64], y: &[f64], out: &mut [f64]| {
        let (l1, l2) = split2(b, n);
        let s = Mat::from_column_slice(n, 1, &y[..n]);
        sr.put(out, 0, &phi1(m, &l1, &l2, &s)?);
        sr.put(out, 1, &phi2(m, &l1, &l2, &s)?);
        Ok(())
    };
    let sr_terminal = sr.pack(&[m.k.clone(), Mat::zeros(1, 1)]);
    let follower = odecore::follow(&base, &sr, &srhs, sr_terminal, opts)?;
    Ok(LimitSolution {
        model: m.clone(),
        solution: base.concat(&follower),
    })
}

/// Right side of the joint limit system, used by residual checks.
pub fn limit_rhs<'a>(m: &'a ModelParams) -> impl Fn(f64, &[f64], &mut [f64]) -> Result<(), SingularInverse> + 'a {
    let w = m.derived();
    let n = m.n;
    move |_t, y, out| {
        let (l1, l2, s, _) = split4(y, n);
        let nn = n * n;
        out[..nn].copy_from_slice(psi1(m, &l1)?.as_slice());
        out[nn..2 * nn].copy_from_slice(psi2(m, &w, &l1, &l2)?.as_slice());
        out[2 * nn..2 * nn + n].copy_from_slice(phi1(m, &l1, &l2, &s)?.as_slice());
        out[2 * nn + n] = phi2(m, &l1, &l2, &s)?[(0, 0)];
        Ok(())
    }
}

/// Solve the equivalent `(Λ1, Λ3)` form; returns a solution with blocks `L1`, `L3`.
pub fn solve_lambda13(m: &ModelParams, opts: &Options) -> Result<Solution, SolveError> {
    let n = m.n;
    let w = m.derived();
    let layout = riccati_layout(n, "L1", "L3");
    let rhs = |_t: f64, y: &[f64], out: &mut [f64]| {
        let (l1, l3) = split2(y, n);
        layout.put(out, 0, &psi1(m, &l1)?);
        layout.put(out, 1, &psi3(m, &w, &l1, &l3)?);
        Ok(())
    };
    let constraints = [
        Constraint::new("R1", |y: &[f64]| m.r1(&split2(y, n).0)),
        Constraint::new("R2", |y: &[f64]| {
            let (l1, l3) = split2(y, n);
            sym(&(m.r1(&l1) + m.b0.transpose() * l3 * &m.b0))
        }),
    ];
    let terminal = layout.pack(&[m.qf.clone(), w.q3f.clone()]);
    Ok(odecore::integrate_backward(
        &layout,
        &rhs,
        terminal,
        m.horizon,
        opts,
        &constraints,
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Yes,
    No(Failure),
}

impl Verdict {
    pub fn is_solvable(&self) -> bool {
        matches!(self, Verdict::Yes)
    }
}

/// Asymptotic solvability holds iff the limit system solves on `[0, T]`.
pub fn asymptotic_solvability(m: &ModelParams, opts: &Options) -> Result<Verdict, SolveError> {
    match solve_limit(m, opts) {
        Ok(_) => Ok(Verdict::Yes),
        Err(SolveError::Failed(f)) => Ok(Verdict::No(f.failure)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub holds_for_lambda1: bool,
    pub holds_for_lambda3: bool,
    /// Min over nodes of the smallest eigenvalue of `R + B1ᵀ Λ̃1 B1 − K`.
    pub margin_lambda1: f64,
    /// Min over nodes of the smallest eigenvalue of `R + B1ᵀ Λ1 B1 + B0ᵀ Λ̃3 B0 − K`.
    pub margin_lambda3: f64,
}

/// Sufficient solvability conditions through standard comparison Riccati equations.
pub fn sufficient_probe(m: &ModelParams, k: &Mat, opts: &Options) -> Result<ProbeReport, SolveError> {
    const GATE: f64 = -1e-10;
    if min_eig(&m.q) < GATE || min_eig(&m.qf) < GATE {
        return Err(SolveError::PreconditionViolated(
            "Q and QF must be positive semidefinite".into(),
        ));
    }
    if min_eig(k) <= 0.0 {
        return Err(SolveError::PreconditionViolated("K must be positive definite".into()));
    }
    let n = m.n;
    let w = m.derived();
    let kinv = inv_sym(k)?;
    let tol = 10.0 * opts.pos_tol;

    let l1 = Layout::new().with("Lt1", n, n, true);
    let rhs1 = |_t: f64, y: &[f64], out: &mut [f64]| {
        let x = Mat::from_column_slice(n, n, y);
        let xb = &x * &m.b;
        let v = sym(&(&xb * &kinv * xb.transpose() - &x * &m.a - m.a.transpose() * &x - &m.q));
        out.copy_from_slice(v.as_slice());
        Ok(())
    };
    let tilde1 = odecore::integrate_backward(&l1, &rhs1, m.qf.as_slice().to_vec(), m.horizon, opts, &[])?;
    let margin1 = tilde1
        .nodes()
        .map(|(_, y)| min_eig(&(m.r1(&Mat::from_column_slice(n, n, y)) - k)))
        .fold(f64::INFINITY, f64::min);

    let l3 = Layout::new().with("L1", n, n, true).with("Lt3", n, n, true);
    let rhs3 = |_t: f64, y: &[f64], out: &mut [f64]| {
        let (a1, x) = split2(y, n);
        l3.put(out, 0, &psi1(m, &a1)?);
        let xb = &x * &m.b;
        let apg = &m.a + &m.g;
        l3.put(
            out,
            1,
            &sym(&(&xb * &kinv * xb.transpose() - &x * &apg - apg.transpose() * &x - &w.q3)),
        );
        Ok(())
    };
    let c = [Constraint::new("R1", |y: &[f64]| m.r1(&split2(y, n).0))];
    let terminal = l3.pack(&[m.qf.clone(), w.q3f.clone()]);
    let margin3 = match odecore::integrate_backward(&l3, &rhs3, terminal, m.horizon, opts, &c) {
        Ok(sol) => sol
            .nodes()
            .map(|(_, y)| {
                let (a1, x) = split2(y, n);
                min_eig(&(m.r1(&a1) + m.b0.transpose() * x * &m.b0 - k))
            })
            .fold(f64::INFINITY, f64::min),
        Err(_) => f64::NEG_INFINITY,
    };
    Ok(ProbeReport {
        holds_for_lambda1: margin1 >= -tol,
        holds_for_lambda3: margin3 >= -tol,
        margin_lambda1: margin1,
        margin_lambda3: margin3,
    })
}

/// Single-agent interpretation gains of `Λ1` and `Λ3`.
///
/// Reported as `g1 = R1(Λ1)⁻¹ Bᵀ Λ1` and `g2 = (R + B1ᵀΛ1B1 + B0ᵀΛ3B0)⁻¹ Bᵀ Λ3`,
/// i.e. with a leading plus sign. The associated controls are `u = g X`
/// in this convention; every feedback law elsewhere in the crate carries a
/// minus sign.
pub fn interpretation_gains(
    m: &ModelParams,
    limit: &LimitSolution,
) -> Result<(MatrixTrajectory, MatrixTrajectory), SingularInverse> {
    let l1 = limit.lambda1();
    let l3 = limit.lambda3();
    let mut g1 = Vec::with_capacity(l1.times.len());
    let mut g2 = Vec::with_capacity(l1.times.len());
    for (a, c) in l1.values.iter().zip(&l3.values) {
        g1.push(inv_sym(&m.r1(a))? * m.b.transpose() * a);
        let k = sym(&(m.r1(a) + m.b0.transpose() * c * &m.b0));
        g2.push(inv_sym(&k)? * m.b.transpose() * c);
    }
    let zeros: Vec<Mat> = g1.iter().map(|g| Mat::zeros(g.nrows(), g.ncols())).collect();
    Ok((
        MatrixTrajectory {
            times: l1.times.clone(),
            values: g1,
            derivs: zeros.clone(),
        },
        MatrixTrajectory {
            times: l1.times,
            values: g2,
            derivs: zeros,
        },
    ))
}
