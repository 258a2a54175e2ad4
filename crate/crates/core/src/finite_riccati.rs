//! Finite-population rescaled Riccati systems.
//!
//! `(Λ1ᴺ, Λ2ᴺ)` are the rescaled diagonal and off-diagonal blocks of the full
//! `Nn × Nn` Riccati solution; `(Sᴺ, rᴺ)` the rescaled linear and constant
//! parts. The check system describes the social cost of the decentralized
//! control at population size `N`.

use crate::gains::{decentralized_at, DecentralizedGains};
use crate::limit_riccati::{phi1, phi2, psi1, psi2, riccati_layout, split2, sr_layout, LimitSolution};
use crate::linalg::{inv_sym, sym, SingularInverse};
use crate::model::ModelParams;
use crate::odecore::{self, Constraint, Layout, MatrixTrajectory, Options, Solution};
use crate::SolveError;
use nalgebra::DMatrix;
use rayon::prelude::*;

type Mat = DMatrix<f64>;

/// `R2(L1, L2) − B0ᵀ L2 B0 / N`.
pub fn reduced_r2(m: &ModelParams, n_agents: usize, l1: &Mat, l2: &Mat) -> Mat {
    let nf = n_agents as f64;
    sym(&(m.r2(l1, l2) - m.b0.transpose() * l2 * &m.b0 / nf))
}

/// Off-diagonal and diagonal blocks `(Eᴺ, Hᴺ)` of `(R + 2 M2(P))⁻¹`.
pub fn en_hn(m: &ModelParams, n_agents: usize, l1: &Mat, l2: &Mat) -> Result<(Mat, Mat), SingularInverse> {
    let nf = n_agents as f64;
    let h = inv_sym(&m.r1(l1))?;
    let e = (inv_sym(&reduced_r2(m, n_agents, l1, l2))? - &h) / nf;
    let hn = &e + h;
    Ok((e, hn))
}

/// `ξ_N = N Eᴺ + R1⁻¹ − R2⁻¹` evaluated literally.
pub fn xi_n_direct(m: &ModelParams, n_agents: usize, l1: &Mat, l2: &Mat) -> Result<Mat, SingularInverse> {
    let (e, _) = en_hn(m, n_agents, l1, l2)?;
    Ok(e * n_agents as f64 + inv_sym(&m.r1(l1))? - inv_sym(&m.r2(l1, l2))?)
}

/// `ξ_N = (1/N) R2(L1, (1 − 1/N) L2)⁻¹ B0ᵀ L2 B0 R2(L1, L2)⁻¹`.
pub fn xi_n(m: &ModelParams, n_agents: usize, l1: &Mat, l2: &Mat) -> Result<Mat, SingularInverse> {
    let nf = n_agents as f64;
    let a = inv_sym(&m.r2(l1, &(l2 * (1.0 - 1.0 / nf))))?;
    let b = inv_sym(&m.r2(l1, l2))?;
    Ok(a * m.b0.transpose() * l2 * &m.b0 * b / nf)
}

/// Finite-`N` perturbations `(g1, g2)` of the limit vector fields.
pub fn g1_g2(m: &ModelParams, n_agents: usize, l1: &Mat, l2: &Mat) -> Result<(Mat, Mat), SingularInverse> {
    let nf = n_agents as f64;
    let w = m.derived();
    let (e, hn) = en_hn(m, n_agents, l1, l2)?;
    let h = inv_sym(&m.r1(l1))?;
    let b = &m.b;
    let bt = b.transpose();
    let l1b = l1 * b;
    let l2b = l2 * b;
    let g = &m.g;
    let gt = g.transpose();
    let c = 1.0 - 1.0 / nf;
    let g1 = &l1b * &e * l1b.transpose()
        + (&l2b * &e * l1b.transpose() + &l1b * &e * l2b.transpose()) * c
        + &l2b * (&hn + &e * (nf - 2.0)) * l2b.transpose() * (1.0 / nf - 1.0 / (nf * nf))
        - ((l1 * g + &gt * l1) + (l2 * g + &gt * l2) * c) / nf
        - &w.q_gamma / nf;
    let l3b = (l1 + l2) * b;
    let xi = xi_n(m, n_agents, l1, l2)?;
    let g2 = &l3b * xi * l3b.transpose() - &l2b * &h * &bt * l2 * (2.0 / nf)
        + &l2b * &e * l2b.transpose() * (1.0 / nf - 2.0)
        - &l1b * &e * l2b.transpose()
        - &l2b * &e * l1b.transpose()
        + (l2 * g + &gt * l2) / nf;
    Ok((sym(&g1), sym(&g2)))
}

/// `(g01, g02)` corrections of the `(S, r)` equations.
pub fn g01_g02(m: &ModelParams, n_agents: usize, l1: &Mat, l2: &Mat, s: &Mat) -> Result<(Mat, Mat), SingularInverse> {
    let nf = n_agents as f64;
    let c = 1.0 - 1.0 / nf;
    let lc = l1 + l2 * c;
    let l3 = l1 + l2;
    let minv = inv_sym(&reduced_r2(m, n_agents, l1, l2))?;
    let r2inv = inv_sym(&m.r2(l1, l2))?;
    let wc = m.b.transpose() * s + m.b1.transpose() * l1 * &m.d + m.b0.transpose() * &lc * &m.d0;
    let w = m.b.transpose() * s + m.b1.transpose() * l1 * &m.d + m.b0.transpose() * &l3 * &m.d0;
    let g01 = &lc * &m.b * &minv * &wc - &l3 * &m.b * &r2inv * &w;
    let g02 = wc.transpose() * &minv * &wc - w.transpose() * &r2inv * &w + m.d0.transpose() * l2 * &m.d0 / nf;
    Ok((g01, g02))
}

#[derive(Debug, Clone)]
pub struct FiniteSolution {
    pub n_agents: usize,
    pub model: ModelParams,
    /// Blocks `L1N`, `L2N`, `SN`, `rN`.
    pub solution: Solution,
}

#[derive(Debug, Clone)]
pub struct FiniteState {
    pub l1: Mat,
    pub l2: Mat,
    pub s: Mat,
    pub r: f64,
}

impl FiniteSolution {
    pub fn lambda1(&self) -> MatrixTrajectory {
        self.solution.block("L1N")
    }
    pub fn lambda2(&self) -> MatrixTrajectory {
        self.solution.block("L2N")
    }
    pub fn s(&self) -> MatrixTrajectory {
        self.solution.block("SN")
    }
    pub fn r(&self) -> MatrixTrajectory {
        self.solution.block("rN")
    }

    pub fn state_from(&self, y: &[f64]) -> FiniteState {
        let l = &self.solution.layout;
        FiniteState {
            l1: l.get(y, 0),
            l2: l.get(y, 1),
            s: l.get(y, 2),
            r: y[l.len() - 1],
        }
    }

    pub fn at(&self, t: f64) -> FiniteState {
        self.state_from(&self.solution.at(t))
    }

    pub fn initial(&self) -> FiniteState {
        self.state_from(self.solution.initial_state())
    }

    /// `(Eᴺ, Hᴺ)` at every node.
    pub fn en_hn_trajectories(&self) -> Result<(MatrixTrajectory, MatrixTrajectory), SingularInverse> {
        let l1 = self.lambda1();
        let l2 = self.lambda2();
        let mut es = Vec::new();
        let mut hs = Vec::new();
        for (a, b) in l1.values.iter().zip(&l2.values) {
            let (e, h) = en_hn(&self.model, self.n_agents, a, b)?;
            es.push(e);
            hs.push(h);
        }
        let z: Vec<Mat> = es.iter().map(|e| Mat::zeros(e.nrows(), e.ncols())).collect();
        Ok((
            MatrixTrajectory {
                times: l1.times.clone(),
                values: es,
                derivs: z.clone(),
            },
            MatrixTrajectory {
                times: l1.times,
                values: hs,
                derivs: z,
            },
        ))
    }
}

/// Solve `(Λ1ᴺ, Λ2ᴺ)` under the three positivity constraints, then `(Sᴺ, rᴺ)`.
pub fn solve_finite(m: &ModelParams, n_agents: usize, opts: &Options) -> Result<FiniteSolution, SolveError> {
    assert!(n_agents >= 1, "population size must be positive");
    let n = m.n;
    let nf = n_agents as f64;
    let w = m.derived();
    let layout = riccati_layout(n, "L1N", "L2N");
    let rhs = |_t: f64, y: &[f64], out: &mut [f64]| {
        let (l1, l2) = split2(y, n);
        let (g1, g2) = g1_g2(m, n_agents, &l1, &l2)?;
        layout.put(out, 0, &(psi1(m, &l1)? + g1));
        layout.put(out, 1, &(psi2(m, &w, &l1, &l2)? + g2));
        Ok(())
    };
    let constraints = [
        Constraint::new("R1", |y: &[f64]| m.r1(&split2(y, n).0)),
        Constraint::new("R2", |y: &[f64]| {
            let (l1, l2) = split2(y, n);
            m.r2(&l1, &l2)
        }),
        Constraint::new("R2N", |y: &[f64]| {
            let (l1, l2) = split2(y, n);
            reduced_r2(m, n_agents, &l1, &l2)
        }),
    ];
    let terminal = layout.pack(&[&m.qf + &w.qf_gamma / nf, w.qf_gamma.clone()]);
    let base = odecore::integrate_backward(&layout, &rhs, terminal, m.horizon, opts, &constraints)?;

    let sr = sr_layout(n, "SN", "rN");
    let srhs = |_t: f64, b: &[f64], y: &[f64], out: &mut [f64]| {
        let (l1, l2) = split2(b, n);
        let s = Mat::from_column_slice(n, 1, &y[..n]);
        let (g01, g02) = g01_g02(m, n_agents, &l1, &l2, &s)?;
        sr.put(out, 0, &(phi1(m, &l1, &l2, &s)? + g01));
        sr.put(out, 1, &(phi2(m, &l1, &l2, &s)? + g02));
        Ok(())
    };
    let follower = odecore::follow(&base, &sr, &srhs, sr.pack(&[m.k.clone(), Mat::zeros(1, 1)]), opts)?;
    Ok(FiniteSolution {
        n_agents,
        model: m.clone(),
        solution: base.concat(&follower),
    })
}

/// Right side of the joint finite system `[L1N, L2N, SN, rN]`.
pub fn finite_rhs<'a>(
    m: &'a ModelParams,
    n_agents: usize,
) -> impl Fn(f64, &[f64], &mut [f64]) -> Result<(), SingularInverse> + 'a {
    let w = m.derived();
    let n = m.n;
    move |_t, y, out| {
        let (l1, l2, s, _) = crate::limit_riccati::split4(y, n);
        let (g1, g2) = g1_g2(m, n_agents, &l1, &l2)?;
        let (g01, g02) = g01_g02(m, n_agents, &l1, &l2, &s)?;
        let nn = n * n;
        out[..nn].copy_from_slice((psi1(m, &l1)? + g1).as_slice());
        out[nn..2 * nn].copy_from_slice((psi2(m, &w, &l1, &l2)? + g2).as_slice());
        out[2 * nn..2 * nn + n].copy_from_slice((phi1(m, &l1, &l2, &s)? + g01).as_slice());
        out[2 * nn + n] = (phi2(m, &l1, &l2, &s)? + g02)[(0, 0)];
        Ok(())
    }
}

/// Rescaled cost system of the decentralized control at population `N`.
#[derive(Debug, Clone)]
pub struct CheckSolution {
    pub n_agents: usize,
    /// Blocks `cL1`, `cL2`, `cL12`, `cL22`, `cS1`, `cS2`, `cr` on the limit step sequence.
    pub solution: Solution,
}

#[derive(Debug, Clone)]
pub struct CheckState {
    pub l1: Mat,
    pub l2: Mat,
    pub l12: Mat,
    pub l22: Mat,
    pub s1: Mat,
    pub s2: Mat,
    pub r: f64,
}

pub(crate) fn check_layout(n: usize) -> Layout {
    Layout::new()
        .with("cL1", n, n, true)
        .with("cL2", n, n, true)
        .with("cL12", n, n, false)
        .with("cL22", n, n, true)
        .with("cS1", n, 1, false)
        .with("cS2", n, 1, false)
        .with("cr", 1, 1, false)
}

impl CheckSolution {
    pub fn state_from(&self, y: &[f64]) -> CheckState {
        let l = &self.solution.layout;
        CheckState {
            l1: l.get(y, 0),
            l2: l.get(y, 1),
            l12: l.get(y, 2),
            l22: l.get(y, 3),
            s1: l.get(y, 4),
            s2: l.get(y, 5),
            r: y[l.len() - 1],
        }
    }

    pub fn initial(&self) -> CheckState {
        self.state_from(self.solution.initial_state())
    }

    pub fn at(&self, t: f64) -> CheckState {
        self.state_from(&self.solution.at(t))
    }

    pub fn block(&self, name: &str) -> MatrixTrajectory {
        self.solution.block(name)
    }
}

/// `−d/dt` of every check unknown given the decentralized gains.
pub fn check_field(m: &ModelParams, n_agents: usize, k: &DecentralizedGains, c: &CheckState) -> Vec<Mat> {
    let nf = n_agents as f64;
    let w = m.derived();
    let (a, b, b0, b1, d, d0, g) = (&m.a, &m.b, &m.b0, &m.b1, &m.d, &m.d0, &m.g);
    let (th, th1, th2) = (&k.theta, &k.theta1, &k.theta2);
    let tht = th.transpose();
    let th1t = th1.transpose();
    let th2t = th2.transpose();
    let b0t = b0.transpose();
    let apg = a + g;
    let a_bt = a - b * th;
    let apg_bt = &apg - b * th;
    let z0 = -(b0 * (th + th1));
    let z1 = &apg - b * (th + th1);
    let r1c = m.r1(&c.l1);
    let r2c = m.r2(&c.l1, &c.l2);
    let lc = &c.l1 + &c.l2 * (1.0 - 1.0 / nf);
    let dd = d0 - b0 * th2;
    let l12 = &c.l12;
    let l12t = l12.transpose();

    let gc1 = (&tht * &b0t * &lc * b0 * th + &lc * g + g.transpose() * &lc + &w.q_gamma) / nf;
    let gc2 = -(&tht * &b0t * &c.l2 * b0 * th + &c.l2 * g + g.transpose() * &c.l2) / nf;
    let gc12 = (-(&tht * &b0t * &c.l2 * b0 * th1) + &c.l2 * b * th1) / nf;
    let gc22 = -(&th1t * &b0t * &c.l2 * b0 * th1) / nf;
    let gc01 = (&tht * &b0t * &c.l2 * &dd + &c.l2 * b * th2) / nf;
    let gc02 = (-(&th1t * &b0t * &c.l2 * b0 * th2) + &th1t * &b0t * &c.l2 * d0) / nf;
    let gc03 = (-(&th2t * &b0t * &c.l2 * b0 * th2) + d0.transpose() * &c.l2 * b0 * th2 * 2.0
        - d0.transpose() * &c.l2 * d0)
        / nf;

    let l_sum = &c.l1 + &c.l2;
    let drive = b.transpose() * &c.s1 + b1.transpose() * &c.l1 * d + &b0t * &l_sum * d0;

    let dl1 = &tht * &r1c * th + &c.l1 * &a_bt + a_bt.transpose() * &c.l1 + &m.q + gc1;
    let dl2 = &tht * &b0t * &l_sum * b0 * th
        + &c.l1 * g
        + g.transpose() * &c.l1
        + &c.l2 * &apg_bt
        + apg_bt.transpose() * &c.l2
        + &w.q_gamma
        + gc2;
    let dl12 = &tht * &r2c * th1 + &tht * &b0t * l12 * b0 * (th + th1) - &l_sum * b * th1
        + apg_bt.transpose() * l12
        + l12 * &z1
        + gc12;
    let dl22 =
        &th1t * &r2c * th1 - &l12t * b * th1 - &th1t * b.transpose() * l12 + &c.l22 * &z1 + z1.transpose() * &c.l22
            - z0.transpose() * &l12t * b0 * th1
            - &th1t * &b0t * l12 * &z0
            + z0.transpose() * &c.l22 * &z0
            + gc22;
    let ds1 = &tht * &r2c * th2 - (&l_sum + l12) * b * th2 - &tht * &drive - &tht * &b0t * l12 * &dd
        + apg.transpose() * &c.s1
        + gc01;
    let ds2 = &th1t * &r2c * th2 + z1.transpose() * &c.s2 - &th1t * &drive
        + (z0.transpose() * &c.l22 + z0.transpose() * &l12t - &th1t * &b0t * l12) * &dd
        - (&l12t + &c.l22) * b * th2
        + gc02;
    let s12 = &c.s1 + &c.s2;
    let drive12 = b.transpose() * &s12 + b1.transpose() * &c.l1 * d + &b0t * &l_sum * d0;
    let dr = &th2t * &r2c * th2 + d.transpose() * &c.l1 * d + d0.transpose() * &l_sum * d0
        - drive12.transpose() * th2
        - &th2t * &drive12
        + dd.transpose() * (&c.l22 + l12 + &l12t) * &dd
        + gc03;
    vec![sym(&dl1), sym(&dl2), dl12, sym(&dl22), ds1, ds2, dr]
}

/// Solve the seven linear check equations on the limit's step sequence.
pub fn solve_check(
    m: &ModelParams,
    n_agents: usize,
    limit: &LimitSolution,
    opts: &Options,
) -> Result<CheckSolution, SolveError> {
    let n = m.n;
    let nf = n_agents as f64;
    let w = m.derived();
    let layout = check_layout(n);
    let rhs = |_t: f64, b: &[f64], y: &[f64], out: &mut [f64]| {
        let ls = limit.state_from(b);
        let k = decentralized_at(m, &ls.l1, &ls.l2, &ls.s)?;
        let c = CheckState {
            l1: layout.get(y, 0),
            l2: layout.get(y, 1),
            l12: layout.get(y, 2),
            l22: layout.get(y, 3),
            s1: layout.get(y, 4),
            s2: layout.get(y, 5),
            r: y[layout.len() - 1],
        };
        for (i, v) in check_field(m, n_agents, &k, &c).into_iter().enumerate() {
            layout.put(out, i, &(-v));
        }
        Ok(())
    };
    let z = Mat::zeros(n, n);
    let terminal = layout.pack(&[
        &m.qf + &w.qf_gamma / nf,
        w.qf_gamma.clone(),
        z.clone(),
        z,
        m.k.clone(),
        Mat::zeros(n, 1),
        Mat::zeros(1, 1),
    ]);
    let sol = odecore::follow(&limit.solution, &layout, &rhs, terminal, opts)?;
    Ok(CheckSolution {
        n_agents,
        solution: sol,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n_agents: usize,
    pub e1: f64,
    pub e2: f64,
    pub e_s: f64,
    pub e_r: f64,
}

/// Sup-norm distances of the finite-`N` solutions to the limit.
pub fn convergence_table(m: &ModelParams, ns: &[usize], opts: &Options) -> Result<Vec<ConvergenceRow>, SolveError> {
    let limit = crate::limit_riccati::solve_limit(m, opts)?;
    let (l1, l2, s, r) = (limit.lambda1(), limit.lambda2(), limit.s(), limit.r());
    ns.par_iter()
        .map(|&n| {
            let f = solve_finite(m, n, opts)?;
            Ok(ConvergenceRow {
                n_agents: n,
                e1: odecore::sup_distance(&f.lambda1(), &l1),
                e2: odecore::sup_distance(&f.lambda2(), &l2),
                e_s: odecore::sup_distance(&f.s(), &s),
                e_r: odecore::sup_distance(&f.r(), &r),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limit_riccati::solve_limit;
    use crate::model::preset;
    use proptest::prelude::*;

    fn s(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    #[test]
    fn en_hn_scalar() {
        let mut m = preset("decoupled_m0").unwrap();
        m.b0 = s(1.0);
        let (e, h) = en_hn(&m, 2, &s(1.0), &s(1.0)).unwrap();
        assert!((e[(0, 0)] + 0.3).abs() < 1e-15);
        assert!((h[(0, 0)] - 0.7).abs() < 1e-15);
        let z = preset("decoupled_m0").unwrap();
        let (e, h) = en_hn(&z, 5, &s(2.0), &s(0.7)).unwrap();
        assert_eq!(e[(0, 0)], 0.0);
        assert_eq!(h[(0, 0)], 1.0);
    }

    #[test]
    fn perturbations_vanish_when_decoupled() {
        let m = preset("decoupled_m0").unwrap();
        let (g1, g2) = g1_g2(&m, 3, &s(0.8), &s(0.0)).unwrap();
        assert_eq!(g1[(0, 0)], 0.0);
        assert_eq!(g2[(0, 0)], 0.0);
    }

    #[test]
    fn decoupled_finite_equals_limit() {
        let m = preset("decoupled_m0").unwrap();
        let lim = solve_limit(&m, &Options::default()).unwrap();
        for n in [1, 4, 17] {
            let f = solve_finite(&m, n, &Options::default()).unwrap();
            assert!(odecore::sup_distance(&f.lambda1(), &lim.lambda1()) < 1e-9);
            assert!(f.lambda2().sup_norm() < 1e-12);
            let c = solve_check(&m, n, &lim, &Options::default()).unwrap();
            assert!(odecore::sup_distance(&c.block("cL1"), &lim.lambda1()) < 1e-9);
            for b in ["cL2", "cL12", "cL22", "cS1", "cS2", "cr"] {
                assert!(c.block(b).sup_norm() < 1e-12, "{b}");
            }
        }
    }

    #[test]
    fn terminal_wiring_and_symmetry() {
        let m = preset("example1").unwrap();
        let f = solve_finite(&m, 7, &Options::default()).unwrap();
        let w = m.derived();
        assert!((f.lambda1().last() - (&m.qf + &w.qf_gamma / 7.0)).abs().max() < 1e-12);
        assert!((f.lambda2().last() - &w.qf_gamma).abs().max() < 1e-12);
        let (e, _) = f.en_hn_trajectories().unwrap();
        assert!(e.max_asymmetry() <= 1e-10);
        let res = odecore::residual_check(&f.solution, &finite_rhs(&m, 7), 200);
        assert!(res < 1e-4, "{res}");
    }

    #[test]
    fn perturbations_shrink_with_n() {
        let m = preset("example1").unwrap();
        let o = Options::default();
        let sup_g = |n: usize| {
            let f = solve_finite(&m, n, &o).unwrap();
            f.solution
                .nodes()
                .map(|(_, y)| {
                    let st = f.state_from(y);
                    let (g1, g2) = g1_g2(&m, n, &st.l1, &st.l2).unwrap();
                    g1.abs().max() + g2.abs().max()
                })
                .fold(0.0, f64::max)
        };
        let (a, b) = (sup_g(50), sup_g(100));
        assert!((1.5..=2.5).contains(&(a / b)), "ratio {}", a / b);
        assert!(sup_g(200) < b);
    }

    fn spd(v: &[f64], n: usize) -> Mat {
        let a = Mat::from_row_slice(n, n, v);
        &a * a.transpose() + Mat::identity(n, n) * 0.5
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn xi_identity(v1 in proptest::collection::vec(-1.0f64..1.0, 4),
                       v2 in proptest::collection::vec(-1.0f64..1.0, 4),
                       vb in proptest::collection::vec(-1.0f64..1.0, 4),
                       n_agents in 1usize..50) {
            let mut m = preset("example1").unwrap();
            m.n = 2; m.n1 = 2;
            m.r = Mat::identity(2, 2);
            m.b1 = Mat::from_row_slice(2, 2, &vb);
            m.b0 = Mat::from_row_slice(2, 2, &[vb[1], vb[0], vb[3], vb[2]]);
            let l1 = spd(&v1, 2);
            let l2 = spd(&v2, 2) * 0.3;
            let a = xi_n_direct(&m, n_agents, &l1, &l2).unwrap();
            let b = xi_n(&m, n_agents, &l1, &l2).unwrap();
            prop_assert!((a - b).abs().max() < 1e-10);
        }
    }
}
