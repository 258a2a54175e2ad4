//! Feedback gains `u = −Θ X_i − Θ1 aggregate − Θ2`.
//!
//! Decentralized gains come from the limit system and use the mean field
//! process as aggregate; centralized gains come from the finite-`N` system
//! and use the empirical average.

use crate::finite_riccati::{en_hn, FiniteSolution};
use crate::limit_riccati::LimitSolution;
use crate::linalg::{inv_sym, SingularInverse};
use crate::model::ModelParams;
use crate::odecore::{MatrixTrajectory, Solution};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

type Mat = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Centralized(usize),
    Decentralized,
}

/// Decentralized gains and their auxiliary inverses at one time.
#[derive(Debug, Clone)]
pub struct DecentralizedGains {
    pub h: Mat,
    pub h1: Mat,
    pub e_hat: Mat,
    pub theta: Mat,
    pub theta1: Mat,
    pub theta2: Mat,
}

/// Centralized gains at one time.
#[derive(Debug, Clone)]
pub struct CentralizedGains {
    pub en: Mat,
    pub hn: Mat,
    pub theta: Mat,
    pub theta1: Mat,
    pub theta2: Mat,
}

/// `(Θ, Θ1, Θ2)` at one time, independent of flavor.
#[derive(Debug, Clone, PartialEq)]
pub struct GainsAt {
    pub theta: Mat,
    pub theta1: Mat,
    pub theta2: Mat,
}

pub fn decentralized_at(m: &ModelParams, l1: &Mat, l2: &Mat, s: &Mat) -> Result<DecentralizedGains, SingularInverse> {
    let h = inv_sym(&m.r1(l1))?;
    let h1 = inv_sym(&m.r2(l1, l2))?;
    let e_hat = &h1 - &h;
    let bt = m.b.transpose();
    let theta = &h * &bt * l1;
    let theta1 = &e_hat * &bt * (l1 + l2) + &h * &bt * l2;
    let theta2 = &h1 * (&bt * s + m.b1.transpose() * l1 * &m.d + m.b0.transpose() * (l1 + l2) * &m.d0);
    Ok(DecentralizedGains {
        h,
        h1,
        e_hat,
        theta,
        theta1,
        theta2,
    })
}

pub fn centralized_at(
    m: &ModelParams,
    n_agents: usize,
    l1: &Mat,
    l2: &Mat,
    s: &Mat,
) -> Result<CentralizedGains, SingularInverse> {
    let nf = n_agents as f64;
    let (en, hn) = en_hn(m, n_agents, l1, l2)?;
    let bt = m.b.transpose();
    let theta = (&hn - &en) * &bt * (l1 - l2 / nf);
    let theta1 = &en * &bt * l1 * nf + (&hn + &en * (nf - 2.0)) * &bt * l2;
    let theta2 = (&hn + &en * (nf - 1.0))
        * (&bt * s + m.b1.transpose() * l1 * &m.d + m.b0.transpose() * (l1 + l2 * (1.0 - 1.0 / nf)) * &m.d0);
    Ok(CentralizedGains {
        en,
        hn,
        theta,
        theta1,
        theta2,
    })
}

/// Gains along a solved Riccati system, evaluable at any time via dense output.
#[derive(Debug, Clone)]
pub struct GainSet {
    pub flavor: Flavor,
    model: ModelParams,
    source: Solution,
    pub theta: MatrixTrajectory,
    pub theta1: MatrixTrajectory,
    pub theta2: MatrixTrajectory,
    /// `H`, `H1`, `Ehat` (decentralized) or `HN`, `EN` (centralized) at the nodes.
    pub aux: BTreeMap<String, MatrixTrajectory>,
}

impl GainSet {
    pub fn horizon(&self) -> f64 {
        self.model.horizon
    }

    /// Gains at `t` from the dense output of the underlying solution.
    pub fn at(&self, t: f64) -> Result<GainsAt, SingularInverse> {
        let y = self.source.at(t);
        eval(&self.model, self.flavor, &self.source, &y).map(|(g, _)| g)
    }

    /// `u = −Θ x − Θ1 aggregate − Θ2`.
    pub fn control(&self, t: f64, x: &DVector<f64>, aggregate: &DVector<f64>) -> Result<DVector<f64>, SingularInverse> {
        Ok(control_eval(&self.at(t)?, x, aggregate))
    }

    /// One row per node: `(name, trajectory)` for every gain and auxiliary matrix.
    pub fn trajectories(&self) -> BTreeMap<String, MatrixTrajectory> {
        let mut out = self.aux.clone();
        out.insert("Theta".into(), self.theta.clone());
        out.insert("Theta1".into(), self.theta1.clone());
        out.insert("Theta2".into(), self.theta2.clone());
        out
    }
}

pub fn control_eval(g: &GainsAt, x: &DVector<f64>, aggregate: &DVector<f64>) -> DVector<f64> {
    let u = -(&g.theta * x) - &g.theta1 * aggregate - &g.theta2;
    DVector::from_column_slice(u.as_slice())
}

fn eval(
    m: &ModelParams,
    flavor: Flavor,
    src: &Solution,
    y: &[f64],
) -> Result<(GainsAt, Vec<(&'static str, Mat)>), SingularInverse> {
    let l = &src.layout;
    let (l1, l2, s) = (l.get(y, 0), l.get(y, 1), l.get(y, 2));
    Ok(match flavor {
        Flavor::Decentralized => {
            let k = decentralized_at(m, &l1, &l2, &s)?;
            (
                GainsAt {
                    theta: k.theta,
                    theta1: k.theta1,
                    theta2: k.theta2,
                },
                vec![("H", k.h), ("H1", k.h1), ("Ehat", k.e_hat)],
            )
        }
        Flavor::Centralized(n) => {
            let k = centralized_at(m, n, &l1, &l2, &s)?;
            (
                GainsAt {
                    theta: k.theta,
                    theta1: k.theta1,
                    theta2: k.theta2,
                },
                vec![("HN", k.hn), ("EN", k.en)],
            )
        }
    })
}

fn build(m: &ModelParams, flavor: Flavor, source: &Solution) -> Result<GainSet, SingularInverse> {
    let times = source.times();
    let mut th = Vec::new();
    let mut th1 = Vec::new();
    let mut th2 = Vec::new();
    let mut aux: BTreeMap<String, Vec<Mat>> = BTreeMap::new();
    for (_, y) in source.nodes() {
        let (g, a) = eval(m, flavor, source, y)?;
        th.push(g.theta);
        th1.push(g.theta1);
        th2.push(g.theta2);
        for (k, v) in a {
            aux.entry(k.to_string()).or_default().push(v);
        }
    }
    let traj = |values: Vec<Mat>| node_trajectory(&times, values);
    Ok(GainSet {
        flavor,
        model: m.clone(),
        source: source.clone(),
        theta: traj(th),
        theta1: traj(th1),
        theta2: traj(th2),
        aux: aux.into_iter().map(|(k, v)| (k, traj(v))).collect(),
    })
}

/// Trajectory with derivatives from divided differences of the node values.
pub(crate) fn node_trajectory(times: &[f64], values: Vec<Mat>) -> MatrixTrajectory {
    let k = times.len();
    let derivs = (0..k)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(k - 1));
            if a == b {
                Mat::zeros(values[i].nrows(), values[i].ncols())
            } else {
                (&values[b] - &values[a]) / (times[b] - times[a])
            }
        })
        .collect();
    MatrixTrajectory {
        times: times.to_vec(),
        values,
        derivs,
    }
}

/// Gains of the decentralized control built from the limit system.
pub fn decentralized_gains(m: &ModelParams, limit: &LimitSolution) -> Result<GainSet, SingularInverse> {
    build(m, Flavor::Decentralized, &limit.solution)
}

/// Gains of the centralized optimal control at population `N`.
pub fn centralized_gains(m: &ModelParams, finite: &FiniteSolution) -> Result<GainSet, SingularInverse> {
    build(m, Flavor::Centralized(finite.n_agents), &finite.solution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_riccati::solve_finite;
    use crate::limit_riccati::{interpretation_gains, solve_limit};
    use crate::model::preset;
    use crate::odecore::{sup_distance, Options};

    #[test]
    fn decoupled_values() {
        let m = preset("decoupled_m0").unwrap();
        let lim = solve_limit(&m, &Options::default()).unwrap();
        let g = decentralized_gains(&m, &lim).unwrap();
        let g0 = g.at(0.0).unwrap();
        assert!((g0.theta[(0, 0)] - 0.5).abs() < 1e-8);
        assert_eq!(g0.theta1[(0, 0)], 0.0);
        assert_eq!(g0.theta2[(0, 0)], 0.0);
        let u = g
            .control(0.0, &DVector::from_element(1, 1.0), &DVector::from_element(1, 1.0))
            .unwrap();
        assert!((u[0] + 0.5).abs() < 1e-8);
        for n in [1, 3, 10] {
            let f = solve_finite(&m, n, &Options::default()).unwrap();
            let c = centralized_gains(&m, &f).unwrap();
            assert!(sup_distance(&c.theta, &g.theta) < 1e-8);
            assert!(c.theta1.sup_norm() == 0.0 && c.theta2.sup_norm() == 0.0);
        }
    }

    #[test]
    fn aux_and_interpretation() {
        let m = preset("example1").unwrap();
        let lim = solve_limit(&m, &Options::default()).unwrap();
        let g = decentralized_gains(&m, &lim).unwrap();
        for i in 0..g.theta.times.len() {
            let e = &g.aux["Ehat"].values[i] - (&g.aux["H1"].values[i] - &g.aux["H"].values[i]);
            assert!(e.abs().max() <= 1e-12);
        }
        let (g1, _) = interpretation_gains(&m, &lim).unwrap();
        assert!(sup_distance(&g1, &g.theta) <= 1e-8);
        assert!(g.theta2.sup_norm() == 0.0);
    }

    #[test]
    fn no_common_control_noise() {
        let mut m = preset("example1").unwrap();
        m.b0[(0, 0)] = 0.0;
        let lim = solve_limit(&m, &Options::default()).unwrap();
        let g = decentralized_gains(&m, &lim).unwrap();
        assert!(g.aux["Ehat"].sup_norm() == 0.0);
        let st = lim.initial();
        let want = inv_sym(&m.r1(&st.l1)).unwrap() * m.b.transpose() * &st.l2;
        assert!((g.theta1.first() - want).abs().max() < 1e-12);
    }

    #[test]
    fn consensus_linearity() {
        let g = GainsAt {
            theta: Mat::from_row_slice(1, 2, &[0.3, -0.2]),
            theta1: Mat::from_row_slice(1, 2, &[0.1, 0.5]),
            theta2: Mat::from_element(1, 1, 0.25),
        };
        let x = DVector::from_row_slice(&[1.5, -0.5]);
        let u = control_eval(&g, &x, &x);
        let want = -((&g.theta + &g.theta1) * &x) - &g.theta2;
        assert!((u[0] - want[0]).abs() < 1e-15);
        let z = GainsAt {
            theta2: Mat::zeros(1, 1),
            ..g
        };
        assert_eq!(control_eval(&z, &DVector::zeros(2), &DVector::zeros(2))[0], 0.0);
    }
}
