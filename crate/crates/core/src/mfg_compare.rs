//! Mean field game equilibrium costs versus the social optimum.

use crate::limit_riccati::{psi1, solve_limit, LimitSolution};
use crate::linalg::{inv_sym, SingularInverse};
use crate::model::{InitialLaw, ModelParams};
use crate::odecore::{self, Constraint, Layout, MatrixTrajectory, Options, Solution};
use crate::SolveError;
use nalgebra::DMatrix;
use serde::Serialize;

type Mat = DMatrix<f64>;

#[derive(Debug, Clone)]
pub struct MfgSolution {
    /// Blocks `L1g` (symmetric), `L2g`, `L3g`, `L4g`.
    pub solution: Solution,
}

impl MfgSolution {
    pub fn lambda(&self, k: usize) -> MatrixTrajectory {
        self.solution.block(&format!("L{k}g"))
    }

    /// `Hᵍ = R1(Λ1ᵍ)⁻¹` at every node.
    pub fn hg(&self, m: &ModelParams) -> Result<MatrixTrajectory, SingularInverse> {
        let l1 = self.lambda(1);
        let values = l1
            .values
            .iter()
            .map(|v| inv_sym(&m.r1(v)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(crate::gains::node_trajectory(&l1.times, values))
    }

    /// `Λ1ᵍ + Λ2ᵍ + Λ2ᵍᵀ + Λ4ᵍ` at every node.
    pub fn game_sum(&self) -> MatrixTrajectory {
        let l = &self.solution.layout;
        let times = self.solution.times();
        let values = self
            .solution
            .nodes()
            .map(|(_, y)| {
                let l2 = l.get(y, 1);
                l.get(y, 0) + &l2 + l2.transpose() + l.get(y, 3)
            })
            .collect();
        crate::gains::node_trajectory(&times, values)
    }
}

fn mfg_layout(n: usize) -> Layout {
    Layout::new()
        .with("L1g", n, n, true)
        .with("L2g", n, n, false)
        .with("L3g", n, n, false)
        .with("L4g", n, n, false)
}

/// Time derivatives of `(Λ1ᵍ, Λ2ᵍ, Λ3ᵍ, Λ4ᵍ)`.
pub fn mfg_field(m: &ModelParams, l: [&Mat; 4]) -> Result<[Mat; 4], SingularInverse> {
    let [l1, l2, l3, l4] = l;
    let h = inv_sym(&m.r1(l1))?;
    let (a, b, g) = (&m.a, &m.b, &m.g);
    let bhb = b * &h * b.transpose();
    let l2t = l2.transpose();
    let qg = &m.q * &m.gamma;
    let gqg = m.gamma.transpose() * &m.q * &m.gamma;
    let common =
        (l1 + &l2t) * b * &h * m.b0.transpose() * (l1 + l2 + &l2t + l4) * &m.b0 * &h * b.transpose() * (l1 + l2);
    let d1 = psi1(m, l1)?;
    let d2 = l2 * &bhb * l2 + l2 * &bhb * l1 + l1 * &bhb * l2 - l1 * g - l2 * (a + g) - a.transpose() * l2 + qg;
    let d3 = l3 * &bhb * l1 + l1 * &bhb * l3 + l4 * &bhb * l2 + &l2t * &bhb * (l2 + l4)
        - l1 * b * &h * m.b1.transpose() * l3 * &m.b1 * &h * b.transpose() * l1
        - &common
        - l3 * a
        - (&l2t + l4.transpose()) * g
        - a.transpose() * l3
        - g.transpose() * (l2 + l4)
        - &gqg;
    let d4 = l4 * &bhb * (l1 + l2) + l1 * &bhb * l4 + &l2t * &bhb * (l2 + l4)
        - &common
        - (&l2t + l4) * g
        - l4 * a
        - g.transpose() * (l2 + l4)
        - a.transpose() * l4
        - &gqg;
    Ok([d1, d2, d3, d4])
}

pub fn mfg_rhs<'a>(m: &'a ModelParams) -> impl Fn(f64, &[f64], &mut [f64]) -> Result<(), SingularInverse> + 'a {
    let layout = mfg_layout(m.n);
    move |_t, y, out| {
        let ls: Vec<Mat> = (0..4).map(|i| layout.get(y, i)).collect();
        let d = mfg_field(m, [&ls[0], &ls[1], &ls[2], &ls[3]])?;
        for (i, v) in d.iter().enumerate() {
            layout.put(out, i, v);
        }
        Ok(())
    }
}

pub fn solve_mfg(m: &ModelParams, opts: &Options) -> Result<MfgSolution, SolveError> {
    let n = m.n;
    let layout = mfg_layout(n);
    let rhs = mfg_rhs(m);
    let constraints = [Constraint::new("R1", |y: &[f64]| m.r1(&layout.get(y, 0)))];
    let gfg = m.gamma_f.transpose() * &m.qf * &m.gamma_f;
    let terminal = layout.pack(&[m.qf.clone(), -(&m.qf * &m.gamma_f), gfg.clone(), gfg]);
    let sol = odecore::integrate_backward(&layout, &rhs, terminal, m.horizon, opts, &constraints)?;
    Ok(MfgSolution { solution: sol })
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub j_soc_bar: f64,
    pub j_mfg_bar: f64,
    pub gain: f64,
    /// `sup |Λ1ᵍ − Λ1|`.
    pub lambda1_distance: f64,
}

/// `(t, Λ1ᵍ + Λ2ᵍ + Λ2ᵍᵀ + Λ4ᵍ − Λ3)` on the game's nodes.
pub fn difference_trajectory(mfg: &MfgSolution, limit: &LimitSolution) -> MatrixTrajectory {
    let sum = mfg.game_sum();
    let values = sum
        .times
        .iter()
        .zip(&sum.values)
        .map(|(t, v)| {
            let st = limit.at(*t);
            v - (st.l1 + st.l2)
        })
        .collect();
    crate::gains::node_trajectory(&sum.times, values)
}

fn quad(mu: &Mat, m: &Mat) -> f64 {
    (mu.transpose() * m * mu)[(0, 0)]
}

/// Asymptotic per-agent costs of the social optimum and of the game equilibrium.
pub fn compare_solved(mfg: &MfgSolution, limit: &LimitSolution, law: &InitialLaw) -> Comparison {
    let mu = Mat::from_column_slice(law.mu0.len(), 1, law.mu0.as_slice());
    let st = limit.initial();
    let l = &mfg.solution.layout;
    let y = mfg.solution.initial_state();
    let (g1, g2, g4) = (l.get(y, 0), l.get(y, 1), l.get(y, 3));
    let j_soc_bar = (&st.l1 * &law.sigma0).trace() + quad(&mu, &(&st.l1 + &st.l2));
    let j_mfg_bar = (&g1 * &law.sigma0).trace() + quad(&mu, &(&g1 + &g2 + g2.transpose() + g4));
    Comparison {
        j_soc_bar,
        j_mfg_bar,
        gain: j_mfg_bar - j_soc_bar,
        lambda1_distance: odecore::sup_distance(&mfg.lambda(1), &limit.lambda1()),
    }
}

pub fn compare(
    m: &ModelParams,
    law: &InitialLaw,
    opts: &Options,
) -> Result<(Comparison, MfgSolution, LimitSolution), SolveError> {
    if m.has_noise_offsets() {
        return Err(SolveError::PreconditionViolated(
            "comparison requires D = D0 = 0".into(),
        ));
    }
    let limit = solve_limit(m, opts)?;
    let mfg = solve_mfg(m, opts)?;
    Ok((compare_solved(&mfg, &limit, law), mfg, limit))
}
