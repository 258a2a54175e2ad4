//! Mean-variance portfolio selection as a scalar social problem.
//!
//! Wealth `dX = [ρX + (α−ρ)u]dt + σu dW` with terminal cost
//! `(γ/2)|X_i(T) − X^{(N)}(T)|² − X_i(T)`.

use crate::gains::decentralized_gains;
use crate::limit_riccati::{solve_limit, LimitSolution};
use crate::model::ModelParams;
use crate::odecore::{self, Layout, Options};
use crate::SolveError;
use nalgebra::DMatrix;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PortfolioParams {
    pub rho: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub horizon: f64,
    pub x0: f64,
}

impl Default for PortfolioParams {
    fn default() -> Self {
        Self {
            rho: 0.05,
            alpha: 0.15,
            sigma: 0.25,
            gamma: 1.0,
            horizon: 1.0,
            x0: 1.0,
        }
    }
}

impl PortfolioParams {
    pub fn validate(&self) -> Result<(), SolveError> {
        let ok = self.alpha > self.rho && self.sigma > 0.0 && self.gamma > 0.0 && self.horizon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SolveError::PreconditionViolated(
                "need alpha > rho, sigma > 0, gamma > 0, T > 0".into(),
            ))
        }
    }

    /// `λ = (ρ − α)² / σ²`.
    pub fn lambda_rate(&self) -> f64 {
        (self.rho - self.alpha).powi(2) / self.sigma.powi(2)
    }

    /// `(α − ρ) / σ²`.
    pub fn slope(&self) -> f64 {
        (self.alpha - self.rho) / self.sigma.powi(2)
    }

    /// The social LQ model, unvalidated: `A=ρ, B=α−ρ, B1=σ, R=Q=0, QF=γ/2, ΓF=1, K=−1/2`.
    pub fn model(&self) -> ModelParams {
        let mut m = ModelParams::scalar(
            self.rho,
            self.alpha - self.rho,
            0.0,
            self.sigma,
            0.0,
            0.0,
            0.0,
            0.0,
            self.gamma / 2.0,
            0.0,
            0.0,
            1.0,
            self.horizon,
        );
        m.k = DMatrix::from_element(1, 1, -0.5);
        m
    }
}

/// Closed forms of the mean-variance solution.
#[derive(Debug, Clone, Copy)]
pub struct ClosedForms {
    pub p: PortfolioParams,
}

impl ClosedForms {
    pub fn lambda_rate(&self) -> f64 {
        self.p.lambda_rate()
    }
    pub fn a(&self, t: f64) -> f64 {
        self.p.gamma * ((2.0 * self.p.rho - self.lambda_rate()) * (self.p.horizon - t)).exp()
    }
    pub fn c(&self, t: f64) -> f64 {
        (self.p.rho * (self.p.horizon - t)).exp()
    }
    pub fn lambda1(&self, t: f64) -> f64 {
        self.p.gamma / 2.0 * ((2.0 * self.p.rho - self.lambda_rate()) * (self.p.horizon - t)).exp()
    }
    pub fn s(&self, t: f64) -> f64 {
        -0.5 * (self.p.rho * (self.p.horizon - t)).exp()
    }
    /// `(1/γ) e^{(λ−ρ)(T−t)}`.
    pub fn ratio(&self, t: f64) -> f64 {
        ((self.lambda_rate() - self.p.rho) * (self.p.horizon - t)).exp() / self.p.gamma
    }
    /// `E X(t)` under the mean-variance control.
    pub fn mean_wealth(&self, t: f64) -> f64 {
        let (r, l, tt) = (self.p.rho, self.lambda_rate(), self.p.horizon);
        self.p.x0 * (r * t).exp() + ((r * t + (l - r) * tt).exp() * (1.0 - (-l * t).exp())) / self.p.gamma
    }
}

pub fn closed_forms(p: PortfolioParams) -> ClosedForms {
    ClosedForms { p }
}

#[derive(Debug, Clone, Serialize)]
pub struct PortfolioReport {
    pub params: PortfolioParams,
    pub lambda_rate: f64,
    pub lambda1_error: f64,
    pub s_error: f64,
    pub lambda3_sup: f64,
    pub theta_error: f64,
    pub theta1_error: f64,
    pub theta2_error: f64,
    pub identity_error: f64,
    pub min_r1: f64,
    pub passed: bool,
}

/// Solve the social model and compare every quantity with its closed form.
pub fn verify_against_solver(
    p: PortfolioParams,
    opts: &Options,
) -> Result<(PortfolioReport, LimitSolution), SolveError> {
    p.validate()?;
    let m = p
        .model()
        .build()
        .map_err(|e| SolveError::PreconditionViolated(e.to_string()))?;
    let lim = solve_limit(&m, opts)?;
    let cf = closed_forms(p);
    let g = decentralized_gains(&m, &lim)?;
    let mut rep = PortfolioReport {
        params: p,
        lambda_rate: cf.lambda_rate(),
        lambda1_error: 0.0,
        s_error: 0.0,
        lambda3_sup: 0.0,
        theta_error: 0.0,
        theta1_error: 0.0,
        theta2_error: 0.0,
        identity_error: 0.0,
        min_r1: f64::INFINITY,
        passed: false,
    };
    let k = p.slope();
    for (i, (t, y)) in lim.solution.nodes().enumerate() {
        let st = lim.state_from(y);
        let (l1, l2, s) = (st.l1[(0, 0)], st.l2[(0, 0)], st.s[(0, 0)]);
        rep.lambda1_error = rep.lambda1_error.max((l1 - cf.lambda1(t)).abs());
        rep.s_error = rep.s_error.max((s - cf.s(t)).abs());
        rep.lambda3_sup = rep.lambda3_sup.max((l1 + l2).abs());
        rep.theta_error = rep.theta_error.max((g.theta.values[i][(0, 0)] - k).abs());
        rep.theta1_error = rep.theta1_error.max((g.theta1.values[i][(0, 0)] + k).abs());
        rep.theta2_error = rep.theta2_error.max((g.theta2.values[i][(0, 0)] - k * s / l1).abs());
        rep.min_r1 = rep.min_r1.min(p.sigma * p.sigma * l1);
    }
    rep.identity_error = identity_error(&cf, 20);
    rep.passed = rep.lambda1_error <= 1e-8
        && rep.s_error <= 1e-8
        && rep.lambda3_sup <= 1e-9
        && rep.theta_error <= 1e-8
        && rep.theta1_error <= 1e-8
        && rep.theta2_error <= 1e-8
        && rep.identity_error <= 1e-12
        && rep.min_r1 > 0.0;
    Ok((rep, lim))
}

/// `max |−S Λ1⁻¹ − C A⁻¹|` over `k` uniform points of `[0, T]`, all from closed forms.
pub fn identity_error(cf: &ClosedForms, k: usize) -> f64 {
    (0..k)
        .map(|i| {
            let t = cf.p.horizon * i as f64 / (k - 1) as f64;
            let lhs = -cf.s(t) / cf.lambda1(t);
            let rhs = cf.c(t) / cf.a(t);
            ((lhs - rhs) / rhs.abs().max(1.0)).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlPair {
    pub u_mv: f64,
    pub u_soc: f64,
}

/// Mean-variance control with `E X(t) := xbar` and the decentralized social control.
pub fn control_compare(p: PortfolioParams, t: f64, x: f64, xbar: f64) -> ControlPair {
    let cf = closed_forms(p);
    let k = p.slope();
    ControlPair {
        u_mv: k * (cf.c(t) / cf.a(t) - (x - xbar)),
        u_soc: k * (-cf.s(t) / cf.lambda1(t) - (x - xbar)),
    }
}

/// Mean-variance control with the mean term written out explicitly.
pub fn control_explicit(p: PortfolioParams, t: f64, x: f64) -> f64 {
    let l = p.lambda_rate();
    p.slope() * (p.x0 * (p.rho * t).exp() + (l * p.horizon - p.rho * (p.horizon - t)).exp() / p.gamma - x)
}

/// `E X` on `[0, T]` from `dEX/dt = ρ EX + (α−ρ)² σ⁻² C A⁻¹`, solved numerically.
///
/// The forward equation is integrated as a backward one in reversed time.
pub fn solve_mean_wealth(p: PortfolioParams, opts: &Options) -> Result<Vec<(f64, f64)>, SolveError> {
    let cf = closed_forms(p);
    let tt = p.horizon;
    let layout = Layout::new().with("m", 1, 1, false);
    let drive = (p.alpha - p.rho) * p.slope();
    let rhs = |s: f64, y: &[f64], out: &mut [f64]| {
        let t = tt - s;
        out[0] = -(p.rho * y[0] + drive * cf.c(t) / cf.a(t));
        Ok(())
    };
    let sol = odecore::integrate_backward(&layout, &rhs, vec![p.x0], tt, opts, &[])?;
    let mut out: Vec<(f64, f64)> = sol.nodes().map(|(s, y)| (tt - s, y[0])).collect();
    out.reverse();
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeConsistency {
    pub t0: f64,
    pub max_gain_difference: f64,
}

/// Re-solve on `[t0, T]` and compare gains with the restriction of the full-horizon ones.
pub fn time_consistency(p: PortfolioParams, t0: f64, opts: &Options) -> Result<TimeConsistency, SolveError> {
    let full_m = p
        .model()
        .build()
        .map_err(|e| SolveError::PreconditionViolated(e.to_string()))?;
    let mut short = full_m.clone();
    short.horizon = p.horizon - t0;
    let g_full = decentralized_gains(&full_m, &solve_limit(&full_m, opts)?)?;
    let g_short = decentralized_gains(&short, &solve_limit(&short, opts)?)?;
    let mut worst: f64 = 0.0;
    for (i, s) in g_short.theta.times.iter().enumerate() {
        let a = g_full.at(t0 + s)?;
        worst = worst
            .max((&a.theta - &g_short.theta.values[i]).abs().max())
            .max((&a.theta1 - &g_short.theta1.values[i]).abs().max())
            .max((&a.theta2 - &g_short.theta2.values[i]).abs().max());
    }
    Ok(TimeConsistency {
        t0,
        max_gain_difference: worst,
    })
}
