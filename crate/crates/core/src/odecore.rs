//! Backward-in-time Dormand–Prince 5(4) integrator for stacked matrix ODEs.
//!
//! A system is a flat `Vec<f64>` described by a [`Layout`] of named matrix
//! blocks (column-major). [`integrate_backward`] runs the adaptive solver from
//! `t = T` down to `t = 0` with positivity and blow-up events. Linear systems
//! driven by an already solved trajectory are run with [`follow`], which
//! replays the driver's accepted steps and reuses its exact stage states.

use crate::linalg::{min_eig, sym, SingularInverse};
use nalgebra::DMatrix;
use std::collections::BTreeMap;
use thiserror::Error;

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B5: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn stage_coeffs(i: usize) -> &'static [f64] {
    match i {
        1 => &A2,
        2 => &A3,
        3 => &A4,
        4 => &A5,
        5 => &A6,
        _ => &B5,
    }
}

/// One named matrix inside a stacked state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub symmetric: bool,
    offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    blocks: Vec<Block>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, rows: usize, cols: usize, symmetric: bool) -> Self {
        assert!(self.index(name).is_none(), "duplicate block {name}");
        self.blocks.push(Block {
            name: name.to_string(),
            rows,
            cols,
            symmetric: symmetric && rows == cols,
            offset: self.len,
        });
        self.len += rows * cols;
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn get(&self, y: &[f64], i: usize) -> DMatrix<f64> {
        let b = &self.blocks[i];
        DMatrix::from_column_slice(b.rows, b.cols, &y[b.offset..b.offset + b.rows * b.cols])
    }

    pub fn put(&self, out: &mut [f64], i: usize, m: &DMatrix<f64>) {
        let b = &self.blocks[i];
        assert_eq!((m.nrows(), m.ncols()), (b.rows, b.cols), "block {} shape", b.name);
        out[b.offset..b.offset + b.rows * b.cols].copy_from_slice(m.as_slice());
    }

    /// Stack one matrix per block into a state vector.
    pub fn pack(&self, mats: &[DMatrix<f64>]) -> Vec<f64> {
        assert_eq!(mats.len(), self.blocks.len());
        let mut y = vec![0.0; self.len];
        for (i, m) in mats.iter().enumerate() {
            self.put(&mut y, i, m);
        }
        y
    }

    pub fn symmetrize(&self, y: &mut [f64]) {
        for (i, b) in self.blocks.iter().enumerate() {
            if b.symmetric && b.rows > 1 {
                let m = sym(&self.get(y, i));
                self.put(y, i, &m);
            }
        }
    }

    pub fn concat(&self, other: &Layout) -> Layout {
        let mut out = self.clone();
        for b in &other.blocks {
            out = out.with(&b.name, b.rows, b.cols, b.symmetric);
        }
        out
    }

    fn max_block_norm(&self, y: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                y[b.offset..b.offset + b.rows * b.cols]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, |a: f64, x| if x.is_nan() { f64::INFINITY } else { a.max(x) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Options {
    pub rtol: f64,
    pub atol: f64,
    pub pos_tol: f64,
    pub max_norm: f64,
    /// Largest step as a fraction of the horizon.
    pub max_step_fraction: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            pos_tol: 1e-9,
            max_norm: 1e8,
            max_step_fraction: 0.01,
        }
    }
}

/// A matrix-valued function of the state that must stay positive definite.
pub struct Constraint<'a> {
    pub id: String,
    pub eval: Box<dyn Fn(&[f64]) -> DMatrix<f64> + 'a>,
}

impl<'a> Constraint<'a> {
    pub fn new(id: &str, eval: impl Fn(&[f64]) -> DMatrix<f64> + 'a) -> Self {
        Self {
            id: id.to_string(),
            eval: Box::new(eval),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Failure {
    #[error("positivity of {constraint} lost at t = {t}")]
    PositivityViolation { t: f64, constraint: String },
    #[error("blow-up at t = {t}")]
    BlowUp { t: f64 },
    #[error("step size underflow at t = {t}")]
    StepFailure { t: f64 },
}

impl Failure {
    pub fn time(&self) -> f64 {
        match self {
            Failure::PositivityViolation { t, .. } | Failure::BlowUp { t } | Failure::StepFailure { t } => *t,
        }
    }
}

/// A failed solve together with the partial trajectory on `[t_fail, T]`.
#[derive(Debug, Clone, Error)]
#[error("{failure}")]
pub struct Failed {
    pub failure: Failure,
    pub partial: Solution,
}

pub type Rhs<'a> = dyn Fn(f64, &[f64], &mut [f64]) -> Result<(), SingularInverse> + 'a;
pub type FollowerRhs<'a> = dyn Fn(f64, &[f64], &[f64], &mut [f64]) -> Result<(), SingularInverse> + 'a;

/// Accepted nodes of a backward solve, stored from `t = T` downwards.
#[derive(Debug, Clone)]
pub struct Solution {
    pub layout: Layout,
    pub horizon: f64,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    derivs: Vec<Vec<f64>>,
    /// Interior stage states 2..=6 of each accepted step.
    stages: Vec<Vec<Vec<f64>>>,
}

impl Solution {
    fn start(layout: Layout, horizon: f64, y: Vec<f64>, f: Vec<f64>) -> Self {
        Self {
            layout,
            horizon,
            times: vec![horizon],
            states: vec![y],
            derivs: vec![f],
            stages: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Node times, ascending.
    pub fn times(&self) -> Vec<f64> {
        self.times.iter().rev().copied().collect()
    }

    /// Earliest time reached (0 when solved).
    pub fn earliest(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// State at the earliest node.
    pub fn initial_state(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    pub fn terminal_state(&self) -> &[f64] {
        &self.states[0]
    }

    /// Node states in ascending time order.
    pub fn nodes(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.times
            .iter()
            .rev()
            .copied()
            .zip(self.states.iter().rev().map(|s| s.as_slice()))
    }

    /// Cubic Hermite interpolation of the full state.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let k = locate(&self.times, t);
        if k + 1 == self.times.len() {
            return self.states[k].clone();
        }
        hermite(
            self.times[k],
            &self.states[k],
            &self.derivs[k],
            self.times[k + 1],
            &self.states[k + 1],
            &self.derivs[k + 1],
            t,
        )
    }

    pub fn value(&self, name: &str, t: f64) -> DMatrix<f64> {
        let i = self.block_index(name);
        self.layout.get(&self.at(t), i)
    }

    pub fn initial(&self, name: &str) -> DMatrix<f64> {
        let i = self.block_index(name);
        self.layout.get(self.initial_state(), i)
    }

    fn block_index(&self, name: &str) -> usize {
        self.layout
            .index(name)
            .unwrap_or_else(|| panic!("no block named {name}"))
    }

    pub fn block(&self, name: &str) -> MatrixTrajectory {
        let i = self.block_index(name);
        let n = self.times.len();
        let mut tr = MatrixTrajectory {
            times: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            derivs: Vec::with_capacity(n),
        };
        for k in (0..n).rev() {
            tr.times.push(self.times[k]);
            tr.values.push(self.layout.get(&self.states[k], i));
            tr.derivs.push(self.layout.get(&self.derivs[k], i));
        }
        tr
    }

    /// All blocks as trajectories keyed by name.
    pub fn trajectories(&self) -> BTreeMap<String, MatrixTrajectory> {
        self.layout
            .blocks()
            .iter()
            .map(|b| (b.name.clone(), self.block(&b.name)))
            .collect()
    }

    /// Apply a linear map to every node state, derivative and stage.
    pub fn map_linear(&self, layout: Layout, f: impl Fn(&[f64]) -> Vec<f64>) -> Solution {
        Solution {
            layout,
            horizon: self.horizon,
            times: self.times.clone(),
            states: self.states.iter().map(|y| f(y)).collect(),
            derivs: self.derivs.iter().map(|y| f(y)).collect(),
            stages: self.stages.iter().map(|st| st.iter().map(|y| f(y)).collect()).collect(),
        }
    }

    /// Join a follower solved on the same steps into one stacked solution.
    pub fn concat(&self, other: &Solution) -> Solution {
        assert_eq!(self.times, other.times, "concat requires identical step sequences");
        let join = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().chain(b).copied().collect() };
        Solution {
            layout: self.layout.concat(&other.layout),
            horizon: self.horizon,
            times: self.times.clone(),
            states: self.states.iter().zip(&other.states).map(|(a, b)| join(a, b)).collect(),
            derivs: self.derivs.iter().zip(&other.derivs).map(|(a, b)| join(a, b)).collect(),
            stages: self
                .stages
                .iter()
                .zip(&other.stages)
                .map(|(sa, sb)| sa.iter().zip(sb).map(|(a, b)| join(a, b)).collect())
                .collect(),
        }
    }
}

/// Index k with times[k] >= t >= times[k+1] for descending `times`.
fn locate(times: &[f64], t: f64) -> usize {
    let n = times.len();
    if n == 1 || t >= times[0] {
        return 0;
    }
    if t <= times[n - 1] {
        return n - 1;
    }
    let (mut lo, mut hi) = (0, n - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if times[mid] >= t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn hermite(ta: f64, ya: &[f64], fa: &[f64], tb: f64, yb: &[f64], fb: &[f64], t: f64) -> Vec<f64> {
    let dt = ta - tb;
    if dt <= 0.0 {
        return ya.to_vec();
    }
    let th = (t - tb) / dt;
    let (t2, t3) = (th * th, th * th * th);
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + th;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    (0..ya.len())
        .map(|i| h00 * yb[i] + h10 * dt * fb[i] + h01 * ya[i] + h11 * dt * fa[i])
        .collect()
}

/// Time grid with a matrix value and time derivative per node.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
    pub derivs: Vec<DMatrix<f64>>,
}

impl MatrixTrajectory {
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.values[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1].clone();
        }
        let k = self.times.partition_point(|&s| s <= t).max(1) - 1;
        let (tb, ta) = (self.times[k], self.times[k + 1]);
        let v = hermite(
            ta,
            self.values[k + 1].as_slice(),
            self.derivs[k + 1].as_slice(),
            tb,
            self.values[k].as_slice(),
            self.derivs[k].as_slice(),
            t,
        );
        let m = &self.values[0];
        DMatrix::from_vec(m.nrows(), m.ncols(), v)
    }

    pub fn first(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.values.last().unwrap()
    }

    /// Multiply values and derivatives by `c`.
    pub fn scale(&self, c: f64) -> MatrixTrajectory {
        MatrixTrajectory {
            times: self.times.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
            derivs: self.derivs.iter().map(|v| v * c).collect(),
        }
    }

    /// Node-wise map; derivatives of the result are left at zero.
    pub fn map(&self, f: impl Fn(f64, &DMatrix<f64>) -> DMatrix<f64>) -> MatrixTrajectory {
        let values: Vec<DMatrix<f64>> = self.times.iter().zip(&self.values).map(|(&t, v)| f(t, v)).collect();
        let derivs = values.iter().map(|v| DMatrix::zeros(v.nrows(), v.ncols())).collect();
        MatrixTrajectory {
            times: self.times.clone(),
            values,
            derivs,
        }
    }

    /// Largest asymmetry over nodes.
    pub fn max_asymmetry(&self) -> f64 {
        self.values.iter().map(crate::linalg::asymmetry).fold(0.0, f64::max)
    }

    /// Max abs entry of the node values.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(crate::linalg::max_abs).fold(0.0, f64::max)
    }
}

/// Sup over the nodes of both trajectories of the max-entry distance.
pub fn sup_distance(a: &MatrixTrajectory, b: &MatrixTrajectory) -> f64 {
    let mut d: f64 = 0.0;
    for (t, v) in a.times.iter().zip(&a.values) {
        d = d.max(crate::linalg::max_abs(&(v - b.at(*t))));
    }
    for (t, v) in b.times.iter().zip(&b.values) {
        d = d.max(crate::linalg::max_abs(&(v - a.at(*t))));
    }
    d
}

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.map(|x| x * x).sum::<f64>() / n.max(1) as f64).sqrt()
}

fn check_node(layout: &Layout, y: &[f64], t: f64, opts: &Options, constraints: &[Constraint<'_>]) -> Option<Failure> {
    if layout.max_block_norm(y) > opts.max_norm {
        return Some(Failure::BlowUp { t });
    }
    for c in constraints {
        let m = (c.eval)(y);
        let e = min_eig(&m);
        if !(e >= opts.pos_tol) {
            return Some(Failure::PositivityViolation {
                t,
                constraint: c.id.clone(),
            });
        }
    }
    None
}

/// Integrate `dy/dt = rhs(t, y)` from `y(T) = terminal` down to `t = 0`.
pub fn integrate_backward(
    layout: &Layout,
    rhs: &Rhs<'_>,
    terminal: Vec<f64>,
    horizon: f64,
    opts: &Options,
    constraints: &[Constraint<'_>],
) -> Result<Solution, Failed> {
    let n = layout.len();
    assert_eq!(terminal.len(), n);
    let mut y = terminal;
    layout.symmetrize(&mut y);
    let mut f = vec![0.0; n];
    let fail = |failure: Failure, sol: Solution| Err(Failed { failure, partial: sol });

    if rhs(horizon, &y, &mut f).is_err() || f.iter().any(|x| !x.is_finite()) {
        let sol = Solution::start(layout.clone(), horizon, y, vec![0.0; n]);
        return fail(Failure::StepFailure { t: horizon }, sol);
    }
    let mut sol = Solution::start(layout.clone(), horizon, y.clone(), f.clone());
    if let Some(e) = check_node(layout, &y, horizon, opts, constraints) {
        return fail(e, sol);
    }

    let h_max = opts.max_step_fraction * horizon;
    let h_min = 1e-14 * horizon;
    let sk = |a: f64, b: f64| opts.atol + opts.rtol * a.abs().max(b.abs());

    // initial step
    let mut h = {
        let d0 = rms(y.iter().map(|v| v / sk(*v, *v)), n);
        let d1 = rms(f.iter().zip(&y).map(|(fv, v)| fv / sk(*v, *v)), n);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6 * horizon
        } else {
            0.01 * d0 / d1
        };
        h0 = h0.min(h_max);
        let y1: Vec<f64> = y.iter().zip(&f).map(|(v, fv)| v - h0 * fv).collect();
        let mut f1 = vec![0.0; n];
        let d2 = if rhs(horizon - h0, &y1, &mut f1).is_ok() {
            rms(f1.iter().zip(&f).zip(&y).map(|((a, b), v)| (a - b) / sk(*v, *v)), n) / h0
        } else {
            f64::INFINITY
        };
        let dm = d1.max(d2);
        let h1 = if dm <= 1e-15 {
            (h0 * 1e-3).max(1e-6 * horizon)
        } else if dm.is_finite() {
            (0.01 / dm).powf(0.2)
        } else {
            h0 * 1e-3
        };
        (100.0 * h0).min(h1).min(h_max).max(h_min * 10.0)
    };

    let mut s = 0.0;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut ystage = vec![0.0; n];
    let mut rejected_last = false;
    let mut steps = 0usize;
    while s < horizon {
        steps += 1;
        let t = horizon - s;
        if steps > 2_000_000 {
            return fail(Failure::StepFailure { t }, sol);
        }
        let last = s + h >= horizon * (1.0 - 1e-13);
        if last {
            h = horizon - s;
        }
        // k holds dy/ds = -f
        for (ki, fi) in k[0].iter_mut().zip(&f) {
            *ki = -fi;
        }
        let mut ok = true;
        let mut stage_states: Vec<Vec<f64>> = Vec::with_capacity(5);
        for i in 1..7 {
            let a = stage_coeffs(i);
            for j in 0..n {
                let mut acc = 0.0;
                for (l, al) in a.iter().enumerate() {
                    acc += al * k[l][j];
                }
                ystage[j] = y[j] + h * acc;
            }
            let ti = if i == 6 { horizon - (s + h) } else { t - C[i] * h };
            let ti = if last && i >= 5 { 0.0 } else { ti };
            let mut fi = vec![0.0; n];
            if rhs(ti, &ystage, &mut fi).is_err() || fi.iter().any(|x| !x.is_finite()) {
                ok = false;
                break;
            }
            for (kv, fv) in k[i].iter_mut().zip(&fi) {
                *kv = -fv;
            }
            if i < 6 {
                stage_states.push(ystage.clone());
            }
        }
        if !ok {
            h *= 0.25;
            rejected_last = true;
            if h < h_min {
                return fail(Failure::StepFailure { t }, sol);
            }
            continue;
        }
        // y_new was the last stage state
        let y_new = ystage.clone();
        let err = rms(
            (0..n).map(|j| {
                let e: f64 = (0..7).map(|l| E[l] * k[l][j]).sum::<f64>() * h;
                e / sk(y[j], y_new[j])
            }),
            n,
        );
        if !err.is_finite() || err > 1.0 {
            let fac = if err.is_finite() {
                (0.9 * err.powf(-0.2)).max(0.2)
            } else {
                0.2
            };
            h *= fac;
            rejected_last = true;
            if h < h_min {
                return fail(Failure::StepFailure { t }, sol);
            }
            continue;
        }
        s = if last { horizon } else { s + h };
        let t_new = if last { 0.0 } else { horizon - s };
        y = y_new;
        layout.symmetrize(&mut y);
        f = k[6].iter().map(|v| -v).collect();
        sol.times.push(t_new);
        sol.states.push(y.clone());
        sol.derivs.push(f.clone());
        sol.stages.push(stage_states);
        if let Some(e) = check_node(layout, &y, t_new, opts, constraints) {
            return fail(e, sol);
        }
        let facmax = if rejected_last { 1.0 } else { 10.0 };
        let fac = if err == 0.0 {
            facmax
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, facmax)
        };
        h = (h * fac).min(h_max);
        rejected_last = false;
    }
    Ok(sol)
}

/// Integrate a system driven by `base` on exactly the base's accepted steps.
///
/// `rhs(t, base_state, own_state, out)` gives `d(own)/dt`.
pub fn follow(
    base: &Solution,
    layout: &Layout,
    rhs: &FollowerRhs<'_>,
    terminal: Vec<f64>,
    opts: &Options,
) -> Result<Solution, Failed> {
    let n = layout.len();
    assert_eq!(terminal.len(), n);
    let mut y = terminal;
    layout.symmetrize(&mut y);
    let mut f = vec![0.0; n];
    let t_end = base.times[0];
    if rhs(t_end, &base.states[0], &y, &mut f).is_err() {
        let sol = Solution::start(layout.clone(), base.horizon, y, vec![0.0; n]);
        return Err(Failed {
            failure: Failure::StepFailure { t: t_end },
            partial: sol,
        });
    }
    let mut sol = Solution::start(layout.clone(), base.horizon, y.clone(), f.clone());
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut ystage = vec![0.0; n];
    for step in 0..base.stages.len() {
        let t = base.times[step];
        let t_next = base.times[step + 1];
        let h = t - t_next;
        for (ki, fi) in k[0].iter_mut().zip(&f) {
            *ki = -fi;
        }
        let mut stage_states = Vec::with_capacity(5);
        for i in 1..7 {
            let a = stage_coeffs(i);
            for j in 0..n {
                let mut acc = 0.0;
                for (l, al) in a.iter().enumerate() {
                    acc += al * k[l][j];
                }
                ystage[j] = y[j] + h * acc;
            }
            let (ti, bstate) = if i == 6 {
                (t_next, &base.states[step + 1])
            } else {
                (t - C[i] * h, &base.stages[step][i - 1])
            };
            let ti = if i == 5 && t_next == 0.0 { 0.0 } else { ti };
            let mut fi = vec![0.0; n];
            let bad = rhs(ti, bstate, &ystage, &mut fi).is_err() || fi.iter().any(|x| !x.is_finite());
            if bad {
                return Err(Failed {
                    failure: Failure::StepFailure { t },
                    partial: sol,
                });
            }
            for (kv, fv) in k[i].iter_mut().zip(&fi) {
                *kv = -fv;
            }
            if i < 6 {
                stage_states.push(ystage.clone());
            }
        }
        y = ystage.clone();
        layout.symmetrize(&mut y);
        f = k[6].iter().map(|v| -v).collect();
        sol.times.push(t_next);
        sol.states.push(y.clone());
        sol.derivs.push(f.clone());
        sol.stages.push(stage_states);
        if layout.max_block_norm(&y) > opts.max_norm {
            return Err(Failed {
                failure: Failure::BlowUp { t: t_next },
                partial: sol,
            });
        }
    }
    Ok(sol)
}

/// Max over interior points of a uniform `m`-node grid of
/// |centered difference of the dense output − rhs| / (1 + |rhs|).
pub fn residual_check(sol: &Solution, rhs: &Rhs<'_>, m: usize) -> f64 {
    let (t0, t1) = (sol.earliest(), sol.horizon);
    let spacing = (t1 - t0) / (m as f64 - 1.0);
    let delta = 1e-3 * spacing;
    let n = sol.layout.len();
    let mut worst: f64 = 0.0;
    let mut f = vec![0.0; n];
    for i in 1..m - 1 {
        let t = t0 + spacing * i as f64;
        let y = sol.at(t);
        let yp = sol.at(t + delta);
        let ym = sol.at(t - delta);
        if rhs(t, &y, &mut f).is_err() {
            return f64::INFINITY;
        }
        let diff = rms((0..n).map(|j| (yp[j] - ym[j]) / (2.0 * delta) - f[j]), 1);
        let norm = rms(f.iter().copied(), 1);
        worst = worst.max(diff / (1.0 + norm));
    }
    worst
}
