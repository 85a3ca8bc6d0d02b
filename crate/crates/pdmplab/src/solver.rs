//! Deterministic invariant-law solvers: the one-switch CDF fixed-point
//! iteration on a grid, pointwise one-switch density quadrature, the
//! two-switch backward map with its inversion, Jacobian, and kernel, and the
//! two-switch transfer-operator route to the regime-0 density.

use crate::core::{CoreError, Point, Regime, SwitchingParams};
use crate::geometry::{contains_interior, exit_time, GeomError};
use crate::grid::{GridError, GridField, GridKind};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver input: {0}")]
    Invalid(String),
    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("no two-switch solution on the {branch:?} branch: {reason}")]
    NoSolution { branch: TwoSwitchBranch, reason: String },
    #[error("intermediate point too close to the diagonal: |det U| = {det:.3e} <= cutoff {cutoff:.3e}")]
    NearDiagonal { det: f64, cutoff: f64 },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl SolverError {
    /// True for the errors that mean "the iteration ran out of budget", which
    /// callers report differently from bad input.
    pub fn is_nonconvergence(&self) -> bool {
        matches!(self, SolverError::NoConvergence { .. })
    }
}

/// Tuning knobs for the grid solvers.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Nodes per axis for CDF grids; cells per axis for density grids.
    pub grid: usize,
    /// Quadrature nodes per unit time; nodes per panel = clamp(round(of one
    /// panel), 2, 12).
    pub nodes_per_time: f64,
    /// Sup-norm (CDF) or L1 (transfer-operator) convergence tolerance.
    pub tol: f64,
    pub max_iter: usize,
    /// Reject kernel evaluations with |det U(z)| at or below this.  The
    /// fold at the diagonal only resolves itineraries to about the square
    /// root of machine precision, so the default sits safely above that.
    pub diag_cutoff: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            grid: 256,
            nodes_per_time: 48.0,
            tol: 1e-6,
            max_iter: 500,
            diag_cutoff: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.grid < 2 {
            return Err(SolverError::Invalid("grid must be at least 2".into()));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(SolverError::Invalid("tolerance must be positive".into()));
        }
        if !(self.diag_cutoff > 0.0) {
            return Err(SolverError::Invalid("diagonal cutoff must be positive".into()));
        }
        if !(self.nodes_per_time >= 1.0) || !self.nodes_per_time.is_finite() {
            return Err(SolverError::Invalid("nodes_per_time must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(SolverError::Invalid("max_iter must be positive".into()));
        }
        Ok(())
    }

    /// Quadrature panel length: a quarter of the fastest time scale.
    pub fn panel_len(&self, p: &SwitchingParams) -> f64 {
        1.0 / (4.0 * p.alpha.max(p.lambda0).max(p.lambda1))
    }

    fn nodes_per_panel(&self, p: &SwitchingParams) -> usize {
        ((self.nodes_per_time * self.panel_len(p)).round() as isize).clamp(2, 12) as usize
    }
}

/// Convergence trace of an iterative solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    /// Sup-norm (or L1) change after each iteration.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

/// Which side of the diagonal held the intermediate switch point, looking
/// backward from the terminal point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoSwitchBranch {
    Right,
    Left,
}

/// Backward two-switch itinerary: most recent leg is field 0 for time `t`
/// reaching the intermediate point, then field 1 for time `s`.
#[derive(Debug, Clone, Copy)]
pub struct TwoSwitchTimes {
    pub s: f64,
    pub t: f64,
    pub branch: TwoSwitchBranch,
}

// ---------------------------------------------------------------------------
// Gauss-Legendre panels
// ---------------------------------------------------------------------------

/// Gauss-Legendre nodes and weights on [0, 1], by Newton iteration on the
/// Legendre polynomial.
fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 1);
    let mut xs = vec![0.0; m];
    let mut ws = vec![0.0; m];
    for k in 0..m {
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=m {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        xs[k] = 0.5 * (x + 1.0);
        ws[k] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (xs, ws)
}

/// Composite Gauss-Legendre integral of `f` over `[lo, hi]` with panels of
/// length at most `panel_len`.
fn integrate_panels(
    lo: f64,
    hi: f64,
    panel_len: f64,
    ref_x: &[f64],
    ref_w: &[f64],
    mut f: impl FnMut(f64) -> f64,
) -> f64 {
    if !(hi > lo) {
        return 0.0;
    }
    let panels = ((hi - lo) / panel_len).ceil().max(1.0) as usize;
    let h = (hi - lo) / panels as f64;
    let mut acc = 0.0;
    for j in 0..panels {
        let a = lo + j as f64 * h;
        for (x, w) in ref_x.iter().zip(ref_w) {
            acc += w * h * f(a + x * h);
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Monotone cubic (Fritsch-Carlson) interpolation on a uniform grid over [0,1]
// ---------------------------------------------------------------------------

/// Shape-preserving cubic Hermite interpolant on uniformly spaced nodes over
/// [0, 1]: slopes are harmonic means of neighboring secants, zeroed at local
/// extrema, so monotone data yields a monotone interpolant.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(ys: Vec<f64>) -> Self {
        let n = ys.len();
        assert!(n >= 2, "need at least two nodes");
        let h = 1.0 / (n - 1) as f64;
        let sec: Vec<f64> = ys.windows(2).map(|w| (w[1] - w[0]) / h).collect();
        let mut ds = vec![0.0; n];
        for i in 1..n - 1 {
            let (a, b) = (sec[i - 1], sec[i]);
            ds[i] = if a * b > 0.0 { 2.0 * a * b / (a + b) } else { 0.0 };
        }
        ds[0] = endpoint_slope(sec[0], sec.get(1).copied().unwrap_or(sec[0]));
        ds[n - 1] = endpoint_slope(sec[n - 2], sec.get(n.wrapping_sub(3)).copied().unwrap_or(sec[n - 2]));
        MonotoneCubic { ys, ds }
    }

    /// Evaluate at `x`, clamped into [0, 1].
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.ys.len();
        let h = 1.0 / (n - 1) as f64;
        let x = x.clamp(0.0, 1.0);
        let mut i = (x * (n - 1) as f64) as usize;
        if i >= n - 1 {
            i = n - 2;
        }
        let u = (x - i as f64 * h) / h;
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (d0, d1) = (self.ds[i] * h, self.ds[i + 1] * h);
        let u2 = u * u;
        let u3 = u2 * u;
        y0 * (2.0 * u3 - 3.0 * u2 + 1.0)
            + d0 * (u3 - 2.0 * u2 + u)
            + y1 * (-2.0 * u3 + 3.0 * u2)
            + d1 * (u3 - u2)
    }
}

/// One-sided endpoint slope `(3 s_near - s_far) / 2`, clamped to keep the
/// boundary cell monotone.
fn endpoint_slope(s_near: f64, s_far: f64) -> f64 {
    let d = (3.0 * s_near - s_far) / 2.0;
    if d * s_near <= 0.0 {
        0.0
    } else if d.abs() > 3.0 * s_near.abs() {
        3.0 * s_near
    } else {
        d
    }
}

// ---------------------------------------------------------------------------
// Shared time grid for the CDF sweeps
// ---------------------------------------------------------------------------

/// Global quadrature lattice in backward time, with the exponentials every
/// sweep needs precomputed once per solver.
struct TimeGrid {
    panel_len: f64,
    per_panel: usize,
    n_panels: usize,
    w: Vec<f64>,
    exp_a: Vec<f64>,
    exp_b: Vec<f64>,
    exp_l0: Vec<f64>,
    exp_l1: Vec<f64>,
    ref_x: Vec<f64>,
    ref_w: Vec<f64>,
}

impl TimeGrid {
    fn new(p: &SwitchingParams, cfg: &SolverConfig, t_max: f64) -> Self {
        let panel_len = cfg.panel_len(p);
        let per_panel = cfg.nodes_per_panel(p);
        let (ref_x, ref_w) = gauss_legendre(per_panel);
        let n_panels = (t_max / panel_len).ceil() as usize + 1;
        let total = n_panels * per_panel;
        let mut t = Vec::with_capacity(total);
        let mut w = Vec::with_capacity(total);
        for j in 0..n_panels {
            let a = j as f64 * panel_len;
            for (x, wk) in ref_x.iter().zip(&ref_w) {
                t.push(a + x * panel_len);
                w.push(wk * panel_len);
            }
        }
        let exp_of = |r: f64| t.iter().map(|tk| (r * tk).exp()).collect::<Vec<f64>>();
        TimeGrid {
            panel_len,
            per_panel,
            n_panels,
            exp_a: exp_of(p.alpha),
            exp_b: exp_of(p.beta),
            exp_l0: exp_of(-p.lambda0),
            exp_l1: exp_of(-p.lambda1),
            w,
            ref_x,
            ref_w,
        }
    }
}

/// Read-only view of one regime's CDF layer together with its exact edge
/// interpolants and total mass, for evaluating clamped arguments.
struct CdfView<'a> {
    values: &'a [f64],
    n: usize,
    top: &'a MonotoneCubic,
    right: &'a MonotoneCubic,
    mass: f64,
}

impl CdfView<'_> {
    fn eval(&self, y1: f64, y2: f64) -> f64 {
        if y1 <= 0.0 || y2 <= 0.0 {
            return 0.0;
        }
        match (y1 >= 1.0, y2 >= 1.0) {
            (true, true) => self.mass,
            (false, true) => self.top.eval(y1),
            (true, false) => self.right.eval(y2),
            (false, false) => {
                let n = self.n;
                let g1 = y1 * (n - 1) as f64;
                let g2 = y2 * (n - 1) as f64;
                let i1 = (g1 as usize).min(n - 2);
                let i2 = (g2 as usize).min(n - 2);
                let f1 = g1 - i1 as f64;
                let f2 = g2 - i2 as f64;
                let v = |a: usize, b: usize| self.values[a * n + b];
                (1.0 - f1) * ((1.0 - f2) * v(i1, i2) + f2 * v(i1, i2 + 1))
                    + f1 * ((1.0 - f2) * v(i1 + 1, i2) + f2 * v(i1 + 1, i2 + 1))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// One-dimensional edge subsystems
// ---------------------------------------------------------------------------

/// Solve the closed pair of edge equations shared by both regimes along one
/// boundary edge of the square (`rate` = alpha on the top edge, beta on the
/// right). Returns the regime-0 and regime-1 edge CDFs on `n` uniform nodes.
fn solve_edge_pair(
    p: &SwitchingParams,
    rate: f64,
    n: usize,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, Vec<f64>), SolverError> {
    let (m0, m1) = (p.occupancy(Regime::R0), p.occupancy(Regime::R1));
    let panel_len = cfg.panel_len(p);
    let (ref_x, ref_w) = gauss_legendre(cfg.nodes_per_panel(p));
    let mut f0: Vec<f64> = (0..n).map(|k| m0 * k as f64 / (n - 1) as f64).collect();
    let mut f1: Vec<f64> = (0..n).map(|k| m1 * k as f64 / (n - 1) as f64).collect();
    let tol = (cfg.tol * 0.1).max(1e-13);
    let cap = cfg.max_iter.max(200) * 10;
    for _ in 0..cap {
        let c1 = MonotoneCubic::new(f1.clone());
        let mut new0 = f0.clone();
        for (k, slot) in new0.iter_mut().enumerate().take(n - 1).skip(1) {
            let u = k as f64 / (n - 1) as f64;
            let sat = -u.ln() / rate;
            let body = integrate_panels(0.0, sat, panel_len, &ref_x, &ref_w, |t| {
                p.lambda1 * (-p.lambda0 * t).exp() * c1.eval((u * (rate * t).exp()).min(1.0))
            });
            *slot = body + m1 * (p.lambda1 / p.lambda0) * (-p.lambda0 * sat).exp();
        }
        new0[0] = 0.0;
        new0[n - 1] = m0;
        let c0 = MonotoneCubic::new(new0.clone());
        let mut new1 = f1.clone();
        for (k, slot) in new1.iter_mut().enumerate().take(n - 1).skip(1) {
            let u = k as f64 / (n - 1) as f64;
            let stop = -(1.0 - u).ln() / rate;
            *slot = integrate_panels(0.0, stop, panel_len, &ref_x, &ref_w, |t| {
                p.lambda0 * (-p.lambda1 * t).exp() * c0.eval(1.0 - (1.0 - u) * (rate * t).exp())
            });
        }
        new1[0] = 0.0;
        new1[n - 1] = m1;
        let res = f0
            .iter()
            .zip(&new0)
            .chain(f1.iter().zip(&new1))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        f0 = new0;
        f1 = new1;
        if res < tol {
            return Ok((f0, f1));
        }
    }
    Err(SolverError::NoConvergence {
        iterations: cap,
        residual: f64::NAN,
    })
}

// ---------------------------------------------------------------------------
// The CDF fixed-point solver
// ---------------------------------------------------------------------------

/// Grid solver for the pair of invariant CDFs. Construction solves the
/// closed one-dimensional edge subsystems; `solve` then iterates the
/// one-switch integral operator on the interior nodes until the sup-norm
/// change falls under the tolerance.
pub struct CdfSolver {
    p: SwitchingParams,
    cfg: SolverConfig,
    n: usize,
    /// Edge CDFs: [top of G0, right of G0, top of G1, right of G1].
    edges: [MonotoneCubic; 4],
    masses: [f64; 2],
    tg: TimeGrid,
}

impl CdfSolver {
    pub fn new(p: &SwitchingParams, cfg: &SolverConfig) -> Result<Self, SolverError> {
        cfg.validate()?;
        let n = cfg.grid;
        let (top0, top1) = solve_edge_pair(p, p.alpha, n, cfg)?;
        let (right0, right1) = solve_edge_pair(p, p.beta, n, cfg)?;
        let t_max = ((n - 1) as f64).ln() / p.beta;
        Ok(CdfSolver {
            p: *p,
            cfg: *cfg,
            n,
            edges: [
                MonotoneCubic::new(top0),
                MonotoneCubic::new(right0),
                MonotoneCubic::new(top1),
                MonotoneCubic::new(right1),
            ],
            masses: [p.occupancy(Regime::R0), p.occupancy(Regime::R1)],
            tg: TimeGrid::new(p, cfg, t_max),
        })
    }

    /// The edge interpolant `G_regime(·, 1)`.
    pub fn top_edge(&self, regime: Regime) -> &MonotoneCubic {
        &self.edges[2 * regime.index()]
    }

    /// The edge interpolant `G_regime(1, ·)`.
    pub fn right_edge(&self, regime: Regime) -> &MonotoneCubic {
        &self.edges[2 * regime.index() + 1]
    }

    fn view<'a>(&'a self, values: &'a [f64], regime: Regime) -> CdfView<'a> {
        CdfView {
            values,
            n: self.n,
            top: self.top_edge(regime),
            right: self.right_edge(regime),
            mass: self.masses[regime.index()],
        }
    }

    /// Starting iterate: the joint CDF of the uniform law on the lens,
    /// scaled to the regime masses. A genuine CDF, so the monotonicity
    /// invariant holds from iterate zero; uniqueness of the fixed point
    /// makes the choice immaterial otherwise.
    pub fn initial(&self) -> GridField {
        let n = self.n;
        let gamma = self.p.gamma();
        let mut field = GridField::new(GridKind::Cdf, n, n).expect("grid size validated");
        // area[k*n + q] accumulates the lens area below node (u_k, v_q) by a
        // fine vertical sweep: the slab at height y spans the left lens
        // curve to min(u, right curve).
        let yres = 4 * n;
        let dy = 1.0 / yres as f64;
        let mut acc = vec![0.0f64; n];
        let mut area = vec![0.0f64; n * n];
        let mut q = 1usize;
        for j in 0..yres {
            let y = (j as f64 + 0.5) * dy;
            let l = y.powf(gamma);
            let w = (1.0 - (1.0 - y).powf(gamma) - l).max(0.0);
            for (k, a) in acc.iter_mut().enumerate().skip(1) {
                let u = k as f64 / (n - 1) as f64;
                *a += dy * (u - l).clamp(0.0, w);
            }
            let y_hi = (j + 1) as f64 * dy;
            while q < n && q as f64 / (n - 1) as f64 <= y_hi + 1e-12 {
                for k in 0..n {
                    area[k * n + q] = acc[k];
                }
                q += 1;
            }
        }
        let total = area[n * n - 1];
        for (regime, mass) in [(Regime::R0, self.masses[0]), (Regime::R1, self.masses[1])] {
            let vals = field.values_mut(regime);
            for (v, a) in vals.iter_mut().zip(&area) {
                *v = mass * a / total;
            }
        }
        field
    }

    /// Overwrite the axes (zero) and the top/right edges (1-D solutions).
    fn stamp_boundaries(&self, field: &mut GridField) {
        let n = self.n;
        for regime in [Regime::R0, Regime::R1] {
            let top = self.top_edge(regime).ys.clone();
            let right = self.right_edge(regime).ys.clone();
            let vals = field.values_mut(regime);
            for k in 0..n {
                vals[k * n] = 0.0;
                vals[k] = 0.0;
            }
            for k in 0..n {
                vals[k * n + (n - 1)] = top[k];
                vals[(n - 1) * n + k] = right[k];
            }
        }
    }

    /// Integral of the regime-`i` equation at an interior node `(u, v)`,
    /// reading the opposite regime through `view`. Backward flow under field
    /// 0 grows both coordinates; panels are split at the two saturation
    /// times and the tail past both is integrated in closed form.
    fn node_switch0(&self, u: f64, v: f64, view: &CdfView) -> f64 {
        let p = &self.p;
        let (l_own, l_other) = (p.lambda0, p.lambda1);
        let sat_u = -u.ln() / p.alpha;
        let sat_v = -v.ln() / p.beta;
        let (k1, k2) = if sat_u <= sat_v { (sat_u, sat_v) } else { (sat_v, sat_u) };
        let tg = &self.tg;
        let mut acc = 0.0;
        let mut j = 0usize;
        loop {
            let a = j as f64 * tg.panel_len;
            if a >= k2 || j >= tg.n_panels {
                break;
            }
            let b_full = (j + 1) as f64 * tg.panel_len;
            let b = b_full.min(k2);
            let straddles = a < k1 && k1 < b;
            if !straddles && b == b_full {
                let base = j * tg.per_panel;
                for m in base..base + tg.per_panel {
                    let y1 = (u * tg.exp_a[m]).min(1.0);
                    let y2 = (v * tg.exp_b[m]).min(1.0);
                    acc += tg.w[m] * tg.exp_l0[m] * view.eval(y1, y2);
                }
            } else {
                let mut pieces = [(a, b), (0.0, 0.0)];
                let mut count = 1;
                if straddles {
                    pieces = [(a, k1), (k1, b)];
                    count = 2;
                }
                for &(lo, hi) in pieces.iter().take(count) {
                    if !(hi > lo) {
                        continue;
                    }
                    for (x, w) in tg.ref_x.iter().zip(&tg.ref_w) {
                        let t = lo + x * (hi - lo);
                        let y1 = (u * (p.alpha * t).exp()).min(1.0);
                        let y2 = (v * (p.beta * t).exp()).min(1.0);
                        acc += w * (hi - lo) * (-l_own * t).exp() * view.eval(y1, y2);
                    }
                }
            }
            j += 1;
        }
        l_other * acc + view.mass * (l_other / l_own) * (-l_own * k2).exp()
    }

    /// Same for the regime-1 equation: backward flow under field 1 shrinks
    /// both coordinates toward the axes and the integrand vanishes once
    /// either hits zero, so there is no tail.
    fn node_switch1(&self, u: f64, v: f64, view: &CdfView) -> f64 {
        let p = &self.p;
        let stop = (-(1.0 - u).ln() / p.alpha).min(-(1.0 - v).ln() / p.beta);
        let tg = &self.tg;
        let mut acc = 0.0;
        let mut j = 0usize;
        loop {
            let a = j as f64 * tg.panel_len;
            if a >= stop || j >= tg.n_panels {
                break;
            }
            let b_full = (j + 1) as f64 * tg.panel_len;
            let b = b_full.min(stop);
            if b == b_full {
                let base = j * tg.per_panel;
                for m in base..base + tg.per_panel {
                    let y1 = 1.0 - (1.0 - u) * tg.exp_a[m];
                    let y2 = 1.0 - (1.0 - v) * tg.exp_b[m];
                    acc += tg.w[m] * tg.exp_l1[m] * view.eval(y1, y2);
                }
            } else {
                for (x, w) in tg.ref_x.iter().zip(&tg.ref_w) {
                    let t = a + x * (b - a);
                    let y1 = 1.0 - (1.0 - u) * (p.alpha * t).exp();
                    let y2 = 1.0 - (1.0 - v) * (p.beta * t).exp();
                    acc += w * (b - a) * (-p.lambda1 * t).exp() * view.eval(y1, y2);
                }
            }
            j += 1;
        }
        p.lambda0 * acc
    }

    /// One full fixed-point iteration: regime 0 is refreshed from regime 1,
    /// then regime 1 from the fresh regime 0. Returns the new field and the
    /// sup-norm change. Boundary nodes stay frozen at their exact values.
    pub fn sweep(&self, field: &GridField) -> (GridField, f64) {
        let n = self.n;
        let mut next = field.clone();
        {
            let view1 = self.view(&field.values1, Regime::R1);
            let mut rows: Vec<(usize, &mut [f64])> =
                next.values0.chunks_mut(n).enumerate().collect();
            rows.par_iter_mut().for_each(|(i1, row)| {
                if *i1 == 0 || *i1 == n - 1 {
                    return;
                }
                let u = *i1 as f64 / (n - 1) as f64;
                for i2 in 1..n - 1 {
                    let v = i2 as f64 / (n - 1) as f64;
                    row[i2] = self.node_switch0(u, v, &view1);
                }
            });
        }
        // The boundary nodes hold the exact one-dimensional solutions (this
        // also pins the corner masses every iteration); the regime-1 pass
        // then reads the refreshed regime-0 layer.
        self.stamp_boundaries(&mut next);
        {
            let new0 = next.values0.clone();
            let view0 = self.view(&new0, Regime::R0);
            let mut rows: Vec<(usize, &mut [f64])> =
                next.values1.chunks_mut(n).enumerate().collect();
            rows.par_iter_mut().for_each(|(i1, row)| {
                if *i1 == 0 || *i1 == n - 1 {
                    return;
                }
                let u = *i1 as f64 / (n - 1) as f64;
                for i2 in 1..n - 1 {
                    let v = i2 as f64 / (n - 1) as f64;
                    row[i2] = self.node_switch1(u, v, &view0);
                }
            });
        }
        let res = field
            .values0
            .iter()
            .zip(&next.values0)
            .chain(field.values1.iter().zip(&next.values1))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        (next, res)
    }

    /// Iterate from the uniform start until the sup-norm change is below the
    /// tolerance.
    pub fn solve(&self) -> Result<(GridField, SolveReport), SolverError> {
        let mut field = self.initial();
        let mut residuals = Vec::new();
        for iter in 1..=self.cfg.max_iter {
            let (next, res) = self.sweep(&field);
            residuals.push(res);
            field = next;
            if res < self.cfg.tol {
                return Ok((
                    field,
                    SolveReport {
                        iterations: iter,
                        residuals,
                        converged: true,
                    },
                ));
            }
        }
        Err(SolverError::NoConvergence {
            iterations: self.cfg.max_iter,
            residual: residuals.last().copied().unwrap_or(f64::NAN),
        })
    }
}

/// Solve the invariant CDF pair on an `n x n` node grid.
pub fn cdf_fixed_point(
    p: &SwitchingParams,
    cfg: &SolverConfig,
) -> Result<(GridField, SolveReport), SolverError> {
    CdfSolver::new(p, cfg)?.solve()
}

// ---------------------------------------------------------------------------
// Pointwise one-switch density quadrature
// ---------------------------------------------------------------------------

fn one_switch_integrand(
    p: &SwitchingParams,
    rho: &GridField,
    i: Regime,
    x: Point,
    t: f64,
) -> f64 {
    let back = Point::new(
        i.index() as f64 + (x.x1 - i.index() as f64) * (p.alpha * t).exp(),
        i.index() as f64 + (x.x2 - i.index() as f64) * (p.beta * t).exp(),
    );
    i.other().rate(p) * (-i.rate(p) * t).exp() * ((p.alpha + p.beta) * t).exp()
        * rho.sample(i.other(), back)
}

/// Invariant density of regime `i` at `x` by quadrature of the one-switch
/// integral equation against the opposite regime's density layer. The
/// integrand vanishes past the backward exit time because the density is
/// zero outside the lens.
pub fn density_from_one_switch(
    p: &SwitchingParams,
    rho_other: &GridField,
    i: Regime,
    x: Point,
    cfg: &SolverConfig,
) -> Result<f64, SolverError> {
    cfg.validate()?;
    if rho_other.kind != GridKind::Density {
        return Err(SolverError::Invalid(
            "density_from_one_switch needs a density grid".into(),
        ));
    }
    if !contains_interior(p, x) {
        return Err(SolverError::Invalid(format!(
            "point ({}, {}) is not in the open lens",
            x.x1, x.x2
        )));
    }
    let tau = exit_time(p, i, x)?;
    let (ref_x, ref_w) = gauss_legendre(cfg.nodes_per_panel(p));
    Ok(integrate_panels(0.0, tau, cfg.panel_len(p), &ref_x, &ref_w, |t| {
        one_switch_integrand(p, rho_other, i, x, t)
    }))
}

// ---------------------------------------------------------------------------
// Two-switch machinery
// ---------------------------------------------------------------------------

/// Closed form of the backward two-switch map: undo field 0 for time `t`,
/// then field 1 for time `s`, giving
/// `(1 - e^{alpha s} + e^{alpha(s+t)} x1, 1 - e^{beta s} + e^{beta(s+t)} x2)`.
pub fn forward_two_switch(
    p: &SwitchingParams,
    x: Point,
    s: f64,
    t: f64,
) -> Result<Point, SolverError> {
    if !(s >= 0.0) || !(t >= 0.0) {
        return Err(SolverError::Invalid("times must be nonnegative".into()));
    }
    if p.alpha * (s + t) > 700.0 {
        return Err(SolverError::Invalid("two-switch times overflow the flow".into()));
    }
    let (ea_s, ea_st) = ((p.alpha * s).exp(), (p.alpha * (s + t)).exp());
    let (eb_s, eb_st) = ((p.beta * s).exp(), (p.beta * (s + t)).exp());
    Ok(Point::new(
        1.0 - ea_s + ea_st * x.x1,
        1.0 - eb_s + eb_st * x.x2,
    ))
}

/// Jacobian determinant of [`forward_two_switch`] with respect to `(s, t)`:
/// `alpha beta e^{(alpha+beta)s} (x1 e^{alpha t} - x2 e^{beta t})`. Signed:
/// positive when the intermediate point is right of the diagonal.
pub fn two_switch_time_jacobian(p: &SwitchingParams, x: Point, s: f64, t: f64) -> f64 {
    p.alpha
        * p.beta
        * ((p.alpha + p.beta) * s).exp()
        * (x.x1 * (p.alpha * t).exp() - x.x2 * (p.beta * t).exp())
}

const NEWTON_RESIDUAL: f64 = 1e-10;

/// Damped Newton polish of the two-switch system in `(u, v) = (e^{alpha s},
/// e^{alpha(s+t)})`, projected onto `v >= u >= 1`. Returns `(s, t)`.
fn polish_two_switch(
    p: &SwitchingParams,
    x: Point,
    y: Point,
    u0: f64,
    v0: f64,
) -> Option<(f64, f64)> {
    let kappa = p.beta / p.alpha;
    let f = |u: f64, v: f64| {
        (
            1.0 - u + v * x.x1 - y.x1,
            1.0 - u.powf(kappa) + v.powf(kappa) * x.x2 - y.x2,
        )
    };
    let (mut u, mut v) = (u0.max(1.0), v0.max(u0.max(1.0)));
    let (mut f1, mut f2) = f(u, v);
    for _ in 0..60 {
        let norm = f1.abs().max(f2.abs());
        if norm < NEWTON_RESIDUAL * 1e-2 {
            break;
        }
        let j11 = -1.0;
        let j12 = x.x1;
        let j21 = -kappa * u.powf(kappa - 1.0);
        let j22 = kappa * v.powf(kappa - 1.0) * x.x2;
        let det = j11 * j22 - j12 * j21;
        if det.abs() < 1e-300 {
            return None;
        }
        let du = (f1 * j22 - f2 * j12) / det;
        let dv = (j11 * f2 - j21 * f1) / det;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let un = (u - step * du).max(1.0);
            let vn = (v - step * dv).max(un);
            let (g1, g2) = f(un, vn);
            if g1.abs().max(g2.abs()) < norm {
                u = un;
                v = vn;
                f1 = g1;
                f2 = g2;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if f1.abs().max(f2.abs()) > NEWTON_RESIDUAL {
        return None;
    }
    let s = u.ln() / p.alpha;
    let t = (v.ln() - u.ln()) / p.alpha;
    Some((s, t.max(0.0)))
}

/// Invert the backward two-switch map: find `(s, t)` with
/// `forward_two_switch(x, s, t) = y` and the intermediate point on the
/// requested side of the diagonal. Bracketing reduces to a scalar root in
/// `t` (the consistency of the two coordinate-wise switch times), bisection
/// localizes it, and a damped Newton in `(e^{alpha s}, e^{alpha(s+t)})`
/// polishes to residual 1e-10.
pub fn invert_two_switch(
    p: &SwitchingParams,
    x: Point,
    y: Point,
    branch: TwoSwitchBranch,
) -> Result<TwoSwitchTimes, SolverError> {
    for (v, name) in [(x.x1, "x1"), (x.x2, "x2")] {
        if !(v > 0.0 && v < 1.0) {
            return Err(SolverError::Invalid(format!(
                "{name} must lie strictly inside (0, 1)"
            )));
        }
    }
    if !(y.x1 < 1.0 && y.x2 < 1.0) {
        return Err(SolverError::NoSolution {
            branch,
            reason: "target has a coordinate at or beyond 1".into(),
        });
    }
    let gamma = p.gamma();
    let theta = (x.x2 / x.x1).ln() / (p.alpha - p.beta);
    let sat = (-x.x1.ln() / p.alpha).min(-x.x2.ln() / p.beta);
    let (lo, hi) = match branch {
        TwoSwitchBranch::Right => (theta.max(0.0), sat),
        TwoSwitchBranch::Left => (0.0, theta.min(sat)),
    };
    if !(hi > lo) {
        return Err(SolverError::NoSolution {
            branch,
            reason: "empty time window for this branch".into(),
        });
    }
    let g = |t: f64| {
        let z1 = x.x1 * (p.alpha * t).exp();
        let z2 = x.x2 * (p.beta * t).exp();
        (1.0 - y.x1) * (1.0 - z2).powf(gamma) - (1.0 - y.x2).powf(gamma) * (1.0 - z1)
    };
    const SCAN: usize = 128;
    let mut t_root = None;
    let mut prev_t = lo;
    let mut prev_g = g(lo);
    if prev_g == 0.0 {
        t_root = Some(lo);
    } else {
        for k in 1..=SCAN {
            let tk = lo + (hi - lo) * k as f64 / SCAN as f64;
            let gk = g(tk);
            if gk == 0.0 {
                t_root = Some(tk);
                break;
            }
            if prev_g * gk < 0.0 {
                let (mut a, mut b) = (prev_t, tk);
                let mut ga = prev_g;
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    let gm = g(mid);
                    if gm == 0.0 {
                        a = mid;
                        b = mid;
                        break;
                    }
                    if ga * gm < 0.0 {
                        b = mid;
                    } else {
                        a = mid;
                        ga = gm;
                    }
                }
                t_root = Some(0.5 * (a + b));
                break;
            }
            prev_t = tk;
            prev_g = gk;
        }
    }
    if t_root.is_none() {
        // Near the diagonal fold the consistency function is quadratically
        // flat, so a genuine root at a window edge can sit below the rounding
        // noise of its constituent terms and never produce a sign change.
        // Accept an endpoint whose value is at that noise floor; the Newton
        // polish and the branch-side check still vet the result.
        for te in [lo, hi] {
            let z1 = x.x1 * (p.alpha * te).exp();
            let z2 = x.x2 * (p.beta * te).exp();
            let magnitude = ((1.0 - y.x1) * (1.0 - z2).powf(gamma)).abs()
                + ((1.0 - y.x2).powf(gamma) * (1.0 - z1)).abs();
            if g(te).abs() <= 1e-12 * magnitude {
                t_root = Some(te);
                break;
            }
        }
    }
    let t0 = t_root.ok_or_else(|| SolverError::NoSolution {
        branch,
        reason: "no switch-time consistency root in the branch window".into(),
    })?;
    let z1 = x.x1 * (p.alpha * t0).exp();
    let s0 = ((1.0 - y.x1) / (1.0 - z1)).ln() / p.alpha;
    if s0 < -1e-9 {
        return Err(SolverError::NoSolution {
            branch,
            reason: "consistency root needs a negative second leg".into(),
        });
    }
    let u0 = (p.alpha * s0.max(0.0)).exp();
    let v0 = u0 * (p.alpha * t0).exp();
    let (s, t) = polish_two_switch(p, x, y, u0, v0).ok_or_else(|| SolverError::NoSolution {
        branch,
        reason: "Newton polish failed to reach the residual target".into(),
    })?;
    let z = Point::new(x.x1 * (p.alpha * t).exp(), x.x2 * (p.beta * t).exp());
    let side_ok = match branch {
        TwoSwitchBranch::Right => z.x1 - z.x2 >= -1e-12,
        TwoSwitchBranch::Left => z.x2 - z.x1 >= -1e-12,
    };
    if !side_ok {
        return Err(SolverError::NoSolution {
            branch,
            reason: "intermediate point landed on the wrong side of the diagonal".into(),
        });
    }
    Ok(TwoSwitchTimes { s, t, branch })
}

/// Two-switch transition kernel
/// `lambda0 lambda1 e^{-lambda1 s} e^{(alpha+beta-lambda0) t} / |det U(z)|`
/// at the intermediate point `z`. Near the diagonal the change of variables
/// degenerates and the evaluation is refused; integrate those contributions
/// in the time domain instead.
pub fn kernel_two_switch(
    p: &SwitchingParams,
    x: Point,
    y: Point,
    branch: TwoSwitchBranch,
    cfg: &SolverConfig,
) -> Result<f64, SolverError> {
    let times = invert_two_switch(p, x, y, branch)?;
    let z1 = x.x1 * (p.alpha * times.t).exp();
    let z2 = x.x2 * (p.beta * times.t).exp();
    let det_u = p.alpha * p.beta * (z1 - z2);
    if det_u.abs() <= cfg.diag_cutoff {
        return Err(SolverError::NearDiagonal {
            det: det_u,
            cutoff: cfg.diag_cutoff,
        });
    }
    Ok(p.lambda0 * p.lambda1 * (-p.lambda1 * times.s).exp()
        * ((p.alpha + p.beta - p.lambda0) * times.t).exp()
        / det_u.abs())
}

// ---------------------------------------------------------------------------
// Two-switch transfer operator
// ---------------------------------------------------------------------------

/// Truncate exponential tails where the switching weight drops below 1e-14.
const WEIGHT_CUTOFF_TIME: f64 = 32.3; // -ln(1e-14)

/// Apply the two-switch transfer operator to the regime-0 density layer of
/// `rho`, evaluating the time-domain double integral at every cell center of
/// the lens. The outer leg runs to the backward exit time under field 0, the
/// inner leg to the exit under field 1 from the intermediate point.
pub fn apply_q2(
    p: &SwitchingParams,
    rho: &GridField,
    cfg: &SolverConfig,
) -> Result<GridField, SolverError> {
    cfg.validate()?;
    if rho.kind != GridKind::Density {
        return Err(SolverError::Invalid("apply_q2 needs a density grid".into()));
    }
    if rho.bounds != [0.0, 1.0, 0.0, 1.0] {
        return Err(SolverError::Invalid("apply_q2 needs unit-square bounds".into()));
    }
    let (n1, n2) = (rho.n1, rho.n2);
    let mut out = GridField::new(GridKind::Density, n1, n2)?;
    let panel_len = cfg.panel_len(p);
    let (ref_x, ref_w) = gauss_legendre(cfg.nodes_per_panel(p));
    let rows: Vec<Vec<f64>> = (0..n1)
        .into_par_iter()
        .map(|i1| {
            let mut row = vec![0.0; n2];
            for (i2, slot) in row.iter_mut().enumerate() {
                let x = rho.cell_center(i1, i2);
                if !contains_interior(p, x) {
                    continue;
                }
                let tau0 = match exit_time(p, Regime::R0, x) {
                    Ok(t) => t,
                    Err(_) => continue,
                };
                let outer_hi = tau0.min(WEIGHT_CUTOFF_TIME / p.lambda0);
                *slot = integrate_panels(0.0, outer_hi, panel_len, &ref_x, &ref_w, |t2| {
                    let z = Point::new(
                        x.x1 * (p.alpha * t2).exp(),
                        x.x2 * (p.beta * t2).exp(),
                    );
                    if !contains_interior(p, z) {
                        return 0.0;
                    }
                    let tau1 = match exit_time(p, Regime::R1, z) {
                        Ok(t) => t,
                        Err(_) => return 0.0,
                    };
                    let inner_hi = tau1.min(WEIGHT_CUTOFF_TIME / p.lambda1);
                    let inner =
                        integrate_panels(0.0, inner_hi, panel_len, &ref_x, &ref_w, |t1| {
                            let w = Point::new(
                                1.0 - (1.0 - z.x1) * (p.alpha * t1).exp(),
                                1.0 - (1.0 - z.x2) * (p.beta * t1).exp(),
                            );
                            (-p.lambda1 * t1).exp()
                                * ((p.alpha + p.beta) * t1).exp()
                                * rho.sample(Regime::R0, w)
                        });
                    (-p.lambda0 * t2).exp() * ((p.alpha + p.beta) * t2).exp() * inner
                }) * p.lambda0
                    * p.lambda1;
            }
            row
        })
        .collect();
    for (i1, row) in rows.into_iter().enumerate() {
        out.values0[i1 * n2..(i1 + 1) * n2].copy_from_slice(&row);
    }
    Ok(out)
}

/// Power iteration of the two-switch transfer operator from the uniform
/// density on the lens, renormalized to the regime-0 mass each step; the
/// regime-1 layer is then filled by the one-switch equation. An independent
/// route to the invariant densities.
pub fn q2_fixed_point(
    p: &SwitchingParams,
    cfg: &SolverConfig,
) -> Result<(GridField, SolveReport), SolverError> {
    cfg.validate()?;
    let n = cfg.grid;
    let m0 = p.occupancy(Regime::R0);
    let mut field = GridField::new(GridKind::Density, n, n)?;
    for i1 in 0..n {
        for i2 in 0..n {
            if contains_interior(p, field.cell_center(i1, i2)) {
                field.values0[i1 * n + i2] = 1.0;
            }
        }
    }
    let mass = field.mass(Regime::R0);
    field.values0.iter_mut().for_each(|v| *v *= m0 / mass);
    let cell_area = field.cell_area();
    let mut residuals = Vec::new();
    for iter in 1..=cfg.max_iter {
        let mut next = apply_q2(p, &field, cfg)?;
        let mass = next.mass(Regime::R0);
        if !(mass > 0.0) {
            return Err(SolverError::Invalid(
                "transfer operator produced a massless iterate".into(),
            ));
        }
        let scale = m0 / mass;
        next.values0.iter_mut().for_each(|v| *v *= scale);
        let res: f64 = field
            .values0
            .iter()
            .zip(&next.values0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * cell_area;
        residuals.push(res);
        field = next;
        if res < cfg.tol {
            fill_regime1_density(p, &mut field, cfg)?;
            return Ok((
                field,
                SolveReport {
                    iterations: iter,
                    residuals,
                    converged: true,
                },
            ));
        }
    }
    Err(SolverError::NoConvergence {
        iterations: cfg.max_iter,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// Fill the regime-1 layer from the converged regime-0 layer via the
/// one-switch equation, then normalize it to the regime-1 mass.
fn fill_regime1_density(
    p: &SwitchingParams,
    field: &mut GridField,
    cfg: &SolverConfig,
) -> Result<(), SolverError> {
    let (n1, n2) = (field.n1, field.n2);
    let panel_len = cfg.panel_len(p);
    let (ref_x, ref_w) = gauss_legendre(cfg.nodes_per_panel(p));
    let snapshot = field.clone();
    let rows: Vec<Vec<f64>> = (0..n1)
        .into_par_iter()
        .map(|i1| {
            let mut row = vec![0.0; n2];
            for (i2, slot) in row.iter_mut().enumerate() {
                let x = snapshot.cell_center(i1, i2);
                if !contains_interior(p, x) {
                    continue;
                }
                let tau = match exit_time(p, Regime::R1, x) {
                    Ok(t) => t,
                    Err(_) => continue,
                };
                let hi = tau.min(WEIGHT_CUTOFF_TIME / p.lambda1);
                *slot = integrate_panels(0.0, hi, panel_len, &ref_x, &ref_w, |t| {
                    one_switch_integrand(p, &snapshot, Regime::R1, x, t)
                });
            }
            row
        })
        .collect();
    for (i1, row) in rows.into_iter().enumerate() {
        field.values1[i1 * n2..(i1 + 1) * n2].copy_from_slice(&row);
    }
    let m1 = p.occupancy(Regime::R1);
    let mass = field.mass(Regime::R1);
    if mass > 0.0 {
        let scale = m1 / mass;
        field.values1.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(())
}
