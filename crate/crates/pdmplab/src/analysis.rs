//! Diagnostics: boundedness/singularity classification of the invariant
//! densities from the rate thresholds, scaling-exponent estimation for the
//! corner and boundary-strip masses, distributional oracles for the
//! marginals, and the coupling contraction check.

use crate::core::{Point, Regime, SwitchingParams};
use crate::geometry::contains_interior;
use crate::grid::{GridField, GridKind, MarginalCdf};
use crate::simulate::{
    coupled_contraction_run, sample_from_log, EventLog, OccupationSink, SimError,
};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("only {usable} usable scales (need at least 3); increase the run length")]
    InsufficientScales { usable: usize },
    #[error("contraction bound violated at t = {t}: ratio {ratio} > bound {bound}")]
    ContractionViolation { t: f64, ratio: f64, bound: f64 },
    #[error("invalid diagnostic input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Three-valued outcome of a strict-inequality test: at (numerical) equality
/// the theorems are silent, so the verdict stays open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
    Open,
}

impl Verdict {
    fn and(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Fails, _) | (_, Fails) => Fails,
            (Open, _) | (_, Open) => Open,
            _ => Holds,
        }
    }
}

/// Exact-threshold markers: the parameter sits on a theorem boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalFlag {
    Lambda0EqualsAlphaPlusBeta,
    Lambda1EqualsBeta,
}

/// Relative tolerance for detecting a threshold equality.
pub const THRESHOLD_EQ_REL_TOL: f64 = 1e-12;

fn near_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= THRESHOLD_EQ_REL_TOL * a.abs().max(b.abs())
}

/// Verdict of the strict inequality `a < b`.
fn verdict_lt(a: f64, b: f64) -> Verdict {
    if near_equal(a, b) {
        Verdict::Open
    } else if a < b {
        Verdict::Holds
    } else {
        Verdict::Fails
    }
}

/// Boundedness/singularity report for one invariant density.
///
/// Field names are written for the regime-0 density (corner `(0,0)`, left
/// boundary curve). The regime-1 report uses the same struct read through the
/// center-mirror: its "origin" is `(1,1)` and its "left boundary" is the
/// right curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityRegime {
    /// Unbounded in every neighborhood of the corner: `lambda0 < alpha + beta`.
    pub origin_singular: Verdict,
    /// Unbounded along the whole boundary curve: `lambda1 < beta`.
    pub left_boundary_singular: Verdict,
    /// Bounded everywhere: `lambda0 > alpha + beta` and `lambda1 > beta`.
    pub bounded_interior: Verdict,
    /// Bounded on compact subsets of the open boundary curve:
    /// `lambda0 > beta` and `lambda1 > beta`.
    pub bounded_on_gamma0_compacts: Verdict,
    /// Bounded away from the closed left boundary curve: always true.
    pub bounded_off_left_boundary: bool,
    /// The open conjecture's hypothesis: `lambda0 <= beta` and `lambda1 > beta`.
    pub conjectured_bounded_left_boundary: bool,
    /// Which theorem thresholds the parameters sit exactly on.
    pub critical_flags: Vec<CriticalFlag>,
}

/// Reports for both invariant densities. `rho1` is the `rho0` report of the
/// swapped rates, read under the mirror symmetry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeReport {
    pub rho0: DensityRegime,
    pub rho1: DensityRegime,
}

fn density_regime(p: &SwitchingParams) -> DensityRegime {
    let threshold = p.alpha + p.beta;
    let origin_singular = verdict_lt(p.lambda0, threshold);
    let left_boundary_singular = verdict_lt(p.lambda1, p.beta);
    let bounded_interior =
        verdict_lt(threshold, p.lambda0).and(verdict_lt(p.beta, p.lambda1));
    let bounded_on_gamma0_compacts =
        verdict_lt(p.beta, p.lambda0).and(verdict_lt(p.beta, p.lambda1));
    let mut critical_flags = Vec::new();
    if near_equal(p.lambda0, threshold) {
        critical_flags.push(CriticalFlag::Lambda0EqualsAlphaPlusBeta);
    }
    if near_equal(p.lambda1, p.beta) {
        critical_flags.push(CriticalFlag::Lambda1EqualsBeta);
    }
    let conjectured = (p.lambda0 < p.beta || near_equal(p.lambda0, p.beta))
        && verdict_lt(p.beta, p.lambda1) == Verdict::Holds;
    DensityRegime {
        origin_singular,
        left_boundary_singular,
        bounded_interior,
        bounded_on_gamma0_compacts,
        bounded_off_left_boundary: true,
        conjectured_bounded_left_boundary: conjectured,
        critical_flags,
    }
}

/// Pure threshold evaluation of the boundedness/singularity theorems, with
/// open verdicts at exact threshold equalities.
pub fn classify_regime(p: &SwitchingParams) -> RegimeReport {
    RegimeReport {
        rho0: density_regime(p),
        rho1: density_regime(&p.swapped()),
    }
}

/// Geometric ladder of diagnostic scales, largest first.
#[derive(Debug, Clone, Serialize)]
pub struct EpsGrid {
    pub epsilons: Vec<f64>,
}

impl Default for EpsGrid {
    /// 8 scales from 0.3 down by halving.
    fn default() -> Self {
        EpsGrid {
            epsilons: (0..8).map(|k| 0.3 * 0.5f64.powi(k)).collect(),
        }
    }
}

impl EpsGrid {
    pub fn new(epsilons: Vec<f64>) -> Result<Self, AnalysisError> {
        if epsilons.len() < 4 {
            return Err(AnalysisError::Invalid(
                "need at least 4 scales before count-based dropping".into(),
            ));
        }
        for w in epsilons.windows(2) {
            if !(w[1] < w[0]) {
                return Err(AnalysisError::Invalid(
                    "scales must be strictly decreasing".into(),
                ));
            }
        }
        if !epsilons.iter().all(|e| e.is_finite() && *e > 0.0 && *e < 1.0) {
            return Err(AnalysisError::Invalid("scales must lie in (0, 1)".into()));
        }
        Ok(EpsGrid { epsilons })
    }
}

/// Minimum samples per scale for it to enter the regression.
pub const MIN_COUNT_PER_SCALE: u64 = 100;

/// Log-log regression of estimated masses against scales.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingFit {
    /// Scales that entered the fit, largest first.
    pub epsilons: Vec<f64>,
    /// Estimated mass at each retained scale.
    pub masses: Vec<f64>,
    /// Raw sample counts behind each retained mass.
    pub counts: Vec<u64>,
    pub slope: f64,
    pub slope_stderr: f64,
    /// Scales dropped for insufficient counts, with the counts they had.
    pub dropped: Vec<(f64, u64)>,
}

/// OLS fit of `ln mass` on `ln eps`, dropping scales with fewer than
/// `min_count` samples (or zero mass). Needs at least 3 surviving scales.
pub fn fit_scaling(
    epsilons: &[f64],
    masses: &[f64],
    counts: &[u64],
    min_count: u64,
) -> Result<ScalingFit, AnalysisError> {
    assert_eq!(epsilons.len(), masses.len());
    assert_eq!(epsilons.len(), counts.len());
    let mut keep_e = Vec::new();
    let mut keep_m = Vec::new();
    let mut keep_c = Vec::new();
    let mut dropped = Vec::new();
    for ((&e, &m), &c) in epsilons.iter().zip(masses).zip(counts) {
        if c >= min_count && m > 0.0 {
            keep_e.push(e);
            keep_m.push(m);
            keep_c.push(c);
        } else {
            dropped.push((e, c));
        }
    }
    let n = keep_e.len();
    if n < 3 {
        return Err(AnalysisError::InsufficientScales { usable: n });
    }
    let xs: Vec<f64> = keep_e.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = keep_m.iter().map(|m| m.ln()).collect();
    let nf = n as f64;
    let x_bar = xs.iter().sum::<f64>() / nf;
    let y_bar = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - x_bar) * (x - x_bar)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_bar) * (y - y_bar)).sum();
    let slope = sxy / sxx;
    let intercept = y_bar - slope * x_bar;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let slope_stderr = if n > 2 {
        (ss_res / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(ScalingFit {
        epsilons: keep_e,
        masses: keep_m,
        counts: keep_c,
        slope,
        slope_stderr,
        dropped,
    })
}

/// Streaming accumulator for the corner-box masses `G0(eps^alpha, eps^beta)`
/// over a ladder of scales. The boxes are nested, so a sample is tested from
/// the largest scale down and the loop exits at the first miss.
pub struct CornerScalingSink {
    epsilons: Vec<f64>,
    thresholds: Vec<(f64, f64)>,
    mass: Vec<f64>,
    count: Vec<u64>,
    total_weight: f64,
}

impl CornerScalingSink {
    pub fn new(p: &SwitchingParams, eps: &EpsGrid) -> Self {
        let thresholds = eps
            .epsilons
            .iter()
            .map(|e| (e.powf(p.alpha), e.powf(p.beta)))
            .collect();
        CornerScalingSink {
            epsilons: eps.epsilons.clone(),
            thresholds,
            mass: vec![0.0; eps.epsilons.len()],
            count: vec![0; eps.epsilons.len()],
            total_weight: 0.0,
        }
    }

    pub fn merge(&mut self, other: &CornerScalingSink) {
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        self.total_weight += other.total_weight;
    }

    pub fn finalize(self) -> Result<ScalingFit, AnalysisError> {
        if !(self.total_weight > 0.0) {
            return Err(AnalysisError::Invalid("no samples reached the sink".into()));
        }
        let masses: Vec<f64> = self.mass.iter().map(|m| m / self.total_weight).collect();
        fit_scaling(&self.epsilons, &masses, &self.count, MIN_COUNT_PER_SCALE)
    }
}

impl OccupationSink for CornerScalingSink {
    fn record(&mut self, regime: Regime, pos: Point, weight: f64) {
        self.total_weight += weight;
        if regime != Regime::R0 {
            return;
        }
        for (k, &(t1, t2)) in self.thresholds.iter().enumerate() {
            if pos.x1 <= t1 && pos.x2 <= t2 {
                self.mass[k] += weight;
                self.count[k] += 1;
            } else {
                break;
            }
        }
    }
}

/// Corner-box scaling from an event log.
pub fn corner_mass_scaling(
    p: &SwitchingParams,
    log: &EventLog,
    eps: &EpsGrid,
    burn_in: f64,
    k: usize,
) -> Result<ScalingFit, AnalysisError> {
    let mut sink = CornerScalingSink::new(p, eps);
    sample_from_log(log, burn_in, k, &mut sink)?;
    sink.finalize()
}

/// Corner-box scaling read off a solved CDF grid: masses are direct
/// evaluations of `G0`, and a scale is usable once the box edge exceeds one
/// grid cell (interpolation below that is meaningless).
pub fn corner_mass_scaling_cdf(
    p: &SwitchingParams,
    cdf: &GridField,
    eps: &EpsGrid,
) -> Result<ScalingFit, AnalysisError> {
    if cdf.kind != GridKind::Cdf {
        return Err(AnalysisError::Invalid("corner scaling needs a cdf grid".into()));
    }
    let cell = cdf.width1() / (cdf.n1 - 1) as f64;
    let mut masses = Vec::new();
    let mut counts = Vec::new();
    for e in &eps.epsilons {
        let q = Point::new(e.powf(p.alpha), e.powf(p.beta));
        masses.push(cdf.sample(Regime::R0, q));
        // Stand-in "count": resolvable scales count as always-usable.
        counts.push(if q.x1 >= cell { MIN_COUNT_PER_SCALE } else { 0 });
    }
    fit_scaling(&eps.epsilons, &masses, &counts, MIN_COUNT_PER_SCALE)
}

/// Membership in the boundary strip `R_eps(t1, t2)`: the region swept between
/// the left boundary curve and its inward shrink by `1 - eps^beta`, cut to
/// curve times `(t1, t2)`. In coordinates: `x1 in (e^{-alpha t2}, e^{-alpha t1})`
/// and `x2 / x1^{beta/alpha} in (1 - eps^beta, 1)`.
pub fn strip_member(p: &SwitchingParams, eps: f64, t1: f64, t2: f64, pos: Point) -> bool {
    let x1_hi = (-p.alpha * t1).exp();
    let x1_lo = (-p.alpha * t2).exp();
    if !(pos.x1 > x1_lo && pos.x1 < x1_hi) {
        return false;
    }
    let ratio = pos.x2 / pos.x1.powf(p.beta / p.alpha);
    ratio > 1.0 - eps.powf(p.beta) && ratio < 1.0
}

/// Streaming accumulator for the strip masses `mu_0(R_eps(t, t + eps^alpha))`
/// anchored at curve time `t`. Strips are nested across the scale ladder.
pub struct StripScalingSink {
    beta_over_alpha: f64,
    epsilons: Vec<f64>,
    /// Per scale: (x1 lower, x1 upper, ratio lower).
    windows: Vec<(f64, f64, f64)>,
    mass: Vec<f64>,
    count: Vec<u64>,
    total_weight: f64,
}

impl StripScalingSink {
    pub fn new(p: &SwitchingParams, t_anchor: f64, eps: &EpsGrid) -> Self {
        let windows = eps
            .epsilons
            .iter()
            .map(|e| {
                let x1_hi = (-p.alpha * t_anchor).exp();
                let x1_lo = (-p.alpha * (t_anchor + e.powf(p.alpha))).exp();
                (x1_lo, x1_hi, 1.0 - e.powf(p.beta))
            })
            .collect();
        StripScalingSink {
            beta_over_alpha: p.beta / p.alpha,
            epsilons: eps.epsilons.clone(),
            windows,
            mass: vec![0.0; eps.epsilons.len()],
            count: vec![0; eps.epsilons.len()],
            total_weight: 0.0,
        }
    }

    pub fn merge(&mut self, other: &StripScalingSink) {
        for (a, b) in self.mass.iter_mut().zip(&other.mass) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        self.total_weight += other.total_weight;
    }

    pub fn finalize(self) -> Result<ScalingFit, AnalysisError> {
        if !(self.total_weight > 0.0) {
            return Err(AnalysisError::Invalid("no samples reached the sink".into()));
        }
        let masses: Vec<f64> = self.mass.iter().map(|m| m / self.total_weight).collect();
        fit_scaling(&self.epsilons, &masses, &self.count, MIN_COUNT_PER_SCALE)
    }
}

impl OccupationSink for StripScalingSink {
    fn record(&mut self, regime: Regime, pos: Point, weight: f64) {
        self.total_weight += weight;
        if regime != Regime::R0 {
            return;
        }
        // All scales share the same x1 upper limit; compute the power only
        // when the coarsest window admits the sample.
        let (lo0, hi0, _) = self.windows[0];
        if !(pos.x1 > lo0 && pos.x1 < hi0) {
            return;
        }
        let ratio = pos.x2 / pos.x1.powf(self.beta_over_alpha);
        if !(ratio < 1.0) {
            return;
        }
        for (k, &(lo, _hi, r_lo)) in self.windows.iter().enumerate() {
            if pos.x1 > lo && ratio > r_lo {
                self.mass[k] += weight;
                self.count[k] += 1;
            } else {
                break;
            }
        }
    }
}

/// Strip-mass scaling from an event log.
pub fn boundary_strip_scaling(
    p: &SwitchingParams,
    log: &EventLog,
    t_anchor: f64,
    eps: &EpsGrid,
    burn_in: f64,
    k: usize,
) -> Result<ScalingFit, AnalysisError> {
    if !(t_anchor > 0.0) {
        return Err(AnalysisError::Invalid("t_anchor must be positive".into()));
    }
    let mut sink = StripScalingSink::new(p, t_anchor, eps);
    sample_from_log(log, burn_in, k, &mut sink)?;
    sink.finalize()
}

/// Default anchor time for the strip diagnostic: away from both corners.
pub const DEFAULT_T_ANCHOR: f64 = 0.5;

/// Quasi-Monte-Carlo estimate of the Lebesgue area of `R_eps(t, t + eps^alpha)`
/// by a Kronecker lattice over its bounding box.
pub fn strip_area_qmc(
    p: &SwitchingParams,
    t_anchor: f64,
    eps: f64,
    n_points: usize,
) -> f64 {
    let t2 = t_anchor + eps.powf(p.alpha);
    let x1_hi = (-p.alpha * t_anchor).exp();
    let x1_lo = (-p.alpha * t2).exp();
    // x2 ranges over (ratio window) * x1^{beta/alpha}.
    let x2_hi = x1_hi.powf(p.beta / p.alpha);
    let x2_lo = (1.0 - eps.powf(p.beta)) * x1_lo.powf(p.beta / p.alpha);
    let (a1, a2) = (0.7548776662466927f64, 0.5698402909980532f64); // plastic-number lattice
    let mut hits = 0usize;
    for k in 0..n_points {
        let u = (k as f64 * a1).fract();
        let v = (k as f64 * a2).fract();
        let pos = Point::new(
            x1_lo + u * (x1_hi - x1_lo),
            x2_lo + v * (x2_hi - x2_lo),
        );
        if strip_member(p, eps, t_anchor, t2, pos) {
            hits += 1;
        }
    }
    (x1_hi - x1_lo) * (x2_hi - x2_lo) * hits as f64 / n_points as f64
}

/// The exact marginal CDF of one coordinate under one regime: an incomplete
/// beta function. Regime 0: `x1 ~ Beta(lambda0/alpha, lambda1/alpha + 1)` and
/// `x2 ~ Beta(lambda0/beta, lambda1/beta + 1)`; regime 1 by reflecting the
/// swapped-rate law through `x -> 1 - x`.
pub fn beta_marginal_oracle(
    p: &SwitchingParams,
    axis: usize,
    regime: Regime,
) -> impl Fn(f64) -> f64 {
    assert!(axis < 2, "axis must be 0 or 1");
    let rate = if axis == 0 { p.alpha } else { p.beta };
    let q = match regime {
        Regime::R0 => *p,
        Regime::R1 => p.swapped(),
    };
    let a = q.lambda0 / rate;
    let b = q.lambda1 / rate + 1.0;
    let reflected = regime == Regime::R1;
    move |x: f64| {
        let x = x.clamp(0.0, 1.0);
        if reflected {
            1.0 - beta_reg_checked(a, b, 1.0 - x)
        } else {
            beta_reg_checked(a, b, x)
        }
    }
}

fn beta_reg_checked(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        statrs::function::beta::beta_reg(a, b, x)
    }
}

/// Number of evaluation points of [`ks_distance`].
pub const KS_GRID: usize = 1000;

/// Sup-norm distance between a sampled marginal CDF and a reference CDF,
/// evaluated on a uniform 1000-point grid over `[0, 1]`.
pub fn ks_distance(sample: &MarginalCdf, oracle: impl Fn(f64) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..=KS_GRID {
        let x = j as f64 / KS_GRID as f64;
        worst = worst.max((sample.eval(x) - oracle(x)).abs());
    }
    worst
}

/// One row of the contraction table.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayRecord {
    pub t: f64,
    pub ratio: f64,
    pub bound: f64,
}

/// Multiplicative slack allowed over the exact bound `e^{-beta t}`.
pub const CONTRACTION_SLACK: f64 = 1e-9;

/// Couple each pair through a shared switching stream up to time `horizon`
/// and verify the separation ratio never exceeds `e^{-beta t}` (up to
/// rounding slack). Returns the full table; errors on the first violation.
pub fn wasserstein_decay_check(
    p: &SwitchingParams,
    pairs: &[(Point, Point)],
    horizon: f64,
    seed: u64,
) -> Result<Vec<DecayRecord>, AnalysisError> {
    if !(horizon > 0.0) {
        return Err(AnalysisError::Invalid("horizon must be positive".into()));
    }
    let mut table = Vec::new();
    for (k, &(x, y)) in pairs.iter().enumerate() {
        // Mean switch rate bounds expected events on [0, horizon]; pad it.
        let mean_rate = 2.0 * p.lambda0 * p.lambda1 / (p.lambda0 + p.lambda1);
        let n_events = ((horizon * mean_rate * 1.5) as u64 + 64).min(50_000_000);
        let recs = coupled_contraction_run(p, x, y, n_events, seed.wrapping_add(k as u64))?;
        let d0 = x.dist(&y);
        for &(t, d) in &recs {
            if t > horizon {
                break;
            }
            let ratio = if d0 > 0.0 {
                d / d0
            } else if t == 0.0 {
                1.0
            } else {
                0.0
            };
            let bound = (-p.beta * t).exp();
            if ratio > bound * (1.0 + CONTRACTION_SLACK) {
                return Err(AnalysisError::ContractionViolation { t, ratio, bound });
            }
            table.push(DecayRecord { t, ratio, bound });
        }
    }
    Ok(table)
}

/// Which cells of an `n x n` grid over the unit square meet the open lens.
/// Each cell is probed on a `probes x probes` interior lattice; slivers
/// thinner than the probe spacing are treated as not meeting it.
pub fn cells_meeting_interior(p: &SwitchingParams, n: usize, probes: usize) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for i1 in 0..n {
        for i2 in 0..n {
            let mut hit = false;
            'probe: for a in 0..probes {
                for b in 0..probes {
                    let x = Point::new(
                        (i1 as f64 + (a as f64 + 0.5) / probes as f64) / n as f64,
                        (i2 as f64 + (b as f64 + 0.5) / probes as f64) / n as f64,
                    );
                    if contains_interior(p, x) {
                        hit = true;
                        break 'probe;
                    }
                }
            }
            out[i1 * n + i2] = hit;
        }
    }
    out
}
