//! Acceptance suite: one test per shipping criterion.
//!
//! Each test prints exactly one `criterion N (...): PASS/FAIL` line (visible
//! under `--nocapture`; cargo also shows it when the test fails) and then
//! asserts. Tolerances, case counts, and runtime budgets are pinned in the
//! constants below; every stochastic check runs from a fixed seed, so the
//! whole suite is deterministic.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, ContinuousCDF};

use pdmplab::analysis::{
    beta_marginal_oracle, cells_meeting_interior, classify_regime, ks_distance,
    CornerScalingSink, CriticalFlag, DensityRegime, EpsGrid, RegimeReport, ScalingFit,
    StripScalingSink, Verdict, DEFAULT_T_ANCHOR,
};
use pdmplab::core::{det_transversality, flow_backward, flow_forward, symmetry_conjugate};
use pdmplab::geometry::{classify_point, sample_interior_point, RegionLabel};
use pdmplab::reduction::{
    conjugacy_residual, pde_mode_coefficient, pde_mode_rate, preset_gene_expression,
    preset_pde_modes, reduce,
};
use pdmplab::simulate::{
    coupled_contraction_run, default_burn_in, default_initial, stream_occupation, CdfSink,
    HistogramSink, MarginalSink, OccupationSink, DEFAULT_SAMPLES_PER_INTERVAL,
};
use pdmplab::solver::{
    cdf_fixed_point, forward_two_switch, invert_two_switch, kernel_two_switch, MonotoneCubic,
    SolverConfig, TwoSwitchBranch,
};
use pdmplab::{Point, Regime, SwitchingParams};

/// The reference parameter set used by the simulation-heavy criteria.
fn canonical() -> SwitchingParams {
    SwitchingParams::new(2.0, 1.0, 3.0, 2.0).unwrap()
}

fn params(a: f64, b: f64, l0: f64, l1: f64) -> SwitchingParams {
    SwitchingParams::new(a, b, l0, l1).unwrap()
}

/// Print the one-line verdict for a criterion and panic on failure.
fn finish(number: u32, name: &str, failures: Vec<String>, detail: String) {
    if failures.is_empty() {
        println!("criterion {number} ({name}): PASS — {detail}");
    } else {
        let msg = failures.join("; ");
        println!("criterion {number} ({name}): FAIL — {msg}");
        panic!("criterion {number} ({name}) failed: {msg}");
    }
}

/// Max coordinate difference between two points, relative to `1 + |b|`.
fn rel_dist(a: Point, b: Point) -> f64 {
    let scale = 1.0 + b.x1.abs().max(b.x2.abs());
    (a.x1 - b.x1).abs().max((a.x2 - b.x2).abs()) / scale
}

// ---------------------------------------------------------------------------
// 1. Closed-form flow identities
// ---------------------------------------------------------------------------

/// Semigroup composition, inversion, and the center-mirror conjugation of the
/// two flows hold to 1e-12 relative error on randomized parameters and
/// states. Inversion horizons are capped at `8 / alpha`: beyond that the
/// backward exponential amplifies one rounding ulp of the forward image past
/// the 1e-12 budget, for any evaluation scheme in double precision.
#[test]
fn c01_flow_identities_are_exact() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let alpha = rng.gen_range(0.2..5.0);
        let beta = alpha * rng.gen_range(0.1..0.95);
        let p = SwitchingParams::new(alpha, beta, 1.0, 1.0).unwrap();
        let regime = if rng.gen_bool(0.5) { Regime::R0 } else { Regime::R1 };
        let x = Point::new(rng.gen_range(-2.0..3.0), rng.gen_range(-2.0..3.0));
        let (s, t) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));

        let direct = flow_forward(&p, regime, s + t, x).unwrap();
        let step = flow_forward(&p, regime, s, x).unwrap();
        let chained = flow_forward(&p, regime, t, step).unwrap();
        worst = worst.max(rel_dist(chained, direct));

        let tb = rng.gen_range(0.0..8.0 / alpha);
        let y = flow_forward(&p, regime, tb, x).unwrap();
        let back = flow_backward(&p, regime, tb, y).unwrap();
        worst = worst.max(rel_dist(back, x));

        let mirrored = symmetry_conjugate(flow_forward(&p, Regime::R1, t, x).unwrap());
        let swapped = flow_forward(&p, Regime::R0, t, symmetry_conjugate(x)).unwrap();
        worst = worst.max(rel_dist(mirrored, swapped));
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut failures = Vec::new();
    if !(worst <= 1e-12) {
        failures.push(format!("max relative error {worst:.3e} exceeds 1e-12"));
    }
    if elapsed >= 5.0 {
        failures.push(format!("took {elapsed:.1} s, budget 5 s"));
    }
    finish(
        1,
        "flow identities",
        failures,
        format!("max relative error {worst:.3e} over 3x100000 checks in {elapsed:.2} s"),
    );
}

// ---------------------------------------------------------------------------
// 2. Support of the occupation measure
// ---------------------------------------------------------------------------

/// Streams every post-burn-in sample through a support check and a 32x32
/// histogram at once.
struct SupportProbe<'a> {
    p: &'a SwitchingParams,
    hist: HistogramSink,
    outside: u64,
    samples: u64,
}

impl OccupationSink for SupportProbe<'_> {
    fn record(&mut self, regime: Regime, pos: Point, weight: f64) {
        self.samples += 1;
        if classify_point(self.p, pos, 1e-9) == RegionLabel::Outside {
            self.outside += 1;
        }
        self.hist.record(regime, pos, weight);
    }
}

/// A 10^7-event run at (2, 1, 3, 2) never leaves the lens (tolerance 1e-9)
/// after burn-in, and puts positive mass in every 32x32 cell that meets the
/// open lens. Cells are flagged with a half-cell probe lattice (`probes = 2`),
/// whose documented semantics exclude slivers thinner than the probe spacing:
/// the invariant density vanishes along the boundary curves, so hairline
/// overlaps carry too little mass (a few expected hits at this run length)
/// for their coverage to be a property of the system rather than of the seed.
#[test]
fn c02_samples_fill_the_lens_and_never_leave_it() {
    let start = Instant::now();
    let p = canonical();
    let mut sink = SupportProbe {
        p: &p,
        hist: HistogramSink::new(32).unwrap(),
        outside: 0,
        samples: 0,
    };
    stream_occupation(
        &p,
        default_initial(),
        10_000_000,
        42,
        0,
        default_burn_in(&p),
        DEFAULT_SAMPLES_PER_INTERVAL,
        &mut sink,
    )
    .unwrap();
    let (outside, samples) = (sink.outside, sink.samples);
    let grid = sink.hist.finalize().unwrap();

    let meets = cells_meeting_interior(&p, 32, 2);
    let mut flagged = 0u32;
    let mut empty = 0u32;
    for (idx, &m) in meets.iter().enumerate() {
        if !m {
            continue;
        }
        flagged += 1;
        if !(grid.values0[idx] + grid.values1[idx] > 0.0) {
            empty += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut failures = Vec::new();
    if outside != 0 {
        failures.push(format!("{outside} of {samples} samples outside the lens"));
    }
    if empty != 0 {
        failures.push(format!("{empty} of {flagged} interior cells received no mass"));
    }
    if elapsed >= 60.0 {
        failures.push(format!("took {elapsed:.1} s, budget 60 s"));
    }
    finish(
        2,
        "support",
        failures,
        format!(
            "{samples} samples all inside, {flagged} interior cells all populated, {elapsed:.1} s"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Beta marginals of the regime-0 density
// ---------------------------------------------------------------------------

/// Counts regime-0 samples while forwarding everything to a marginal sink.
struct CountedMarginals {
    inner: MarginalSink,
    regime0_samples: u64,
}

impl OccupationSink for CountedMarginals {
    fn record(&mut self, regime: Regime, pos: Point, weight: f64) {
        if regime == Regime::R0 {
            self.regime0_samples += 1;
        }
        self.inner.record(regime, pos, weight);
    }
}

/// The regime-0 axis marginals follow Beta(lambda0/alpha, lambda1/alpha + 1)
/// and Beta(lambda0/beta, lambda1/beta + 1); both KS distances stay below
/// 0.005 with at least 10^6 regime-0 samples.
#[test]
fn c03_regime0_marginals_match_the_beta_laws() {
    let start = Instant::now();
    let p = canonical();
    let mut sink = CountedMarginals {
        inner: MarginalSink::new(1024).unwrap(),
        regime0_samples: 0,
    };
    stream_occupation(
        &p,
        default_initial(),
        4_000_000,
        3,
        0,
        default_burn_in(&p),
        DEFAULT_SAMPLES_PER_INTERVAL,
        &mut sink,
    )
    .unwrap();
    let n0 = sink.regime0_samples;
    let est = sink.inner.finalize().unwrap();
    let ks_x1 = ks_distance(&est.cdf[0][0], beta_marginal_oracle(&p, 0, Regime::R0));
    let ks_x2 = ks_distance(&est.cdf[0][1], beta_marginal_oracle(&p, 1, Regime::R0));
    let elapsed = start.elapsed().as_secs_f64();

    let mut failures = Vec::new();
    if n0 < 1_000_000 {
        failures.push(format!("only {n0} regime-0 samples, need 10^6"));
    }
    for (axis, ks) in [("x1", ks_x1), ("x2", ks_x2)] {
        if !(ks < 0.005) {
            failures.push(format!("{axis} KS distance {ks:.4} >= 0.005"));
        }
    }
    if elapsed >= 120.0 {
        failures.push(format!("took {elapsed:.1} s, budget 120 s"));
    }
    finish(
        3,
        "beta marginals",
        failures,
        format!("KS x1 {ks_x1:.2e}, x2 {ks_x2:.2e} from {n0} regime-0 samples in {elapsed:.1} s"),
    );
}

// ---------------------------------------------------------------------------
// 4. Regime occupancy
// ---------------------------------------------------------------------------

struct NullSink;

impl OccupationSink for NullSink {
    fn record(&mut self, _regime: Regime, _pos: Point, _weight: f64) {}
}

/// The long-run fraction of time spent in regime 0 sits within three standard
/// errors of lambda1 / (lambda0 + lambda1).
#[test]
fn c04_occupancy_matches_the_jump_chain_fraction() {
    let p = canonical();
    let summary = stream_occupation(
        &p,
        default_initial(),
        1_000_000,
        13,
        0,
        default_burn_in(&p),
        1,
        &mut NullSink,
    )
    .unwrap();
    let occ = summary.occupancy;
    let expected = p.lambda1 / (p.lambda0 + p.lambda1);
    let dev = (occ.fraction0 - expected).abs();

    let mut failures = Vec::new();
    if !(dev <= 3.0 * occ.stderr) {
        failures.push(format!(
            "fraction {:.6} vs {expected:.6} is {:.1} standard errors away",
            occ.fraction0,
            dev / occ.stderr
        ));
    }
    finish(
        4,
        "occupancy",
        failures,
        format!(
            "fraction {:.6} vs {expected:.6} ({:.2} standard errors, {} cycles)",
            occ.fraction0,
            dev / occ.stderr,
            occ.cycles
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Pathwise contraction of coupled runs
// ---------------------------------------------------------------------------

/// Two trajectories driven by the same switching noise contract at least as
/// fast as e^{-beta t}: the separation never exceeds the initial separation
/// times e^{-beta t}(1 + 1e-12), checked at every event of 10 coupled pairs.
/// The additive 1e-300 guard is inert at every physical scale; it only
/// absorbs gradual-underflow granularity once both sides decay into the
/// subnormal range (past ~700 time units the comparison is rounding to
/// multiples of 5e-324, where a relative allowance cannot be represented).
#[test]
fn c05_coupled_trajectories_contract_at_the_slow_rate() {
    let p = canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0u64;
    let mut violations = 0u64;
    let mut worst_excess = 0.0f64;
    for pair in 0..10u64 {
        let x = sample_interior_point(&p, &mut rng);
        let y = sample_interior_point(&p, &mut rng);
        let d0 = x.dist(&y);
        let records = coupled_contraction_run(&p, x, y, 10_000, 500 + pair).unwrap();
        for &(t, d) in &records {
            checked += 1;
            let bound = d0 * (-p.beta * t).exp() * (1.0 + 1e-12) + 1e-300;
            if d > bound {
                violations += 1;
                worst_excess = worst_excess.max(d - bound);
            }
        }
    }

    let mut failures = Vec::new();
    if violations != 0 {
        failures.push(format!(
            "{violations} of {checked} events exceed the bound (worst excess {worst_excess:.3e})"
        ));
    }
    finish(
        5,
        "contraction",
        failures,
        format!("{checked} events across 10 pairs all within the e^(-beta t) envelope"),
    );
}

// ---------------------------------------------------------------------------
// 6. Deterministic CDF solver vs simulation and the edge law
// ---------------------------------------------------------------------------

/// The 256-node CDF fixed point agrees with the empirical CDF of a 10^7-event
/// run to sup-error 5e-3, and its top edge G0(., 1) reproduces the incomplete
/// beta law within twice the grid's own interpolation error for that curve.
#[test]
fn c06_cdf_solver_matches_simulation_and_the_edge_law() {
    let start = Instant::now();
    let p = canonical();
    let cfg = SolverConfig::default(); // 256 nodes, tol 1e-6
    let (field, report) = cdf_fixed_point(&p, &cfg).unwrap();

    let n = cfg.grid;
    let mut sink = CdfSink::new(n).unwrap();
    stream_occupation(
        &p,
        default_initial(),
        10_000_000,
        6,
        0,
        default_burn_in(&p),
        DEFAULT_SAMPLES_PER_INTERVAL,
        &mut sink,
    )
    .unwrap();
    let empirical = sink.finalize().unwrap();

    let mut sup = 0.0f64;
    for idx in 0..n * n {
        sup = sup
            .max((field.values0[idx] - empirical.values0[idx]).abs())
            .max((field.values1[idx] - empirical.values1[idx]).abs());
    }

    // Top edge: G0(x, 1) is the regime-0 mass times the regularized
    // incomplete beta I_x(lambda0/alpha, lambda1/alpha + 1).
    let m0 = p.lambda1 / (p.lambda0 + p.lambda1);
    let edge_law = Beta::new(p.lambda0 / p.alpha, p.lambda1 / p.alpha + 1.0).unwrap();
    let oracle = |x: f64| m0 * edge_law.cdf(x);
    let h = 1.0 / (n - 1) as f64;
    let mut edge_err = 0.0f64;
    for i in 0..n {
        edge_err = edge_err.max((field.values0[i * n + (n - 1)] - oracle(i as f64 * h)).abs());
    }
    // The grid's representation error for the same curve: sample the oracle at
    // the nodes, rebuild it with the solver's interpolant, compare densely.
    let interp = MonotoneCubic::new((0..n).map(|i| oracle(i as f64 * h)).collect());
    let dense = 8 * (n - 1);
    let mut interp_err = 0.0f64;
    for j in 0..=dense {
        let x = j as f64 / dense as f64;
        interp_err = interp_err.max((interp.eval(x) - oracle(x)).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut failures = Vec::new();
    if !report.converged {
        failures.push(format!("solver did not converge in {} sweeps", report.iterations));
    }
    if !(sup < 5e-3) {
        failures.push(format!("sup CDF difference {sup:.3e} >= 5e-3"));
    }
    if !(edge_err <= 2.0 * interp_err) {
        failures.push(format!(
            "edge error {edge_err:.3e} exceeds twice the grid interpolation error {interp_err:.3e}"
        ));
    }
    if elapsed >= 600.0 {
        failures.push(format!("took {elapsed:.1} s, budget 600 s"));
    }
    finish(
        6,
        "solver cross-validation",
        failures,
        format!(
            "sup diff {sup:.2e}, edge error {edge_err:.2e} vs 2x interp {:.2e}, {} sweeps, {elapsed:.0} s",
            2.0 * interp_err,
            report.iterations
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Two-switch inversion, Jacobian, and kernel
// ---------------------------------------------------------------------------

/// Simpson weights for `n` (even) intervals on `[a, b]`.
fn simpson_weights(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 2 && n % 2 == 0);
    let h = (b - a) / n as f64;
    (0..=n)
        .map(|i| {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            (a + i as f64 * h, w * h / 3.0)
        })
        .collect()
}

/// Two routes to the probability that a two-switch excursion from `x` lands
/// in a small rectangle: integrate the kernel over the rectangle, and
/// integrate the switching-time density over the rectangle's preimage. The
/// preimage route inverts the map per coordinate in closed form (no shared
/// code with the kernel), reducing to a 1-D quadrature over the first
/// switching time.
fn patch_integrals(p: &SwitchingParams) -> (f64, f64) {
    let x = Point::new(0.35, 0.45);
    let (s_ref, t_ref) = (0.15, 0.35);
    let center = forward_two_switch(p, x, s_ref, t_ref).unwrap();
    let half = 0.005;
    let (a1, b1) = (center.x1 - half, center.x1 + half);
    let (a2, b2) = (center.x2 - half, center.x2 + half);

    // Route 1: Simpson^2 of the kernel over the rectangle.
    let cfg = SolverConfig::default();
    let mut i_kernel = 0.0;
    for &(y1, w1) in &simpson_weights(a1, b1, 32) {
        for &(y2, w2) in &simpson_weights(a2, b2, 32) {
            let k = kernel_two_switch(p, x, Point::new(y1, y2), TwoSwitchBranch::Right, &cfg)
                .unwrap();
            i_kernel += w1 * w2 * k;
        }
    }

    // Route 2: the preimage is swept per first-switch time s. Both image
    // coordinates are increasing in the second time t, so the admissible t's
    // form an interval with closed-form endpoints, and the t-integral of
    // e^{(alpha+beta-lambda0) t} is exact. Midpoint rule over s.
    let (s0, s1, t0, t1): (f64, f64, f64, f64) = (0.05, 0.25, 0.30, 0.41); // box containing the preimage
    let k0 = p.alpha + p.beta - p.lambda0;
    let k1 = p.alpha + p.beta - p.lambda1;
    let n_s = 200_000;
    let hs = (s1 - s0) / n_s as f64;
    let mut acc = 0.0;
    for i in 0..n_s {
        let s = s0 + (i as f64 + 0.5) * hs;
        let eas = (p.alpha * s).exp();
        let ebs = (p.beta * s).exp();
        // y1 = 1 - e^{alpha s} + e^{alpha (s+t)} x1 in [a1, b1] pins e^{alpha t}.
        let r1_lo = (a1 - 1.0 + eas) / (x.x1 * eas);
        let r1_hi = (b1 - 1.0 + eas) / (x.x1 * eas);
        let r2_lo = (a2 - 1.0 + ebs) / (x.x2 * ebs);
        let r2_hi = (b2 - 1.0 + ebs) / (x.x2 * ebs);
        if r1_hi <= 0.0 || r2_hi <= 0.0 {
            continue;
        }
        let t_lo = t0
            .max(if r1_lo <= 1.0 { 0.0 } else { r1_lo.ln() / p.alpha })
            .max(if r2_lo <= 1.0 { 0.0 } else { r2_lo.ln() / p.beta });
        let t_hi = t1.min(r1_hi.ln() / p.alpha).min(r2_hi.ln() / p.beta);
        if t_hi <= t_lo {
            continue;
        }
        let inner = if k0.abs() < 1e-13 {
            t_hi - t_lo
        } else {
            ((k0 * t_hi).exp() - (k0 * t_lo).exp()) / k0
        };
        acc += (k1 * s).exp() * inner;
    }
    let i_time = p.lambda0 * p.lambda1 * hs * acc;
    (i_kernel, i_time)
}

/// Round-trip inversion of the two-switch map to 1e-9 on 10^4 admissible
/// cases, the closed-form Jacobian determinant against central differences to
/// 1e-6 relative, and kernel/time-domain patch integrals within quadrature
/// tolerance. Cases keep the backward image off the diagonal (|z1 - z2| >=
/// 1e-3), where the inversion is well posed.
#[test]
fn c07_two_switch_inversion_jacobian_and_kernel_agree() {
    let p = canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut max_round_trip = 0.0f64;
    let mut max_jacobian_rel = 0.0f64;
    let mut done = 0u32;
    let fd_h = 1e-5;
    while done < 10_000 {
        let x = sample_interior_point(&p, &mut rng);
        let sat_t = (-x.x1.ln() / p.alpha).min(-x.x2.ln() / p.beta);
        let t = sat_t * rng.gen_range(0.02..0.98);
        let z1 = x.x1 * (p.alpha * t).exp();
        let z2 = x.x2 * (p.beta * t).exp();
        if (z1 - z2).abs() < 1e-3 || z1 >= 1.0 || z2 >= 1.0 {
            continue;
        }
        let sat_s = (-(1.0 - z1).ln() / p.alpha).min(-(1.0 - z2).ln() / p.beta);
        let s = sat_s * rng.gen_range(0.02..0.98);
        if s <= 2.0 * fd_h || t <= 2.0 * fd_h {
            continue;
        }
        let y = forward_two_switch(&p, x, s, t).unwrap();
        if !(y.x1 > 0.0 && y.x1 < 1.0 && y.x2 > 0.0 && y.x2 < 1.0) {
            continue;
        }

        let theta = (x.x2 / x.x1).ln() / (p.alpha - p.beta);
        let branch = if t >= theta {
            TwoSwitchBranch::Right
        } else {
            TwoSwitchBranch::Left
        };
        let times = invert_two_switch(&p, x, y, branch).unwrap();
        max_round_trip = max_round_trip
            .max((times.s - s).abs())
            .max((times.t - t).abs());

        // det d(y1, y2)/d(s, t) = e^{(alpha+beta) s} alpha beta (z1 - z2).
        let det_analytic = ((p.alpha + p.beta) * s).exp() * det_transversality(&p, Point::new(z1, z2));
        let f = |ss: f64, tt: f64| forward_two_switch(&p, x, ss, tt).unwrap();
        let (sp, sm) = (f(s + fd_h, t), f(s - fd_h, t));
        let (tp, tm) = (f(s, t + fd_h), f(s, t - fd_h));
        let d11 = (sp.x1 - sm.x1) / (2.0 * fd_h);
        let d21 = (sp.x2 - sm.x2) / (2.0 * fd_h);
        let d12 = (tp.x1 - tm.x1) / (2.0 * fd_h);
        let d22 = (tp.x2 - tm.x2) / (2.0 * fd_h);
        let det_fd = d11 * d22 - d12 * d21;
        max_jacobian_rel = max_jacobian_rel.max(((det_fd - det_analytic) / det_analytic).abs());
        done += 1;
    }

    let (i_kernel, i_time) = patch_integrals(&p);
    let patch_rel = ((i_kernel - i_time) / i_time).abs();

    let mut failures = Vec::new();
    if !(max_round_trip < 1e-9) {
        failures.push(format!("round-trip residual {max_round_trip:.3e} >= 1e-9"));
    }
    if !(max_jacobian_rel < 1e-6) {
        failures.push(format!(
            "Jacobian mismatch {max_jacobian_rel:.3e} >= 1e-6 relative"
        ));
    }
    if !(patch_rel <= 0.03) {
        failures.push(format!(
            "patch integrals differ by {patch_rel:.3e} relative (kernel {i_kernel:.6e}, time domain {i_time:.6e})"
        ));
    }
    finish(
        7,
        "two-switch machinery",
        failures,
        format!(
            "round-trip {max_round_trip:.1e}, Jacobian {max_jacobian_rel:.1e}, patch agreement {patch_rel:.1e} on 10000 cases"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Threshold classifier table
// ---------------------------------------------------------------------------

fn regime(
    origin: Verdict,
    left: Verdict,
    interior: Verdict,
    compacts: Verdict,
    conjectured: bool,
    flags: Vec<CriticalFlag>,
) -> DensityRegime {
    DensityRegime {
        origin_singular: origin,
        left_boundary_singular: left,
        bounded_interior: interior,
        bounded_on_gamma0_compacts: compacts,
        bounded_off_left_boundary: true,
        conjectured_bounded_left_boundary: conjectured,
        critical_flags: flags,
    }
}

/// The classifier reproduces the expected verdict table for the four
/// canonical parameter sets, including the open verdicts and threshold flags
/// where a rate sits exactly on a boundary.
#[test]
fn c08_threshold_classifier_matches_the_table() {
    use CriticalFlag::*;
    use Verdict::*;

    let table: Vec<((f64, f64, f64, f64), RegimeReport)> = vec![
        (
            (2.0, 1.0, 1.0, 2.0),
            RegimeReport {
                rho0: regime(Holds, Fails, Fails, Open, true, vec![]),
                rho1: regime(Holds, Open, Fails, Open, false, vec![Lambda1EqualsBeta]),
            },
        ),
        (
            (2.0, 1.0, 4.0, 2.0),
            RegimeReport {
                rho0: regime(Fails, Fails, Holds, Holds, false, vec![]),
                rho1: regime(Holds, Fails, Fails, Holds, false, vec![]),
            },
        ),
        (
            (2.0, 1.0, 2.0, 0.5),
            RegimeReport {
                rho0: regime(Holds, Holds, Fails, Fails, false, vec![]),
                rho1: regime(Holds, Fails, Fails, Fails, true, vec![]),
            },
        ),
        (
            (2.0, 1.0, 3.0, 1.0),
            RegimeReport {
                rho0: regime(
                    Open,
                    Open,
                    Open,
                    Open,
                    false,
                    vec![Lambda0EqualsAlphaPlusBeta, Lambda1EqualsBeta],
                ),
                rho1: regime(Holds, Fails, Fails, Open, true, vec![]),
            },
        ),
    ];

    let mut failures = Vec::new();
    for ((a, b, l0, l1), expected) in &table {
        let got = classify_regime(&params(*a, *b, *l0, *l1));
        if got != *expected {
            failures.push(format!(
                "({a}, {b}, {l0}, {l1}): got {got:?}, expected {expected:?}"
            ));
        }
    }
    finish(
        8,
        "regime classifier",
        failures,
        "all four canonical parameter sets match the verdict table".to_string(),
    );
}

// ---------------------------------------------------------------------------
// 9. Corner and boundary-strip mass exponents
// ---------------------------------------------------------------------------

fn corner_fit(p: &SwitchingParams, eps: &EpsGrid) -> ScalingFit {
    let mut master = CornerScalingSink::new(p, eps);
    for chain in 0..4 {
        let mut sink = CornerScalingSink::new(p, eps);
        stream_occupation(
            p,
            default_initial(),
            25_000_000,
            42,
            chain,
            default_burn_in(p),
            DEFAULT_SAMPLES_PER_INTERVAL,
            &mut sink,
        )
        .unwrap();
        master.merge(&sink);
    }
    master.finalize().unwrap()
}

fn strip_fit(p: &SwitchingParams, eps: &EpsGrid) -> ScalingFit {
    let mut master = StripScalingSink::new(p, DEFAULT_T_ANCHOR, eps);
    for chain in 0..4 {
        let mut sink = StripScalingSink::new(p, DEFAULT_T_ANCHOR, eps);
        stream_occupation(
            p,
            default_initial(),
            25_000_000,
            42,
            chain,
            default_burn_in(p),
            DEFAULT_SAMPLES_PER_INTERVAL,
            &mut sink,
        )
        .unwrap();
        master.merge(&sink);
    }
    master.finalize().unwrap()
}

/// Log-log slopes of the corner-box and boundary-strip masses, each estimated
/// from 10^8 events (four independent chains), against the expected exponent
/// table: corner 1.0 +- 0.15 at (2,1,1,2) and 3.0 +- 0.2 at (2,1,4,2); strip
/// 2.5 +- 0.2 at (2,1,2,0.5) and 3.0 +- 0.2 at (2,1,4,2).
///
/// Note on the two (2,1,4,2) rows: the corner box [0, eps^alpha] x
/// [0, eps^beta] contains every lens point with x1 <= eps^alpha, so its
/// regime-0 mass equals the x1-marginal CDF at eps^alpha. With the marginal's
/// beta law, that mass scales as eps^lambda0 at every parameter set, and the
/// measured slope at (2,1,4,2) tracks lambda0 = 4 rather than the tabulated
/// alpha + beta = 3; the strip mass behaves analogously (alpha + lambda1 = 4).
/// The table is asserted as stated, so those two rows are expected to fail
/// until the table itself is revisited.
#[test]
fn c09_corner_and_strip_scaling_exponents() {
    let start = Instant::now();
    let eps = EpsGrid::default();

    let rows: Vec<(&str, ScalingFit, f64, f64)> = vec![
        (
            "corner (2,1,1,2)",
            corner_fit(&params(2.0, 1.0, 1.0, 2.0), &eps),
            1.0,
            0.15,
        ),
        (
            "corner (2,1,4,2)",
            corner_fit(&params(2.0, 1.0, 4.0, 2.0), &eps),
            3.0,
            0.2,
        ),
        (
            "strip (2,1,2,0.5)",
            strip_fit(&params(2.0, 1.0, 2.0, 0.5), &eps),
            2.5,
            0.2,
        ),
        (
            "strip (2,1,4,2)",
            strip_fit(&params(2.0, 1.0, 4.0, 2.0), &eps),
            3.0,
            0.2,
        ),
    ];
    let elapsed = start.elapsed().as_secs_f64();

    let mut failures = Vec::new();
    let mut details = Vec::new();
    for (name, fit, target, tol) in &rows {
        let line = format!(
            "{name}: slope {:.4} +- {:.4} vs {target} +- {tol}",
            fit.slope, fit.slope_stderr
        );
        if !((fit.slope - target).abs() <= *tol) {
            failures.push(line.clone());
        }
        details.push(line);
    }
    if elapsed >= 1800.0 {
        failures.push(format!("took {elapsed:.0} s, budget 1800 s"));
    }
    finish(
        9,
        "mass-scaling exponents",
        failures,
        format!("{} ({elapsed:.0} s)", details.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 10. Reduction presets
// ---------------------------------------------------------------------------

/// Both presets reduce to the normalized system with conjugacy residual below
/// 1e-9 on 10^3 random (t, regime, state) draws, and the two-mode preset's
/// first mode carries rate pi^2 and forcing coefficient sqrt(2)/pi exactly.
#[test]
fn c10_reduction_presets_conjugate_exactly() {
    use std::f64::consts::{PI, SQRT_2};

    let sys_gene = preset_gene_expression(2.0, 2.0, 1.5, 1.0, 1.0, 3.0, 1.0, 1.5).unwrap();
    let conj_gene = reduce(&sys_gene).unwrap();
    let r_gene = conjugacy_residual(&sys_gene, &conj_gene, 1000, 10);

    let sys_pde = preset_pde_modes(1, 2, 1.0, 2.0).unwrap();
    let conj_pde = reduce(&sys_pde).unwrap();
    let r_pde = conjugacy_residual(&sys_pde, &conj_pde, 1000, 11);

    let rate_exact = pde_mode_rate(1) == PI * PI;
    let coeff_exact = pde_mode_coefficient(1) == SQRT_2 / PI;
    let wired = sys_pde.a == [-(PI * PI), 0.0, 0.0, -pde_mode_rate(2)]
        && sys_pde.b1[0] == pde_mode_rate(1) * pde_mode_coefficient(1);

    let mut failures = Vec::new();
    if !(r_gene < 1e-9) {
        failures.push(format!("gene-expression conjugacy residual {r_gene:.3e} >= 1e-9"));
    }
    if !(r_pde < 1e-9) {
        failures.push(format!("mode-truncation conjugacy residual {r_pde:.3e} >= 1e-9"));
    }
    if !rate_exact {
        failures.push("mode-1 rate is not exactly pi^2".to_string());
    }
    if !coeff_exact {
        failures.push("mode-1 coefficient is not exactly sqrt(2)/pi".to_string());
    }
    if !wired {
        failures.push("preset drift/forcing are not wired from the exact mode formulas".to_string());
    }
    finish(
        10,
        "reduction presets",
        failures,
        format!("residuals {r_gene:.1e} and {r_pde:.1e}; mode-1 constants exact"),
    );
}
