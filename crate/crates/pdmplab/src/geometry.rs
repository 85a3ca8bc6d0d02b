//! Support geometry of the invariant measure: the lens-shaped region between
//! two power curves, point classification, alignment and exit times of the
//! backward flows, and the explicit two-switch path connecting any two
//! interior points.

use crate::core::{flow_cumulative, flow_forward, CoreError, Point, Regime, SwitchingParams};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point ({0}, {1}) must lie in the open lens interior")]
    NotInterior(f64, f64),
    #[error("curve parameter must be nonnegative, got {0}")]
    NegativeCurveTime(f64),
    #[error("alignment time undefined at the sink of the active field")]
    AtSink,
    #[error("root bracketing failed: {0}")]
    BracketFailure(String),
    #[error("two-switch replay missed the target by {residual:e} (tolerance {tol:e})")]
    ReplayMismatch { residual: f64, tol: f64 },
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Classification of a point relative to the lens, with a tolerance band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLabel {
    Outside,
    CornerOrigin,
    CornerOnes,
    /// Within the tolerance band of the left boundary curve `x1 = x2^gamma`.
    BoundaryLeft,
    /// Within the tolerance band of the right boundary curve `x1 = 1 - (1-x2)^gamma`.
    BoundaryRight,
    /// Interior, strictly above the diagonal (`x1 < x2`).
    InteriorLeft,
    /// Interior, strictly below the diagonal (`x1 > x2`).
    InteriorRight,
    /// Interior, within the tolerance band of the diagonal.
    Diagonal,
}

/// Which boundary curve of the lens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySide {
    Left,
    Right,
}

/// Default tolerance for [`classify_point`].
pub const DEFAULT_CLASSIFY_TOL: f64 = 1e-9;

/// `x1` of the left boundary curve at height `x2 in [0, 1]`: `x2^gamma`.
pub fn left_edge_x1(p: &SwitchingParams, x2: f64) -> f64 {
    x2.powf(p.gamma())
}

/// `x1` of the right boundary curve at height `x2 in [0, 1]`: `1 - (1-x2)^gamma`.
pub fn right_edge_x1(p: &SwitchingParams, x2: f64) -> f64 {
    1.0 - (1.0 - x2).powf(p.gamma())
}

/// Closed lens membership: `0 <= x2 <= 1` and `x2^gamma <= x1 <= 1 - (1-x2)^gamma`.
pub fn contains(p: &SwitchingParams, x: Point) -> bool {
    if !(0.0..=1.0).contains(&x.x2) {
        return false;
    }
    left_edge_x1(p, x.x2) <= x.x1 && x.x1 <= right_edge_x1(p, x.x2)
}

/// Open lens membership (all inequalities strict).
pub fn contains_interior(p: &SwitchingParams, x: Point) -> bool {
    if !(x.x2 > 0.0 && x.x2 < 1.0) {
        return false;
    }
    left_edge_x1(p, x.x2) < x.x1 && x.x1 < right_edge_x1(p, x.x2)
}

/// Label `x` relative to the lens. Corners win over boundary bands, boundary
/// bands over the outside test, and the diagonal band over the two interior
/// halves. Band membership is measured as the horizontal gap to each curve,
/// which is within a bounded factor of the true distance everywhere.
pub fn classify_point(p: &SwitchingParams, x: Point, tol: f64) -> RegionLabel {
    let near = |a: f64, b: f64| (a - b).abs() <= tol;
    if near(x.x1, 0.0) && near(x.x2, 0.0) {
        return RegionLabel::CornerOrigin;
    }
    if near(x.x1, 1.0) && near(x.x2, 1.0) {
        return RegionLabel::CornerOnes;
    }
    if x.x2 < -tol || x.x2 > 1.0 + tol {
        return RegionLabel::Outside;
    }
    let x2c = x.x2.clamp(0.0, 1.0);
    let left = left_edge_x1(p, x2c);
    let right = right_edge_x1(p, x2c);
    if near(x.x1, left) {
        return RegionLabel::BoundaryLeft;
    }
    if near(x.x1, right) {
        return RegionLabel::BoundaryRight;
    }
    if x.x1 < left - tol || x.x1 > right + tol {
        return RegionLabel::Outside;
    }
    if (x.x1 - x.x2).abs() <= tol {
        RegionLabel::Diagonal
    } else if x.x1 < x.x2 {
        RegionLabel::InteriorLeft
    } else {
        RegionLabel::InteriorRight
    }
}

/// Point of the boundary curve at parameter `t >= 0`. The left curve is the
/// field-0 orbit from `(1, 1)`, `(e^{-alpha t}, e^{-beta t})`; the right curve
/// is its mirror image, the field-1 orbit from `(0, 0)`.
pub fn boundary_curve(
    p: &SwitchingParams,
    side: BoundarySide,
    t: f64,
) -> Result<Point, GeomError> {
    if !(t >= 0.0) {
        return Err(GeomError::NegativeCurveTime(t));
    }
    let left = flow_forward(p, Regime::R0, t, Point::new(1.0, 1.0))?;
    Ok(match side {
        BoundarySide::Left => left,
        BoundarySide::Right => left.mirrored(),
    })
}

/// Signed time at which the backward orbit of field `i` from `x` meets the
/// diagonal (where the two fields align). Closed form from
/// `(x1 - i) e^{alpha theta} = (x2 - i) e^{beta theta}`.
pub fn alignment_time(
    p: &SwitchingParams,
    regime: Regime,
    x: Point,
) -> Result<f64, GeomError> {
    if !contains_interior(p, x) {
        return Err(GeomError::NotInterior(x.x1, x.x2));
    }
    let (r1, r2) = match regime {
        Regime::R0 => (x.x1, x.x2),
        Regime::R1 => (1.0 - x.x1, 1.0 - x.x2),
    };
    if r1 == 0.0 && r2 == 0.0 {
        return Err(GeomError::AtSink);
    }
    Ok((r2 / r1).ln() / (p.alpha - p.beta))
}

/// Tolerance to which [`exit_time`] brackets the exit.
pub const EXIT_TIME_TOL: f64 = 1e-12;

/// Supremum of backward times keeping the field-`i` orbit from `x` inside the
/// open lens. Finite: the backward flow expands away from the sink and leaves
/// the unit square. Bisection to [`EXIT_TIME_TOL`].
pub fn exit_time(p: &SwitchingParams, regime: Regime, x: Point) -> Result<f64, GeomError> {
    if !contains_interior(p, x) {
        return Err(GeomError::NotInterior(x.x1, x.x2));
    }
    // Beyond this time the relevant coordinate has left (0, 1).
    let hi0 = match regime {
        Regime::R0 => (1.0 / x.x2).ln() / p.beta + 1.0,
        Regime::R1 => (1.0 / (1.0 - x.x2)).ln() / p.beta + 1.0,
    };
    let inside = |t: f64| -> Result<bool, GeomError> {
        Ok(contains_interior(p, flow_forward(p, regime, -t, x)?))
    };
    if inside(hi0)? {
        return Err(GeomError::BracketFailure(format!(
            "backward orbit still interior at the coordinate bound t = {hi0}"
        )));
    }
    let (mut lo, mut hi) = (0.0, hi0);
    while hi - lo > EXIT_TIME_TOL / 2.0 {
        let mid = 0.5 * (lo + hi);
        if inside(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// A two-segment switching path from `x` to `y`: flow the `first` field for
/// `durations.0`, then the other field for `durations.1`. `midpoint` is the
/// switch point and `eta` its second coordinate, the root variable of the
/// construction.
#[derive(Debug, Clone, Copy)]
pub struct ReachabilitySolution {
    pub first: Regime,
    pub durations: (f64, f64),
    pub eta: f64,
    pub midpoint: Point,
    pub replay_error: f64,
}

const REACH_REPLAY_TOL: f64 = 1e-9;

/// Connect two interior points with at most two switches.
///
/// The construction intersects the field-0 orbit through `x` with the field-1
/// orbit through `y` (or vice versa). Writing `eta` for the second coordinate
/// of the candidate switch point, the two root functions are
///
/// `g(eta) = 1 - (1-y1)(1-y2)^{-gamma}(1-eta)^gamma - x1 x2^{-gamma} eta^gamma`
/// on `(0, min(x2, y2)]` (flow down with field 0 first), and
///
/// `h(eta) = 1 - (1-x1)(1-x2)^{-gamma}(1-eta)^gamma - y1 y2^{-gamma} eta^gamma`
/// on `[max(x2, y2), 1)` (flow up with field 1 first).
///
/// `g(0) < 0` and `h(1) < 0` always; at least one of `g(min) >= 0`,
/// `h(max) >= 0` holds, so one branch brackets a root. When both do, the
/// branch with the larger bracketing margin is used. The returned durations
/// are verified by replaying the path to within 1e-9.
pub fn reach_two_switch(
    p: &SwitchingParams,
    x: Point,
    y: Point,
) -> Result<ReachabilitySolution, GeomError> {
    if !contains_interior(p, x) {
        return Err(GeomError::NotInterior(x.x1, x.x2));
    }
    if !contains_interior(p, y) {
        return Err(GeomError::NotInterior(y.x1, y.x2));
    }
    // Coincident endpoints make the root equation tangential (a double root),
    // which bisection resolves only to the square root of machine precision;
    // the zero-time solution is exact, so return it directly.
    if x.x1 == y.x1 && x.x2 == y.x2 {
        return Ok(ReachabilitySolution {
            first: Regime::R0,
            durations: (0.0, 0.0),
            eta: x.x2,
            midpoint: x,
            replay_error: 0.0,
        });
    }
    let gamma = p.gamma();
    let g = |eta: f64| {
        1.0 - (1.0 - y.x1) * (1.0 - y.x2).powf(-gamma) * (1.0 - eta).powf(gamma)
            - x.x1 * x.x2.powf(-gamma) * eta.powf(gamma)
    };
    let h = |eta: f64| {
        1.0 - (1.0 - x.x1) * (1.0 - x.x2).powf(-gamma) * (1.0 - eta).powf(gamma)
            - y.x1 * y.x2.powf(-gamma) * eta.powf(gamma)
    };
    let m = x.x2.min(y.x2);
    let big_m = x.x2.max(y.x2);
    let g_at_m = g(m);
    let h_at_m = h(big_m);
    if g_at_m < 0.0 && h_at_m < 0.0 {
        return Err(GeomError::BracketFailure(format!(
            "neither root function is bracketed: g({m}) = {g_at_m}, h({big_m}) = {h_at_m}"
        )));
    }

    let use_g = g_at_m >= h_at_m;
    let eta = if use_g {
        bisect_root(&g, 0.0, m)
    } else {
        bisect_root(&h, 1.0, big_m)
    };

    let (first, s, t, midpoint) = if use_g {
        // Down along field 0 from x2 to eta, then up along field 1 to y2.
        let s = (x.x2 / eta).ln() / p.beta;
        let t = ((1.0 - eta) / (1.0 - y.x2)).ln() / p.beta;
        let w = Point::new(x.x1 * x.x2.powf(-gamma) * eta.powf(gamma), eta);
        (Regime::R0, s.max(0.0), t.max(0.0), w)
    } else {
        // Up along field 1 from x2 to eta, then down along field 0 to y2.
        let s = ((1.0 - x.x2) / (1.0 - eta)).ln() / p.beta;
        let t = (eta / y.x2).ln() / p.beta;
        let w = Point::new(
            1.0 - (1.0 - x.x1) * (1.0 - x.x2).powf(-gamma) * (1.0 - eta).powf(gamma),
            eta,
        );
        (Regime::R1, s.max(0.0), t.max(0.0), w)
    };

    let replayed = flow_cumulative(p, first.other(), &[s, t], x)?;
    let residual = replayed.dist(&y);
    if residual > REACH_REPLAY_TOL {
        return Err(GeomError::ReplayMismatch {
            residual,
            tol: REACH_REPLAY_TOL,
        });
    }
    Ok(ReachabilitySolution {
        first,
        durations: (s, t),
        eta,
        midpoint,
        replay_error: residual,
    })
}

/// Bisection on `[neg, pos]` where `f(neg) < 0 <= f(pos)` (the endpoints may
/// come in either order). Runs to f64 resolution.
fn bisect_root(f: &dyn Fn(f64) -> f64, neg: f64, pos: f64) -> f64 {
    let (mut lo, mut hi) = (neg, pos);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Random point of the open lens, `x2` uniform with a small inset, `x1`
/// uniform between the curves. Convenient for tests and spot checks.
pub fn sample_interior_point(p: &SwitchingParams, rng: &mut impl rand::Rng) -> Point {
    loop {
        let x2 = 1e-6 + rng.gen::<f64>() * (1.0 - 2e-6);
        let lo = left_edge_x1(p, x2);
        let hi = right_edge_x1(p, x2);
        let u = 1e-9 + rng.gen::<f64>() * (1.0 - 2e-9);
        let x = Point::new(lo + u * (hi - lo), x2);
        if contains_interior(p, x) {
            return x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::det_transversality;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> SwitchingParams {
        SwitchingParams::new(2.0, 1.0, 3.0, 2.0).unwrap()
    }

    #[test]
    fn classify_examples() {
        let p = params();
        let tol = DEFAULT_CLASSIFY_TOL;
        assert_eq!(classify_point(&p, Point::new(0.5, 0.5), tol), RegionLabel::Diagonal);
        assert_eq!(classify_point(&p, Point::new(0.0, 0.0), tol), RegionLabel::CornerOrigin);
        assert_eq!(classify_point(&p, Point::new(1.0, 1.0), tol), RegionLabel::CornerOnes);
        // (0.9, 0.1) violates x1 <= 1 - (1 - x2)^2 = 0.19.
        assert_eq!(classify_point(&p, Point::new(0.9, 0.1), tol), RegionLabel::Outside);
        assert_eq!(classify_point(&p, Point::new(0.25, 0.5), tol), RegionLabel::BoundaryLeft);
        assert_eq!(classify_point(&p, Point::new(0.75, 0.5), tol), RegionLabel::BoundaryRight);
        assert_eq!(classify_point(&p, Point::new(0.3, 0.5), tol), RegionLabel::InteriorLeft);
        assert_eq!(classify_point(&p, Point::new(0.6, 0.5), tol), RegionLabel::InteriorRight);
        assert_eq!(classify_point(&p, Point::new(0.5, -1.0), tol), RegionLabel::Outside);
        assert_eq!(classify_point(&p, Point::new(0.5, 1.5), tol), RegionLabel::Outside);
    }

    #[test]
    fn classify_mirror_symmetry() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let x = Point::new(rng.gen::<f64>() * 1.4 - 0.2, rng.gen::<f64>() * 1.4 - 0.2);
            let a = classify_point(&p, x, 1e-9);
            let b = classify_point(&p, x.mirrored(), 1e-9);
            let mirrored = match a {
                RegionLabel::CornerOrigin => RegionLabel::CornerOnes,
                RegionLabel::CornerOnes => RegionLabel::CornerOrigin,
                RegionLabel::BoundaryLeft => RegionLabel::BoundaryRight,
                RegionLabel::BoundaryRight => RegionLabel::BoundaryLeft,
                RegionLabel::InteriorLeft => RegionLabel::InteriorRight,
                RegionLabel::InteriorRight => RegionLabel::InteriorLeft,
                other => other,
            };
            assert_eq!(b, mirrored, "x = {x:?}");
        }
    }

    #[test]
    fn boundary_curve_endpoints_and_membership() {
        let p = params();
        let l0 = boundary_curve(&p, BoundarySide::Left, 0.0).unwrap();
        assert_eq!(l0, Point::new(1.0, 1.0));
        let r0 = boundary_curve(&p, BoundarySide::Right, 0.0).unwrap();
        assert_eq!(r0, Point::new(0.0, 0.0));
        let lfar = boundary_curve(&p, BoundarySide::Left, 40.0).unwrap();
        assert!(lfar.norm() < 1e-15);
        let rfar = boundary_curve(&p, BoundarySide::Right, 40.0).unwrap();
        assert!(rfar.dist(&Point::new(1.0, 1.0)) < 1e-15);
        // Curve points satisfy their defining equations to near machine precision.
        for k in 1..200 {
            let t = k as f64 * 0.05;
            let l = boundary_curve(&p, BoundarySide::Left, t).unwrap();
            assert!((l.x1 - left_edge_x1(&p, l.x2)).abs() < 1e-12 * (1.0 + l.x1));
            let r = boundary_curve(&p, BoundarySide::Right, t).unwrap();
            assert!((r.x1 - right_edge_x1(&p, r.x2)).abs() < 1e-12 * (1.0 + r.x1));
        }
        assert!(boundary_curve(&p, BoundarySide::Left, -0.1).is_err());
    }

    #[test]
    fn alignment_time_known_value_and_uniqueness() {
        let p = params();
        // theta = ln(x2 / x1) / (alpha - beta) = ln(4/5).
        let x = Point::new(0.5, 0.4);
        let theta = alignment_time(&p, Regime::R0, x).unwrap();
        assert!((theta - 0.8f64.ln()).abs() < 1e-14);
        // Diagonal points align at time zero.
        let d = alignment_time(&p, Regime::R0, Point::new(0.5, 0.5)).unwrap();
        assert!(d.abs() < 1e-15);
        // The transversality determinant along the backward orbit vanishes only there.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let x = sample_interior_point(&p, &mut rng);
            for regime in [Regime::R0, Regime::R1] {
                let theta = alignment_time(&p, regime, x).unwrap();
                let at = flow_forward(&p, regime, -theta, x).unwrap();
                assert!(
                    det_transversality(&p, at).abs() < 1e-9 * (1.0 + at.norm()),
                    "x = {x:?}, theta = {theta}"
                );
                // Scan: no other sign structure than a single crossing.
                let mut signs_before = 0;
                let mut signs_after = 0;
                for k in 1..=100 {
                    let t = theta - 0.05 * k as f64;
                    let q = flow_forward(&p, regime, -t, x).unwrap();
                    if det_transversality(&p, q).abs() < 1e-13 {
                        continue;
                    }
                    signs_before |= if det_transversality(&p, q) > 0.0 { 1 } else { 2 };
                    let t2 = theta + 0.05 * k as f64;
                    let q2 = flow_forward(&p, regime, -t2, x).unwrap();
                    signs_after |= if det_transversality(&p, q2) > 0.0 { 1 } else { 2 };
                }
                assert!(signs_before != 3, "multiple crossings before theta");
                assert!(signs_after != 3, "multiple crossings after theta");
            }
        }
    }

    #[test]
    fn exit_time_brackets_and_bound() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..300 {
            let x = sample_interior_point(&p, &mut rng);
            for regime in [Regime::R0, Regime::R1] {
                let tau = exit_time(&p, regime, x).unwrap();
                assert!(tau >= 0.0);
                let just_in = flow_forward(&p, regime, -(tau - 1e-12).max(0.0), x).unwrap();
                let just_out = flow_forward(&p, regime, -(tau + 1e-12), x).unwrap();
                assert!(contains_interior(&p, just_in) || tau < 1e-12, "x = {x:?}");
                assert!(!contains_interior(&p, just_out), "x = {x:?}");
                if regime == Regime::R0 {
                    assert!(tau < (1.0 / x.x2).ln() / p.beta);
                }
            }
        }
    }

    #[test]
    fn exit_time_vanishes_near_opposite_boundary() {
        let p = params();
        // Points close to the right curve exit almost immediately under the
        // backward field-0 flow.
        for k in 1..20 {
            let x2 = 0.3;
            let eps = 1e-3 / k as f64;
            let x = Point::new(right_edge_x1(&p, x2) - eps, x2);
            let tau = exit_time(&p, Regime::R0, x).unwrap();
            assert!(tau < 0.05, "eps = {eps}, tau = {tau}");
        }
    }

    #[test]
    fn reach_identity_needs_no_time() {
        let p = params();
        let x = Point::new(0.5, 0.5);
        let sol = reach_two_switch(&p, x, x).unwrap();
        assert!(sol.durations.0.abs() < 1e-9);
        assert!(sol.durations.1.abs() < 1e-9);
    }

    #[test]
    fn reach_example_replays() {
        let p = params();
        let sol = reach_two_switch(&p, Point::new(0.5, 0.5), Point::new(0.3, 0.4)).unwrap();
        assert!(sol.replay_error < 1e-9);
        assert!(sol.durations.0 >= 0.0 && sol.durations.1 >= 0.0);
        assert!(contains_interior(&p, sol.midpoint) || sol.eta > 0.0);
    }

    #[test]
    fn reach_random_pairs() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10_000 {
            let x = sample_interior_point(&p, &mut rng);
            let y = sample_interior_point(&p, &mut rng);
            let sol = reach_two_switch(&p, x, y)
                .unwrap_or_else(|e| panic!("x = {x:?}, y = {y:?}: {e}"));
            assert!(sol.replay_error < 1e-9, "x = {x:?}, y = {y:?}");
            assert!(sol.durations.0 >= 0.0 && sol.durations.1 >= 0.0);
        }
    }

    #[test]
    fn forward_invariance_of_the_lens() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..10_000 {
            let x = sample_interior_point(&p, &mut rng);
            let regime = if rng.gen::<bool>() { Regime::R1 } else { Regime::R0 };
            let t = rng.gen::<f64>() * 50.0;
            let y = flow_forward(&p, regime, t, x).unwrap();
            assert_ne!(
                classify_point(&p, y, 1e-9),
                RegionLabel::Outside,
                "x = {x:?}, regime = {regime:?}, t = {t}"
            );
        }
    }

    #[test]
    fn alignment_and_exit_shift_along_orbits() {
        // Flowing forward by h shifts both the alignment and the exit time by h.
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        for _ in 0..200 {
            let x = sample_interior_point(&p, &mut rng);
            let h = 0.05;
            for regime in [Regime::R0, Regime::R1] {
                let y = flow_forward(&p, regime, h, x).unwrap();
                if !contains_interior(&p, y) {
                    continue;
                }
                let th_x = alignment_time(&p, regime, x).unwrap();
                let th_y = alignment_time(&p, regime, y).unwrap();
                assert!((th_y - (th_x + h)).abs() < 1e-9, "alignment shift broken");
                let tau_x = exit_time(&p, regime, x).unwrap();
                let tau_y = exit_time(&p, regime, y).unwrap();
                assert!((tau_y - (tau_x + h)).abs() < 1e-8, "exit shift broken");
            }
        }
    }
}
