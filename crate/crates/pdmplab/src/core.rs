//! Exact flows of the two linear fields, their alternating compositions, and
//! the algebraic quantities (Jacobians, transversality determinant, mirror
//! symmetry) that the solvers and diagnostics are built on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest exponent magnitude passed to `exp`; beyond this the flow formulas
/// would silently saturate to `0`/`inf`, so we refuse instead.
pub const EXP_ARG_LIMIT: f64 = 700.0;

#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("parameter `{name}` must be strictly positive, got {value}")]
    NonPositiveParam { name: &'static str, value: f64 },
    #[error("parameter `{name}` must be finite, got {value}")]
    NonFiniteParam { name: &'static str, value: f64 },
    #[error("decay rates must satisfy alpha > beta, got alpha = {alpha}, beta = {beta}")]
    RatesNotOrdered { alpha: f64, beta: f64 },
    #[error("exponent {arg} exceeds the overflow guard ({EXP_ARG_LIMIT}); flow evaluation refused")]
    ExpOverflow { arg: f64 },
    #[error("duration vector entries must be strictly positive, got {value} at index {index}")]
    NonPositiveDuration { index: usize, value: f64 },
}

/// A point of the plane, in the normalized coordinates where the two stable
/// fixed points sit at `(0, 0)` and `(1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x1: f64,
    pub x2: f64,
}

impl Point {
    pub const fn new(x1: f64, x2: f64) -> Self {
        Point { x1, x2 }
    }

    pub fn norm(&self) -> f64 {
        self.x1.hypot(self.x2)
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x1 - other.x1).hypot(self.x2 - other.x2)
    }

    /// Mirror image through the center of the lens; see [`symmetry_conjugate`].
    pub fn mirrored(&self) -> Point {
        symmetry_conjugate(*self)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite()
    }
}

/// Which of the two linear fields is active: `R0` decays toward `(0, 0)`,
/// `R1` toward `(1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    R0,
    R1,
}

impl Regime {
    pub fn index(self) -> usize {
        match self {
            Regime::R0 => 0,
            Regime::R1 => 1,
        }
    }

    pub fn from_index(i: usize) -> Regime {
        if i == 0 {
            Regime::R0
        } else {
            Regime::R1
        }
    }

    pub fn other(self) -> Regime {
        match self {
            Regime::R0 => Regime::R1,
            Regime::R1 => Regime::R0,
        }
    }

    /// The stable fixed point of the active field.
    pub fn sink(self) -> Point {
        match self {
            Regime::R0 => Point::new(0.0, 0.0),
            Regime::R1 => Point::new(1.0, 1.0),
        }
    }

    /// Switching intensity out of this regime.
    pub fn rate(self, p: &SwitchingParams) -> f64 {
        match self {
            Regime::R0 => p.lambda0,
            Regime::R1 => p.lambda1,
        }
    }
}

/// Position plus active regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub position: Point,
    pub regime: Regime,
}

/// Decay rates of the shared linear part and the two switching intensities.
///
/// Both fields have linear part `diag(-alpha, -beta)` with `alpha > beta > 0`;
/// the process leaves regime `i` at rate `lambda_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchingParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda0: f64,
    pub lambda1: f64,
}

impl SwitchingParams {
    pub fn new(alpha: f64, beta: f64, lambda0: f64, lambda1: f64) -> Result<Self, CoreError> {
        for (name, value) in [
            ("alpha", alpha),
            ("beta", beta),
            ("lambda0", lambda0),
            ("lambda1", lambda1),
        ] {
            if !value.is_finite() {
                return Err(CoreError::NonFiniteParam { name, value });
            }
            if value <= 0.0 {
                return Err(CoreError::NonPositiveParam { name, value });
            }
        }
        if alpha <= beta {
            return Err(CoreError::RatesNotOrdered { alpha, beta });
        }
        Ok(SwitchingParams {
            alpha,
            beta,
            lambda0,
            lambda1,
        })
    }

    /// Curvature exponent `gamma = alpha / beta > 1` of the support boundary.
    pub fn gamma(&self) -> f64 {
        self.alpha / self.beta
    }

    /// Long-run fraction of time spent in `regime`.
    pub fn occupancy(&self, regime: Regime) -> f64 {
        match regime {
            Regime::R0 => self.lambda1 / (self.lambda0 + self.lambda1),
            Regime::R1 => self.lambda0 / (self.lambda0 + self.lambda1),
        }
    }

    /// Same rates with the two switching intensities exchanged. Mirroring a
    /// statement about regime 0 through the lens center yields the statement
    /// about regime 1 of the swapped parameters.
    pub fn swapped(&self) -> SwitchingParams {
        SwitchingParams {
            alpha: self.alpha,
            beta: self.beta,
            lambda0: self.lambda1,
            lambda1: self.lambda0,
        }
    }
}

/// Ordered list of strictly positive segment durations, most recent last.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeVector(Vec<f64>);

impl TimeVector {
    pub fn new(durations: Vec<f64>) -> Result<Self, CoreError> {
        for (index, &value) in durations.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(CoreError::NonPositiveDuration { index, value });
            }
        }
        Ok(TimeVector(durations))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

fn checked_exp(arg: f64) -> Result<f64, CoreError> {
    // Large negative arguments underflow harmlessly to 0 (the orbit has
    // reached its sink to double precision); only overflow is an error.
    if !(arg <= EXP_ARG_LIMIT) {
        return Err(CoreError::ExpOverflow { arg });
    }
    Ok(arg.exp())
}

/// Exact flow of field `i` for a signed time `t`:
/// each coordinate relaxes toward the sink, `x_k(t) = i + (x_k - i) e^{-rate_k t}`
/// with rates `alpha` (first coordinate) and `beta` (second).
pub fn flow_forward(
    p: &SwitchingParams,
    regime: Regime,
    t: f64,
    x: Point,
) -> Result<Point, CoreError> {
    let i = regime.index() as f64;
    let ea = checked_exp(-p.alpha * t)?;
    let eb = checked_exp(-p.beta * t)?;
    Ok(Point::new(i + (x.x1 - i) * ea, i + (x.x2 - i) * eb))
}

/// Inverse flow of field `i`: `flow_backward(t) = flow_forward(-t)`.
pub fn flow_backward(
    p: &SwitchingParams,
    regime: Regime,
    t: f64,
    x: Point,
) -> Result<Point, CoreError> {
    flow_forward(p, regime, -t, x)
}

/// Field index of segment `j` (0-based) in an alternating composition of `n`
/// segments whose last segment uses `terminal`.
fn segment_regime(terminal: Regime, n: usize, j: usize) -> Regime {
    if (n - 1 - j) % 2 == 0 {
        terminal
    } else {
        terminal.other()
    }
}

/// Alternating forward composition: segment 1 is applied first, fields
/// alternate, and the final segment uses `terminal`. Durations may be signed;
/// a negative entry traverses that segment in reverse.
pub fn flow_cumulative(
    p: &SwitchingParams,
    terminal: Regime,
    durations: &[f64],
    x: Point,
) -> Result<Point, CoreError> {
    let n = durations.len();
    let mut y = x;
    for (j, &t) in durations.iter().enumerate() {
        y = flow_forward(p, segment_regime(terminal, n, j), t, y)?;
    }
    Ok(y)
}

/// Exact inverse of [`flow_cumulative`]: undoes the most recent segment first.
/// For two segments `(s, t)` with `terminal = R0` this is the closed form
/// `(1 - e^{alpha s} + e^{alpha (s+t)} x1, 1 - e^{beta s} + e^{beta (s+t)} x2)`.
pub fn flow_cumulative_backward(
    p: &SwitchingParams,
    terminal: Regime,
    durations: &TimeVector,
    x: Point,
) -> Result<Point, CoreError> {
    let ts = durations.as_slice();
    let n = ts.len();
    let mut y = x;
    for j in (0..n).rev() {
        y = flow_forward(p, segment_regime(terminal, n, j), -ts[j], y)?;
    }
    Ok(y)
}

/// Jacobian determinant of the backward composition with the given durations:
/// `e^{(alpha + beta) * sum}`, independent of the point and of the field order.
pub fn backward_jacobian(p: &SwitchingParams, durations: &TimeVector) -> Result<f64, CoreError> {
    checked_exp((p.alpha + p.beta) * durations.sum())
}

/// Determinant of the matrix whose columns are the two field vectors at `x`:
/// `alpha * beta * (x1 - x2)`. It vanishes exactly on the diagonal, where the
/// fields align.
pub fn det_transversality(p: &SwitchingParams, x: Point) -> f64 {
    p.alpha * p.beta * (x.x1 - x.x2)
}

/// The involution `x -> (1, 1) - x` exchanging the roles of the two fields:
/// flowing with field 1 is conjugate to flowing with field 0 through it.
pub fn symmetry_conjugate(x: Point) -> Point {
    Point::new(1.0 - x.x1, 1.0 - x.x2)
}
