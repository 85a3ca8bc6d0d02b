//! Reduction of a general planar affine switching system with a common
//! stable drift matrix to the normalized two-sink form, plus presets for the
//! two standard applications (gene expression, randomly switched PDE modes).
//!
//! A system `dx/dt = A x + b_i` with `A` having two distinct negative real
//! eigenvalues `-alpha < -beta < 0` is affinely conjugate to the normalized
//! system: diagonalize `A = G^{-1} diag(-alpha, -beta) G` with the rows of
//! `G` scaled so that the two affine fixed points `-A^{-1} b_i` land at
//! `(0, 0)` and `(1, 1)`. The change of coordinates is then the single affine
//! map `y = G x + shift`, where `shift = i*(1,1) + diag(-1/alpha, -1/beta) G b_i`
//! evaluates to the same vector for both regimes.

use crate::core::{flow_forward, CoreError, Point, Regime, SwitchingParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("drift matrix has complex eigenvalues (discriminant {disc})")]
    ComplexEigenvalues { disc: f64 },
    #[error("drift matrix eigenvalues {mu1} and {mu2} are not sufficiently distinct")]
    RepeatedEigenvalues { mu1: f64, mu2: f64 },
    #[error("drift matrix eigenvalue {mu} is not strictly negative")]
    UnstableEigenvalue { mu: f64 },
    #[error(
        "forcing difference b1 - b0 has no component along eigendirection {row}; \
         the two fixed points cannot be separated to (0,0) and (1,1)"
    )]
    DegenerateForcing { row: usize },
    #[error("invalid system description: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl ReduceError {
    /// True for structural rejections (the system is outside the supported
    /// class), false for plain parameter validation failures.
    pub fn is_unsupported(&self) -> bool {
        !matches!(self, ReduceError::Invalid(_))
    }
}

/// `dx/dt = A x + b_{I_t}` with a two-state Markov switch `I_t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralSystem {
    /// Row-major 2x2 drift matrix.
    #[serde(rename = "A")]
    pub a: [f64; 4],
    pub b0: [f64; 2],
    pub b1: [f64; 2],
    pub lambda0: f64,
    pub lambda1: f64,
}

impl GeneralSystem {
    fn forcing(&self, regime: Regime) -> [f64; 2] {
        match regime {
            Regime::R0 => self.b0,
            Regime::R1 => self.b1,
        }
    }

    /// The affine fixed point of regime `i`: `-A^{-1} b_i`.
    pub fn fixed_point(&self, regime: Regime) -> Result<[f64; 2], ReduceError> {
        let [a, b, c, d] = self.a;
        let det = a * d - b * c;
        if det == 0.0 || !det.is_finite() {
            return Err(ReduceError::Invalid(format!(
                "drift matrix is singular (det = {det})"
            )));
        }
        let f = self.forcing(regime);
        // -A^{-1} b  with  A^{-1} = [d, -b; -c, a] / det.
        Ok([
            -(d * f[0] - b * f[1]) / det,
            -(-c * f[0] + a * f[1]) / det,
        ])
    }

    /// Right-hand side `A x + b_i`.
    pub fn vector_field(&self, regime: Regime, x: [f64; 2]) -> [f64; 2] {
        let [a, b, c, d] = self.a;
        let f = self.forcing(regime);
        [
            a * x[0] + b * x[1] + f[0],
            c * x[0] + d * x[1] + f[1],
        ]
    }
}

/// The affine change of coordinates produced by [`reduce`]: `y = G x + shift0`
/// with `G A G^{-1} = diag(-alpha, -beta)`. `shift0` and `shift1` are the two
/// regime-tagged shift vectors of the defining display; the row normalization
/// makes them equal (up to rounding), so a single state-independent affine map
/// conjugates the flows.
#[derive(Debug, Clone, Serialize)]
pub struct Conjugacy {
    /// Row-major 2x2 matrix `G`.
    pub g: [f64; 4],
    /// Row-major inverse of `G`.
    pub g_inv: [f64; 4],
    pub shift0: [f64; 2],
    pub shift1: [f64; 2],
    pub params: SwitchingParams,
}

impl Conjugacy {
    /// Map a state of the general system to normalized coordinates.
    pub fn to_canonical(&self, x: [f64; 2]) -> Point {
        Point::new(
            self.g[0] * x[0] + self.g[1] * x[1] + self.shift0[0],
            self.g[2] * x[0] + self.g[3] * x[1] + self.shift0[1],
        )
    }

    /// Map normalized coordinates back to the general system's state space.
    pub fn from_canonical(&self, y: Point) -> [f64; 2] {
        let z = [y.x1 - self.shift0[0], y.x2 - self.shift0[1]];
        [
            self.g_inv[0] * z[0] + self.g_inv[1] * z[1],
            self.g_inv[2] * z[0] + self.g_inv[3] * z[1],
        ]
    }
}

/// Tolerance for treating two eigenvalues as distinct (conjugacy becomes
/// ill-conditioned approaching a Jordan block).
const EIGENVALUE_GAP_REL: f64 = 1e-9;

/// Diagonalize `sys` and build the affine conjugacy to the normalized form.
pub fn reduce(sys: &GeneralSystem) -> Result<Conjugacy, ReduceError> {
    for (name, v) in [("lambda0", sys.lambda0), ("lambda1", sys.lambda1)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ReduceError::Invalid(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    if sys.a.iter().any(|v| !v.is_finite())
        || sys.b0.iter().chain(sys.b1.iter()).any(|v| !v.is_finite())
    {
        return Err(ReduceError::Invalid("non-finite entry in A or b".into()));
    }
    let [a, b, c, d] = sys.a;
    let tr = a + d;
    let det = a * d - b * c;
    let disc = tr * tr - 4.0 * det;
    if disc < 0.0 {
        return Err(ReduceError::ComplexEigenvalues { disc });
    }
    let sq = disc.sqrt();
    let mu1 = 0.5 * (tr - sq); // more negative
    let mu2 = 0.5 * (tr + sq);
    if (mu1 - mu2).abs() <= EIGENVALUE_GAP_REL * mu1.abs().max(mu2.abs()) {
        return Err(ReduceError::RepeatedEigenvalues { mu1, mu2 });
    }
    if mu2 >= 0.0 {
        return Err(ReduceError::UnstableEigenvalue { mu: mu2 });
    }
    let alpha = -mu1;
    let beta = -mu2;

    // Left eigenvector rows: w A = mu w. Two algebraic candidates per
    // eigenvalue; at least one is nonzero when the eigenvalue is simple.
    let scale = a.abs().max(b.abs()).max(c.abs()).max(d.abs());
    let mut g = [0.0f64; 4];
    for (k, mu) in [(0usize, mu1), (1usize, mu2)] {
        let cand1 = [c, mu - a];
        let cand2 = [mu - d, b];
        let n1 = cand1[0].hypot(cand1[1]);
        let n2 = cand2[0].hypot(cand2[1]);
        let (w, n) = if n1 >= n2 { (cand1, n1) } else { (cand2, n2) };
        if n <= 1e-12 * (1.0 + scale) {
            return Err(ReduceError::RepeatedEigenvalues { mu1, mu2 });
        }
        g[2 * k] = w[0] / n;
        g[2 * k + 1] = w[1] / n;
    }

    // Normalize rows so the fixed-point difference maps to (1, 1); then the
    // fixed points themselves land at (0,0) and (1,1).
    let x0 = sys.fixed_point(Regime::R0)?;
    let x1 = sys.fixed_point(Regime::R1)?;
    let delta = [x1[0] - x0[0], x1[1] - x0[1]];
    let delta_norm = delta[0].hypot(delta[1]);
    for k in 0..2 {
        let dot = g[2 * k] * delta[0] + g[2 * k + 1] * delta[1];
        if dot.abs() <= 1e-12 * (1.0 + delta_norm) {
            return Err(ReduceError::DegenerateForcing { row: k });
        }
        g[2 * k] /= dot;
        g[2 * k + 1] /= dot;
    }

    let gdet = g[0] * g[3] - g[1] * g[2];
    if gdet == 0.0 || !gdet.is_finite() {
        return Err(ReduceError::RepeatedEigenvalues { mu1, mu2 });
    }
    let g_inv = [g[3] / gdet, -g[1] / gdet, -g[2] / gdet, g[0] / gdet];

    // shift_i = i*(1,1) + diag(-1/alpha, -1/beta) G b_i.
    let shift_of = |i: f64, bi: [f64; 2]| {
        [
            i - (g[0] * bi[0] + g[1] * bi[1]) / alpha,
            i - (g[2] * bi[0] + g[3] * bi[1]) / beta,
        ]
    };
    let shift0 = shift_of(0.0, sys.b0);
    let shift1 = shift_of(1.0, sys.b1);

    let params = SwitchingParams::new(alpha, beta, sys.lambda0, sys.lambda1)?;
    Ok(Conjugacy {
        g,
        g_inv,
        shift0,
        shift1,
        params,
    })
}

/// Gene-expression preset: rescaled mRNA/protein concentrations
/// `dx/dt = (alpha_prod / xstar) I_t - delta x`, `dy/dt = gamma (x - y)`,
/// i.e. `A = [[-delta, 0], [gamma, -gamma]]`, `b0 = 0`,
/// `b1 = (alpha_prod / xstar, 0)`. `ystar` must equal
/// `beta_prod * xstar / gamma`, the consistency condition under which the
/// protein equation closes in the rescaled variables.
#[allow(clippy::too_many_arguments)]
pub fn preset_gene_expression(
    alpha_prod: f64,
    delta: f64,
    beta_prod: f64,
    gamma: f64,
    lambda0: f64,
    lambda1: f64,
    xstar: f64,
    ystar: f64,
) -> Result<GeneralSystem, ReduceError> {
    for (name, v) in [
        ("alpha_prod", alpha_prod),
        ("delta", delta),
        ("beta_prod", beta_prod),
        ("gamma", gamma),
        ("lambda0", lambda0),
        ("lambda1", lambda1),
        ("xstar", xstar),
        ("ystar", ystar),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ReduceError::Invalid(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    if delta == gamma {
        return Err(ReduceError::RepeatedEigenvalues {
            mu1: -delta,
            mu2: -gamma,
        });
    }
    let ystar_expected = beta_prod * xstar / gamma;
    if (ystar - ystar_expected).abs() > 1e-9 * ystar_expected.abs() {
        return Err(ReduceError::Invalid(format!(
            "ystar = {ystar} is inconsistent: the rescaled protein equation \
             requires ystar = beta_prod * xstar / gamma = {ystar_expected}"
        )));
    }
    Ok(GeneralSystem {
        a: [-delta, 0.0, gamma, -gamma],
        b0: [0.0, 0.0],
        b1: [alpha_prod / xstar, 0.0],
        lambda0,
        lambda1,
    })
}

/// Decay rate of spatial mode `n` of the unit-interval heat problem: `(n pi)^2`.
pub fn pde_mode_rate(n: u32) -> f64 {
    let np = n as f64 * std::f64::consts::PI;
    np * np
}

/// Forcing coefficient of mode `n`: `(-1)^{n+1} sqrt(2) / (n pi)`.
pub fn pde_mode_coefficient(n: u32) -> f64 {
    let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
    sign * std::f64::consts::SQRT_2 / (n as f64 * std::f64::consts::PI)
}

/// Two-mode truncation of the heat equation with a randomly switching
/// boundary condition: modes `k` and `m` decouple with
/// `A = diag(-rate_k, -rate_m)`, `b0 = 0`, and
/// `b1 = (rate_k coeff_k, rate_m coeff_m)`.
pub fn preset_pde_modes(
    k: u32,
    m: u32,
    lambda0: f64,
    lambda1: f64,
) -> Result<GeneralSystem, ReduceError> {
    if k == 0 || m == 0 {
        return Err(ReduceError::Invalid("mode indices must be >= 1".into()));
    }
    if k == m {
        return Err(ReduceError::RepeatedEigenvalues {
            mu1: -pde_mode_rate(k),
            mu2: -pde_mode_rate(m),
        });
    }
    for (name, v) in [("lambda0", lambda0), ("lambda1", lambda1)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(ReduceError::Invalid(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    let rk = pde_mode_rate(k);
    let rm = pde_mode_rate(m);
    Ok(GeneralSystem {
        a: [-rk, 0.0, 0.0, -rm],
        b0: [0.0, 0.0],
        b1: [rk * pde_mode_coefficient(k), rm * pde_mode_coefficient(m)],
        lambda0,
        lambda1,
    })
}

/// Flow of the general system by classical fixed-step RK4, step chosen so the
/// global error stays well below 1e-10 for moderate `t`. Deliberately
/// independent of the eigendecomposition so conjugacy checks compare two
/// different computations.
pub fn general_flow(sys: &GeneralSystem, regime: Regime, t: f64, x: [f64; 2]) -> [f64; 2] {
    if t == 0.0 {
        return x;
    }
    let scale = sys.a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = ((t * (1.0 + scale) / 0.004).ceil() as usize).clamp(1, 2_000_000);
    let h = t / n as f64;
    let f = |x: [f64; 2]| sys.vector_field(regime, x);
    let mut y = x;
    for _ in 0..n {
        let k1 = f(y);
        let k2 = f([y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]]);
        let k3 = f([y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]]);
        let k4 = f([y[0] + h * k3[0], y[1] + h * k3[1]]);
        y = [
            y[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            y[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
    }
    y
}

/// Largest mismatch of `to_canonical(flow_sys) == flow_canonical(to_canonical)`
/// over `n` randomized `(t, regime, x)` draws. Used by tests and the CLI
/// verification flag.
pub fn conjugacy_residual(sys: &GeneralSystem, conj: &Conjugacy, n: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // Random draws near the fixed points, where trajectories live.
    let x0 = sys.fixed_point(Regime::R0).expect("reduced system");
    let x1 = sys.fixed_point(Regime::R1).expect("reduced system");
    let spread = {
        let d = [x1[0] - x0[0], x1[1] - x0[1]];
        d[0].hypot(d[1]).max(1e-3)
    };
    let mut worst = 0.0f64;
    for _ in 0..n {
        let regime = if rng.gen::<bool>() { Regime::R1 } else { Regime::R0 };
        let t = rng.gen::<f64>() * 1.5;
        let x = [
            x0[0] + (rng.gen::<f64>() * 2.0 - 0.5) * spread,
            x0[1] + (rng.gen::<f64>() * 2.0 - 0.5) * spread,
        ];
        let via_sys = conj.to_canonical(general_flow(sys, regime, t, x));
        let via_canon = flow_forward(&conj.params, regime, t, conj.to_canonical(x))
            .expect("canonical flow in range");
        worst = worst.max(via_sys.dist(&via_canon));
    }
    worst
}
