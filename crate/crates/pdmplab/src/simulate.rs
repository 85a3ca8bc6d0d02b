//! Exact event-driven simulation of the switching process and Monte Carlo
//! estimation of occupation measures, CDFs, and marginals.
//!
//! Between switches the state follows the active linear field, so positions
//! are advanced by the closed-form flow: no time discretization error enters
//! anywhere. Heavy runs stream their samples through [`OccupationSink`]s
//! without materializing an event log.

use crate::core::{flow_forward, CoreError, HybridState, Point, Regime, SwitchingParams};
use crate::grid::{GridError, GridField, GridKind, MarginalCdf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation input: {0}")]
    InvalidInput(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("event log parse error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("event log I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// One switch: at `time`, the state was at `position` and `regime` became
/// the active field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchEvent {
    pub time: f64,
    pub position: Point,
    pub regime: Regime,
}

/// A full simulated trajectory: the initial hybrid state at time 0 and every
/// switch. The regime recorded with each event is the regime *entered*, so
/// consecutive regimes alternate and positions replay exactly through
/// `flow_forward` over the inter-event gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    pub params: SwitchingParams,
    pub initial: HybridState,
    pub seed: u64,
    pub events: Vec<SwitchEvent>,
    pub total_time: f64,
}

/// One inter-switch interval: `regime` is active on `[start, start + len)`
/// starting from `from`.
#[derive(Debug, Clone, Copy)]
pub struct FlowInterval {
    pub start: f64,
    pub len: f64,
    pub regime: Regime,
    pub from: Point,
}

impl FlowInterval {
    /// Position at elapsed time `dt in [0, len]` within the interval.
    pub fn position_at(&self, p: &SwitchingParams, dt: f64) -> Result<Point, CoreError> {
        flow_forward(p, self.regime, dt, self.from)
    }
}

/// Default start: the lens center, field 0 active. The invariant law is
/// unique, so any start works; this one is interior from the first event.
pub fn default_initial() -> HybridState {
    HybridState {
        position: Point::new(0.5, 0.5),
        regime: Regime::R0,
    }
}

/// Default burn-in: 50 contraction times. The coupling contracts at rate
/// `beta`, so memory of the start decays like `e^{-beta t}`.
pub fn default_burn_in(p: &SwitchingParams) -> f64 {
    50.0 / p.beta
}

/// Default number of position samples per inter-switch interval.
pub const DEFAULT_SAMPLES_PER_INTERVAL: usize = 4;

// The event stream and the position-sampling stream of one chain come from
// the same 64-bit seed on separate, provably non-overlapping ChaCha streams,
// so interleaving sampling with simulation never perturbs the trajectory.
fn event_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * chain);
    rng
}

fn sample_rng(seed: u64, chain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * chain + 1);
    rng
}

fn exponential(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    loop {
        // Inverse-CDF sampling; reject the measure-zero u = 0 draw so the
        // duration is strictly positive.
        let u: f64 = rng.gen();
        let dt = -(1.0 - u).ln() / rate;
        if dt > 0.0 {
            return dt;
        }
    }
}

/// Drive `n_events` switches from `initial`, invoking `visit` with each
/// completed inter-switch interval in order. Returns the final hybrid state
/// and the total elapsed time. The trajectory for a given `(p, initial,
/// seed, chain)` is bit-reproducible.
pub fn drive_chain(
    p: &SwitchingParams,
    initial: HybridState,
    n_events: u64,
    seed: u64,
    chain: u64,
    mut visit: impl FnMut(&FlowInterval),
) -> Result<(HybridState, f64), SimError> {
    if n_events == 0 {
        return Err(SimError::InvalidInput("n_events must be at least 1".into()));
    }
    let mut rng = event_rng(seed, chain);
    let mut state = initial;
    let mut t = 0.0f64;
    for _ in 0..n_events {
        let mut dt = exponential(&mut rng, state.regime.rate(p));
        // Cumulative times must stay strictly increasing; at large t a tiny
        // dt can vanish in the addition, so nudge it above one ulp of t.
        dt = dt.max(t * (2.0 * f64::EPSILON));
        // Quantize the interval to the time accumulation, so that an interval
        // recovered from consecutive stored absolute times (cur - prev)
        // reproduces this flow bit-for-bit on replay.
        for _ in 0..8 {
            let back = (t + dt) - t;
            if back == dt {
                break;
            }
            dt = back;
        }
        visit(&FlowInterval {
            start: t,
            len: dt,
            regime: state.regime,
            from: state.position,
        });
        state.position = flow_forward(p, state.regime, dt, state.position)?;
        t += dt;
        state.regime = state.regime.other();
    }
    Ok((state, t))
}

/// Exact simulation: `n_events` switches from `initial`, deterministic given
/// `seed` (chain 0 of that seed).
pub fn simulate(
    p: &SwitchingParams,
    initial: HybridState,
    n_events: u64,
    seed: u64,
) -> Result<EventLog, SimError> {
    let mut events = Vec::with_capacity(usize::try_from(n_events).unwrap_or(0));
    let mut pending: Option<FlowInterval> = None;
    let (_, total_time) = drive_chain(p, initial, n_events, seed, 0, |iv| {
        if let Some(prev) = pending.take() {
            events.push((prev, iv.from));
        }
        pending = Some(*iv);
    })?;
    // The visitor sees each interval before the flow is applied, so the final
    // interval's endpoint is recomputed here the same way drive_chain did it.
    if let Some(last) = pending {
        let end = flow_forward(p, last.regime, last.len, last.from)?;
        events.push((last, end));
    }
    let events = events
        .into_iter()
        .map(|(iv, end)| SwitchEvent {
            time: iv.start + iv.len,
            position: end,
            regime: iv.regime.other(),
        })
        .collect();
    Ok(EventLog {
        params: *p,
        initial,
        seed,
        events,
        total_time,
    })
}

impl EventLog {
    /// The inter-switch intervals, including the one leading to the first event.
    pub fn intervals(&self) -> impl Iterator<Item = FlowInterval> + '_ {
        let first = FlowInterval {
            start: 0.0,
            len: self.events.first().map_or(0.0, |e| e.time),
            regime: self.initial.regime,
            from: self.initial.position,
        };
        std::iter::once(first).chain(self.events.windows(2).map(|w| FlowInterval {
            start: w[0].time,
            len: w[1].time - w[0].time,
            regime: w[0].regime,
            from: w[0].position,
        }))
    }

    /// Verify the structural invariants: strictly increasing times,
    /// alternating regimes, and positions that replay through the exact flow
    /// to within `tol` (0 demands bit-identical replay).
    pub fn replay_check(&self, tol: f64) -> Result<(), SimError> {
        let mut t_prev = 0.0;
        let mut state = self.initial;
        for (k, e) in self.events.iter().enumerate() {
            if !(e.time > t_prev) {
                return Err(SimError::InvalidInput(format!(
                    "event {k} time {} does not increase past {t_prev}",
                    e.time
                )));
            }
            if e.regime != state.regime.other() {
                return Err(SimError::InvalidInput(format!(
                    "event {k} enters {:?} out of turn",
                    e.regime
                )));
            }
            let replayed = flow_forward(&self.params, state.regime, e.time - t_prev, state.position)?;
            let err = replayed.dist(&e.position);
            if err > tol {
                return Err(SimError::InvalidInput(format!(
                    "event {k} position off by {err:e} under replay"
                )));
            }
            state = HybridState {
                position: e.position,
                regime: e.regime,
            };
            t_prev = e.time;
        }
        Ok(())
    }

    /// Cycle-based occupancy estimate after `burn_in`.
    pub fn occupancy(&self, burn_in: f64) -> Result<OccupancyEstimate, SimError> {
        let mut stats = CycleStats::default();
        let mut pending_r0: Option<f64> = None;
        for iv in self.intervals() {
            if iv.start < burn_in {
                continue;
            }
            match iv.regime {
                Regime::R0 => pending_r0 = Some(iv.len),
                Regime::R1 => {
                    if let Some(a) = pending_r0.take() {
                        stats.push(a, a + iv.len);
                    }
                }
            }
        }
        stats.estimate()
    }

    /// Write the CSV form: `# `-prefixed provenance, machine-readable header
    /// comments (seed, params, initial), a `time,x1,x2,regime` column row,
    /// then the time-0 state and one row per switch.
    pub fn write_csv<W: Write>(&self, w: &mut W, provenance: &[String]) -> Result<(), SimError> {
        for line in provenance {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "# seed: {}", self.seed)?;
        writeln!(
            w,
            "# params: {} {} {} {}",
            self.params.alpha, self.params.beta, self.params.lambda0, self.params.lambda1
        )?;
        writeln!(w, "time,x1,x2,regime")?;
        writeln!(
            w,
            "{},{},{},{}",
            0.0,
            self.initial.position.x1,
            self.initial.position.x2,
            self.initial.regime.index()
        )?;
        for e in &self.events {
            writeln!(
                w,
                "{},{},{},{}",
                e.time,
                e.position.x1,
                e.position.x2,
                e.regime.index()
            )?;
        }
        Ok(())
    }

    /// Read the CSV form written by [`EventLog::write_csv`]. The `# params:`
    /// header is required (the log is meaningless without its rates); the
    /// seed header is optional and defaults to 0.
    pub fn read_csv<R: BufRead>(r: &mut R) -> Result<EventLog, SimError> {
        let mut seed = 0u64;
        let mut params: Option<SwitchingParams> = None;
        let mut rows: Vec<(f64, Point, Regime)> = Vec::new();
        let mut saw_columns = false;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim_end_matches('\r').trim();
            let fail = |msg: String| SimError::Format {
                line: lineno + 1,
                msg,
            };
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("seed:") {
                    seed = v.trim().parse().map_err(|e| fail(format!("bad seed: {e}")))?;
                } else if let Some(v) = rest.strip_prefix("params:") {
                    let nums: Result<Vec<f64>, _> =
                        v.split_whitespace().map(str::parse).collect();
                    let nums = nums.map_err(|e| fail(format!("bad params: {e}")))?;
                    if nums.len() != 4 {
                        return Err(fail("params header needs 4 numbers".into()));
                    }
                    params = Some(
                        SwitchingParams::new(nums[0], nums[1], nums[2], nums[3])
                            .map_err(|e| fail(e.to_string()))?,
                    );
                }
                continue;
            }
            if t == "time,x1,x2,regime" {
                saw_columns = true;
                continue;
            }
            let parts: Vec<&str> = t.split(',').collect();
            if parts.len() != 4 {
                return Err(fail(format!("expected 4 columns, found {}", parts.len())));
            }
            let time: f64 = parts[0].parse().map_err(|e| fail(format!("bad time: {e}")))?;
            let x1: f64 = parts[1].parse().map_err(|e| fail(format!("bad x1: {e}")))?;
            let x2: f64 = parts[2].parse().map_err(|e| fail(format!("bad x2: {e}")))?;
            let ri: usize = parts[3]
                .parse()
                .map_err(|e| fail(format!("bad regime: {e}")))?;
            if ri > 1 {
                return Err(fail(format!("regime must be 0 or 1, got {ri}")));
            }
            rows.push((time, Point::new(x1, x2), Regime::from_index(ri)));
        }
        if !saw_columns {
            return Err(SimError::Format {
                line: 0,
                msg: "missing `time,x1,x2,regime` column header".into(),
            });
        }
        let params = params.ok_or(SimError::Format {
            line: 0,
            msg: "missing `# params:` header".into(),
        })?;
        if rows.is_empty() {
            return Err(SimError::Format {
                line: 0,
                msg: "no data rows".into(),
            });
        }
        if rows[0].0 != 0.0 {
            return Err(SimError::Format {
                line: 0,
                msg: "first row must carry the time-0 initial state".into(),
            });
        }
        let initial = HybridState {
            position: rows[0].1,
            regime: rows[0].2,
        };
        let events: Vec<SwitchEvent> = rows[1..]
            .iter()
            .map(|&(time, position, regime)| SwitchEvent {
                time,
                position,
                regime,
            })
            .collect();
        let total_time = events.last().map_or(0.0, |e| e.time);
        let log = EventLog {
            params,
            initial,
            seed,
            events,
            total_time,
        };
        log.replay_check(1e-9)?;
        Ok(log)
    }
}

/// Receiver of weighted position samples of the occupation measure.
pub trait OccupationSink {
    fn record(&mut self, regime: Regime, pos: Point, weight: f64);
}

impl<T: OccupationSink + ?Sized> OccupationSink for &mut T {
    fn record(&mut self, regime: Regime, pos: Point, weight: f64) {
        (**self).record(regime, pos, weight);
    }
}

/// Sample the occupation measure of one interval stream: `k` positions at
/// i.i.d. uniform times per (clipped) interval, each weighted `len / k`, so
/// the recorded weights are an unbiased decomposition of elapsed time.
fn sample_interval(
    p: &SwitchingParams,
    rng: &mut ChaCha8Rng,
    iv: &FlowInterval,
    burn_in: f64,
    k: usize,
    sink: &mut impl OccupationSink,
) -> Result<(), SimError> {
    let end = iv.start + iv.len;
    if end <= burn_in {
        // Keep the sample stream aligned regardless of burn-in by consuming
        // nothing before it: burn-in clipping changes no later draw because
        // each interval draws exactly k uniforms once it is (partly) counted.
        return Ok(());
    }
    let lo = burn_in.max(iv.start);
    let len = end - lo;
    let w = len / k as f64;
    for _ in 0..k {
        let dt = (lo - iv.start) + rng.gen::<f64>() * len;
        let pos = iv.position_at(p, dt)?;
        sink.record(iv.regime, pos, w);
    }
    Ok(())
}

/// Summary of a streaming run.
#[derive(Debug, Clone)]
pub struct StreamSummary {
    pub final_state: HybridState,
    pub total_time: f64,
    pub events: u64,
    pub occupancy: OccupancyEstimate,
}

/// Simulate `n_events` switches and stream weighted occupation samples into
/// `sink` (`k` per interval past `burn_in`), without materializing a log.
/// `chain` selects an independent RNG stream of the same seed; chain 0 is the
/// canonical single-run stream, so a streamed histogram equals the
/// log-then-estimate route bit for bit.
pub fn stream_occupation(
    p: &SwitchingParams,
    initial: HybridState,
    n_events: u64,
    seed: u64,
    chain: u64,
    burn_in: f64,
    k: usize,
    sink: &mut impl OccupationSink,
) -> Result<StreamSummary, SimError> {
    if k == 0 {
        return Err(SimError::InvalidInput(
            "samples per interval must be at least 1".into(),
        ));
    }
    let mut rng = sample_rng(seed, chain);
    let mut err: Option<SimError> = None;
    let mut stats = CycleStats::default();
    let mut pending_r0: Option<f64> = None;
    let (final_state, total_time) = drive_chain(p, initial, n_events, seed, chain, |iv| {
        if err.is_some() {
            return;
        }
        if iv.start >= burn_in {
            match iv.regime {
                Regime::R0 => pending_r0 = Some(iv.len),
                Regime::R1 => {
                    if let Some(a) = pending_r0.take() {
                        stats.push(a, a + iv.len);
                    }
                }
            }
        }
        if let Err(e) = sample_interval(p, &mut rng, iv, burn_in, k, sink) {
            err = Some(e);
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    if total_time <= burn_in {
        return Err(SimError::InsufficientData(format!(
            "run ended at t = {total_time}, inside the burn-in {burn_in}"
        )));
    }
    Ok(StreamSummary {
        final_state,
        total_time,
        events: n_events,
        occupancy: stats.estimate()?,
    })
}

/// Per-regime histogram sink on the unit square.
pub struct HistogramSink {
    grid: GridField,
    pub total_weight: f64,
}

impl HistogramSink {
    pub fn new(n: usize) -> Result<Self, SimError> {
        Ok(HistogramSink {
            grid: GridField::new(GridKind::Density, n, n)?,
            total_weight: 0.0,
        })
    }

    /// Normalize to a probability density (integral 1 over both regimes).
    pub fn finalize(mut self) -> Result<GridField, SimError> {
        if !(self.total_weight > 0.0) {
            return Err(SimError::InsufficientData(
                "histogram received no weight".into(),
            ));
        }
        let area = self.grid.cell_area();
        let c = 1.0 / (self.total_weight * area);
        for v in self
            .grid
            .values0
            .iter_mut()
            .chain(self.grid.values1.iter_mut())
        {
            *v *= c;
        }
        Ok(self.grid)
    }

    pub fn merge(&mut self, other: &HistogramSink) {
        for (a, b) in self
            .grid
            .values0
            .iter_mut()
            .zip(&other.grid.values0)
            .chain(self.grid.values1.iter_mut().zip(&other.grid.values1))
        {
            *a += b;
        }
        self.total_weight += other.total_weight;
    }
}

impl OccupationSink for HistogramSink {
    fn record(&mut self, regime: Regime, pos: Point, weight: f64) {
        let n1 = self.grid.n1;
        let n2 = self.grid.n2;
        let i1 = ((pos.x1 * n1 as f64) as usize).min(n1 - 1);
        let i2 = ((pos.x2 * n2 as f64) as usize).min(n2 - 1);
        let k = self.grid.idx(i1, i2);
        self.grid.values_mut(regime)[k] += weight;
        self.total_weight += weight;
    }
}

/// Node-aligned CDF sink: samples are binned so that prefix sums give the
/// exact time-weighted empirical CDF at the `n x n` grid nodes.
pub struct CdfSink {
    n: usize,
    counts0: Vec<f64>,
    counts1: Vec<f64>,
    total_weight: f64,
}

impl CdfSink {
    pub fn new(n: usize) -> Result<Self, SimError> {
        if n < 2 {
            return Err(SimError::InvalidInput("cdf grid needs n >= 2".into()));
        }
        Ok(CdfSink {
            n,
            counts0: vec![0.0; n * n],
            counts1: vec![0.0; n * n],
            total_weight: 0.0,
        })
    }

    fn bin(&self, x: f64) -> usize {
        // Smallest node index whose coordinate is >= x.
        ((x * (self.n - 1) as f64).ceil() as usize).min(self.n - 1)
    }

    /// Prefix-sum into a CDF grid, normalized by total weight so the far
    /// corner values are the regime occupancies.
    pub fn finalize(self) -> Result<GridField, SimError> {
        if !(self.total_weight > 0.0) {
            return Err(SimError::InsufficientData("cdf sink received no weight".into()));
        }
        let n = self.n;
        let mut g = GridField::new(GridKind::Cdf, n, n)?;
        for (counts, out) in [(&self.counts0, &mut g.values0), (&self.counts1, &mut g.values1)]
        {
            out.copy_from_slice(counts);
            // 2-D prefix sums, row-major [i1 * n + i2].
            for i1 in 0..n {
                for i2 in 1..n {
                    out[i1 * n + i2] += out[i1 * n + i2 - 1];
                }
            }
            for i1 in 1..n {
                for i2 in 0..n {
                    out[i1 * n + i2] += out[(i1 - 1) * n + i2];
                }
            }
            for v in out.iter_mut() {
                *v /= self.total_weight;
            }
        }
        Ok(g)
    }
}

impl OccupationSink for CdfSink {
    fn record(&mut self, regime: Regime, pos: Point, weight: f64) {
        let k = self.bin(pos.x1) * self.n + self.bin(pos.x2);
        match regime {
            Regime::R0 => self.counts0[k] += weight,
            Regime::R1 => self.counts1[k] += weight,
        }
        self.total_weight += weight;
    }
}

/// Per-regime, per-axis marginal CDFs on `bins + 1` node-aligned points.
pub struct MarginalSink {
    bins: usize,
    // counts[2 * regime + axis][node]
    counts: [Vec<f64>; 4],
    weight: [f64; 2],
}

/// Conditional marginal CDFs (normalized within each regime) plus the regime
/// weights needed to recombine them.
pub struct MarginalEstimate {
    /// `cdf[regime][axis]`.
    pub cdf: [[MarginalCdf; 2]; 2],
    pub regime_weight: [f64; 2],
}

impl MarginalSink {
    pub fn new(bins: usize) -> Result<Self, SimError> {
        if bins < 2 {
            return Err(SimError::InvalidInput("marginal sink needs bins >= 2".into()));
        }
        Ok(MarginalSink {
            bins,
            counts: std::array::from_fn(|_| vec![0.0; bins + 1]),
            weight: [0.0; 2],
        })
    }

    pub fn merge(&mut self, other: &MarginalSink) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.weight[0] += other.weight[0];
        self.weight[1] += other.weight[1];
    }

    pub fn finalize(self) -> Result<MarginalEstimate, SimError> {
        if !(self.weight[0] > 0.0) || !(self.weight[1] > 0.0) {
            return Err(SimError::InsufficientData(
                "a regime received no marginal weight".into(),
            ));
        }
        let xs: Vec<f64> = (0..=self.bins)
            .map(|j| j as f64 / self.bins as f64)
            .collect();
        let make = |counts: &Vec<f64>, w: f64| {
            let mut values = Vec::with_capacity(counts.len());
            let mut acc = 0.0;
            for c in counts {
                acc += c;
                values.push(acc / w);
            }
            MarginalCdf {
                xs: xs.clone(),
                values,
            }
        };
        Ok(MarginalEstimate {
            cdf: [
                [
                    make(&self.counts[0], self.weight[0]),
                    make(&self.counts[1], self.weight[0]),
                ],
                [
                    make(&self.counts[2], self.weight[1]),
                    make(&self.counts[3], self.weight[1]),
                ],
            ],
            regime_weight: self.weight,
        })
    }
}

impl OccupationSink for MarginalSink {
    fn record(&mut self, regime: Regime, pos: Point, weight: f64) {
        let bin = |x: f64| ((x * self.bins as f64).ceil() as usize).min(self.bins);
        let r = regime.index();
        self.counts[2 * r][bin(pos.x1)] += weight;
        self.counts[2 * r + 1][bin(pos.x2)] += weight;
        self.weight[r] += weight;
    }
}

/// Fan a sample stream out to several sinks.
pub struct TeeSink<'a>(pub Vec<&'a mut dyn OccupationSink>);

impl OccupationSink for TeeSink<'_> {
    fn record(&mut self, regime: Regime, pos: Point, weight: f64) {
        for s in self.0.iter_mut() {
            s.record(regime, pos, weight);
        }
    }
}

/// Stream weighted occupation samples of an existing log into `sink` (`k`
/// per interval past `burn_in`), using the sampling stream derived from the
/// log's seed — the same positions any other estimator of this log sees.
pub fn sample_from_log(
    log: &EventLog,
    burn_in: f64,
    k: usize,
    sink: &mut impl OccupationSink,
) -> Result<(), SimError> {
    if log.total_time <= burn_in {
        return Err(SimError::InsufficientData(format!(
            "log ends at t = {}, inside the burn-in {burn_in}",
            log.total_time
        )));
    }
    if k == 0 {
        return Err(SimError::InvalidInput(
            "samples per interval must be at least 1".into(),
        ));
    }
    let mut rng = sample_rng(log.seed, 0);
    for iv in log.intervals() {
        sample_interval(&log.params, &mut rng, &iv, burn_in, k, sink)?;
    }
    Ok(())
}

/// Histogram estimate of the pair of occupation densities from a log:
/// an `n x n` cell grid per regime, total integral 1.
pub fn estimate_occupation(
    log: &EventLog,
    n: usize,
    k: usize,
    burn_in: f64,
) -> Result<GridField, SimError> {
    let mut sink = HistogramSink::new(n)?;
    sample_from_log(log, burn_in, k, &mut sink)?;
    sink.finalize()
}

/// Time-weighted empirical CDF pair on `n x n` grid nodes.
pub fn empirical_cdf(log: &EventLog, n: usize, burn_in: f64) -> Result<GridField, SimError> {
    let mut sink = CdfSink::new(n)?;
    sample_from_log(log, burn_in, DEFAULT_SAMPLES_PER_INTERVAL, &mut sink)?;
    sink.finalize()
}

/// Conditional marginal CDFs from a log on `bins`-resolution node grids.
pub fn empirical_marginals(
    log: &EventLog,
    bins: usize,
    burn_in: f64,
) -> Result<MarginalEstimate, SimError> {
    let mut sink = MarginalSink::new(bins)?;
    sample_from_log(log, burn_in, DEFAULT_SAMPLES_PER_INTERVAL, &mut sink)?;
    sink.finalize()
}

/// Two trajectories driven by one switching stream, reported as
/// `(time, separation)` at time 0 and every switch.
///
/// Both copies see the same switching times and regimes, so their difference
/// obeys the autonomous linear contraction `d/dt (x - y) = diag(-alpha,
/// -beta)(x - y)` regardless of the regime sequence. The separation vector
/// is therefore evolved directly (one multiplication per component per
/// interval): algebraically identical to differencing two absolute
/// trajectories, but free of the cancellation noise that differencing
/// produces once the separation shrinks toward machine precision.
pub fn coupled_contraction_run(
    p: &SwitchingParams,
    x: Point,
    y: Point,
    n_events: u64,
    seed: u64,
) -> Result<Vec<(f64, f64)>, SimError> {
    let mut out = Vec::with_capacity(usize::try_from(n_events).unwrap_or(0) + 1);
    out.push((0.0, x.dist(&y)));
    let mut d1 = x.x1 - y.x1;
    let mut d2 = x.x2 - y.x2;
    drive_chain(
        p,
        HybridState {
            position: x,
            regime: Regime::R0,
        },
        n_events,
        seed,
        0,
        |iv| {
            d1 *= (-p.alpha * iv.len).exp();
            d2 *= (-p.beta * iv.len).exp();
            out.push((iv.start + iv.len, d1.hypot(d2)));
        },
    )?;
    Ok(out)
}

/// Ratio-estimator statistics over i.i.d. regime-0/regime-1 cycles.
#[derive(Debug, Default, Clone)]
pub struct CycleStats {
    n: u64,
    sum_a: f64,
    sum_b: f64,
    sum_aa: f64,
    sum_bb: f64,
    sum_ab: f64,
}

/// Occupancy of regime 0 with a delta-method standard error.
#[derive(Debug, Clone, Copy)]
pub struct OccupancyEstimate {
    pub fraction0: f64,
    pub stderr: f64,
    pub cycles: u64,
    pub time0: f64,
    pub total: f64,
}

impl CycleStats {
    /// `a` = time in regime 0 during the cycle, `b` = total cycle length.
    pub fn push(&mut self, a: f64, b: f64) {
        self.n += 1;
        self.sum_a += a;
        self.sum_b += b;
        self.sum_aa += a * a;
        self.sum_bb += b * b;
        self.sum_ab += a * b;
    }

    pub fn merge(&mut self, other: &CycleStats) {
        self.n += other.n;
        self.sum_a += other.sum_a;
        self.sum_b += other.sum_b;
        self.sum_aa += other.sum_aa;
        self.sum_bb += other.sum_bb;
        self.sum_ab += other.sum_ab;
    }

    pub fn estimate(&self) -> Result<OccupancyEstimate, SimError> {
        if self.n < 2 {
            return Err(SimError::InsufficientData(format!(
                "need at least 2 complete cycles after burn-in, got {}",
                self.n
            )));
        }
        let n = self.n as f64;
        let a_bar = self.sum_a / n;
        let b_bar = self.sum_b / n;
        let theta = a_bar / b_bar;
        // Variance of the ratio estimator via the linearization a - theta b.
        let var_a = (self.sum_aa / n - a_bar * a_bar).max(0.0);
        let var_b = (self.sum_bb / n - b_bar * b_bar).max(0.0);
        let cov = self.sum_ab / n - a_bar * b_bar;
        let s2 = (var_a - 2.0 * theta * cov + theta * theta * var_b).max(0.0);
        let stderr = (s2 / n).sqrt() / b_bar;
        Ok(OccupancyEstimate {
            fraction0: theta,
            stderr,
            cycles: self.n,
            time0: self.sum_a,
            total: self.sum_b,
        })
    }
}
