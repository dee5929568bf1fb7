//! Shared-bus contention model.
//!
//! Per-frame wall time for `n` devices receiving every frame:
//!
//! ```text
//! T(n) = t_compute + n * (t_tx + t_host) + n^2 * t_contend
//! ```
//!
//! where `t_tx` is the bus transfer time of one input frame. The analytic form
//! lives in [`predict_fps`]; [`simulate_broadcast`] plays the same workload out
//! event by event; [`calibrate`] fits the free parameters to measured tables.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_FRAME_BYTES: u64 = 640 * 480 * 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BusError {
    #[error("device count must be >= 1 (got {0})")]
    InvalidDeviceCount(usize),
    #[error("frame count must be >= 1")]
    InvalidFrameCount,
    #[error("calibration needs at least 3 distinct device counts (got {0})")]
    InsufficientData(usize),
    #[error("measurement ({n}, {fps}) is not usable")]
    InvalidMeasurement { n: u32, fps: f64 },
    #[error("no fit with positive compute time exists: {0}")]
    NoNonNegativeFit(String),
    #[error("invalid bus configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid device profile: {0}")]
    InvalidProfile(&'static str),
    #[error("cannot schedule at {at:?}, clock is already at {now:?}")]
    ScheduleInPast { at: String, now: String },
    #[error("malformed table: {0}")]
    BadTable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusConfig {
    pub raw_bandwidth_bps: f64,
    pub per_transfer_overhead_ms: f64,
    pub protocol_efficiency: f64,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            raw_bandwidth_bps: 5e9,
            per_transfer_overhead_ms: 0.0,
            protocol_efficiency: 0.8,
        }
    }
}

impl BusConfig {
    pub fn validate(&self) -> Result<(), BusError> {
        if !(self.raw_bandwidth_bps > 0.0) {
            return Err(BusError::InvalidConfig("raw bandwidth must be > 0"));
        }
        if !(self.protocol_efficiency > 0.0 && self.protocol_efficiency <= 1.0) {
            return Err(BusError::InvalidConfig("protocol efficiency must be in (0, 1]"));
        }
        if !(self.per_transfer_overhead_ms >= 0.0) {
            return Err(BusError::InvalidConfig("per-transfer overhead must be >= 0"));
        }
        Ok(())
    }
}

/// Milliseconds to move `size` bytes across the bus, setup cost included.
pub fn transfer_time(size: u64, config: &BusConfig) -> f64 {
    let effective = config.raw_bandwidth_bps * config.protocol_efficiency;
    config.per_transfer_overhead_ms + (size as f64 * 8.0) / effective * 1000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub t_compute_ms: f64,
    pub t_host_ms: f64,
    pub t_contend_ms: f64,
    pub frame_bytes: u64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), BusError> {
        if !(self.t_compute_ms > 0.0) {
            return Err(BusError::InvalidProfile("t_compute must be > 0"));
        }
        if !(self.t_host_ms >= 0.0 && self.t_contend_ms >= 0.0) {
            return Err(BusError::InvalidProfile("time parameters must be >= 0"));
        }
        Ok(())
    }

    /// Per-frame wall time in milliseconds with `n` devices attached.
    pub fn frame_time_ms(&self, n: usize, config: &BusConfig) -> f64 {
        let n = n as f64;
        let tx = transfer_time(self.frame_bytes, config);
        self.t_compute_ms + n * (tx + self.t_host_ms) + n * n * self.t_contend_ms
    }
}

pub fn predict_fps(profile: &DeviceProfile, n_devices: usize, config: &BusConfig) -> Result<f64, BusError> {
    if n_devices < 1 {
        return Err(BusError::InvalidDeviceCount(n_devices));
    }
    profile.validate()?;
    config.validate()?;
    Ok(1000.0 / profile.frame_time_ms(n_devices, config))
}

// ---------------------------------------------------------------------------
// calibration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub n: u32,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub profile: DeviceProfile,
    /// RMS error of the fit in per-frame time, milliseconds.
    pub residual_rms_ms: f64,
    /// Parameters the unconstrained optimum wanted negative, pinned at zero.
    pub clamped: Vec<String>,
}

const PARAM_NAMES: [&str; 3] = ["t_compute", "t_host", "t_contend"];

/// Fits `t_compute`, `t_host` and `t_contend` by non-negative least squares
/// on per-frame times `1000 / fps`. The transfer term is fixed by the bus
/// configuration and `frame_bytes`.
pub fn calibrate(
    name: &str,
    measurements: &[Measurement],
    config: &BusConfig,
    frame_bytes: u64,
) -> Result<Calibration, BusError> {
    config.validate()?;
    for m in measurements {
        if m.n == 0 || !(m.fps > 0.0) || !m.fps.is_finite() {
            return Err(BusError::InvalidMeasurement { n: m.n, fps: m.fps });
        }
    }
    let mut distinct: Vec<u32> = measurements.iter().map(|m| m.n).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(BusError::InsufficientData(distinct.len()));
    }

    let tx = transfer_time(frame_bytes, config);
    // y_i = T_i - n_i * t_tx = a + n_i * h + n_i^2 * c
    let rows: Vec<([f64; 3], f64)> = measurements
        .iter()
        .map(|m| {
            let n = m.n as f64;
            ([1.0, n, n * n], 1000.0 / m.fps - n * tx)
        })
        .collect();

    let unconstrained = solve_subset(&rows, 0b111);
    let (params, clamped) = match unconstrained {
        Some(p) if p.iter().all(|&v| v >= 0.0) => (p, Vec::new()),
        _ => {
            // Three parameters: enumerate every active set and keep the best
            // feasible one, which is the exact NNLS optimum.
            let best = (1u8..8)
                .filter_map(|mask| solve_subset(&rows, mask))
                .filter(|p| p.iter().all(|&v| v >= 0.0))
                .min_by(|a, b| sse(&rows, a).total_cmp(&sse(&rows, b)))
                .ok_or_else(|| BusError::NoNonNegativeFit("no feasible subset".into()))?;
            let clamped = match unconstrained {
                Some(u) => (0..3)
                    .filter(|&i| u[i] < 0.0)
                    .map(|i| PARAM_NAMES[i].to_string())
                    .collect(),
                None => (0..3)
                    .filter(|&i| best[i] == 0.0)
                    .map(|i| PARAM_NAMES[i].to_string())
                    .collect(),
            };
            (best, clamped)
        }
    };
    if !(params[0] > 0.0) {
        return Err(BusError::NoNonNegativeFit(format!(
            "best fit has t_compute = {}",
            params[0]
        )));
    }
    let residual_rms_ms = (sse(&rows, &params) / rows.len() as f64).sqrt();
    Ok(Calibration {
        profile: DeviceProfile {
            name: name.to_string(),
            t_compute_ms: params[0],
            t_host_ms: params[1],
            t_contend_ms: params[2],
            frame_bytes,
        },
        residual_rms_ms,
        clamped,
    })
}

fn sse(rows: &[([f64; 3], f64)], p: &[f64; 3]) -> f64 {
    rows.iter()
        .map(|(x, y)| {
            let r = x[0] * p[0] + x[1] * p[1] + x[2] * p[2] - y;
            r * r
        })
        .sum()
}

/// Least squares restricted to the parameters selected by `mask`; the rest
/// are held at zero. `None` when the normal equations are singular.
fn solve_subset(rows: &[([f64; 3], f64)], mask: u8) -> Option<[f64; 3]> {
    let idx: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
    let k = idx.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (x, y) in rows {
        for (r, &i) in idx.iter().enumerate() {
            for (c, &j) in idx.iter().enumerate() {
                a[r][c] += x[i] * x[j];
            }
            a[r][k] += x[i] * y;
        }
    }
    let sol = gauss_solve(a)?;
    let mut out = [0.0; 3];
    for (r, &i) in idx.iter().enumerate() {
        out[i] = sol[r];
    }
    Some(out)
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn gauss_solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let k = a.len();
    for col in 0..k {
        let pivot = (col..k).max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for r in col + 1..k {
            let f = a[r][col] / a[col][col];
            for c in col..=k {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let s: f64 = (r + 1..k).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][k] - s) / a[r][r];
    }
    Some(x)
}

/// Parses an `n,fps` table with a header row.
pub fn parse_table_csv(text: &str) -> Result<Vec<Measurement>, BusError> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| BusError::BadTable("empty".into()))?;
    let cols: Vec<_> = header.split(',').map(str::trim).collect();
    if cols != ["n", "fps"] {
        return Err(BusError::BadTable(format!("expected header `n,fps`, got `{header}`")));
    }
    lines
        .map(|line| {
            let (n, fps) = line
                .split_once(',')
                .ok_or_else(|| BusError::BadTable(format!("bad row `{line}`")))?;
            Ok(Measurement {
                n: n.trim().parse().map_err(|_| BusError::BadTable(format!("bad n in `{line}`")))?,
                fps: fps.trim().parse().map_err(|_| BusError::BadTable(format!("bad fps in `{line}`")))?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// event queue

/// Pending events ordered by time, then by insertion order.
#[derive(Debug)]
pub struct EventQueue<T, E> {
    now: T,
    next_seq: u64,
    pending: BinaryHeap<Reverse<Entry<T, E>>>,
}

#[derive(Debug)]
struct Entry<T, E> {
    at: T,
    seq: u64,
    event: E,
}

impl<T: Ord, E> PartialEq for Entry<T, E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<T: Ord, E> Eq for Entry<T, E> {}

impl<T: Ord, E> PartialOrd for Entry<T, E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Ord, E> Ord for Entry<T, E> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.at.cmp(&other.at).then(self.seq.cmp(&other.seq))
    }
}

impl<T: Ord + Copy + std::fmt::Debug, E> EventQueue<T, E> {
    pub fn new(start: T) -> Self {
        EventQueue {
            now: start,
            next_seq: 0,
            pending: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> T {
        self.now
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn peek_time(&self) -> Option<T> {
        self.pending.peek().map(|Reverse(e)| e.at)
    }

    pub fn schedule(&mut self, at: T, event: E) -> Result<(), BusError> {
        if at < self.now {
            return Err(BusError::ScheduleInPast {
                at: format!("{at:?}"),
                now: format!("{:?}", self.now),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push(Reverse(Entry { at, seq, event }));
        Ok(())
    }

    /// Pops the earliest event and advances the clock to it.
    pub fn step(&mut self) -> Option<(T, E)> {
        let Reverse(entry) = self.pending.pop()?;
        self.now = entry.at;
        Some((entry.at, entry.event))
    }

    /// Moves the clock forward without popping; never moves it back.
    pub fn advance_to(&mut self, t: T) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Drops every pending event for which `keep` returns false.
    pub fn retain(&mut self, mut keep: impl FnMut(&E) -> bool) {
        let items = std::mem::take(&mut self.pending).into_vec();
        self.pending = items.into_iter().filter(|Reverse(e)| keep(&e.event)).collect();
    }

    pub fn iter(&self) -> impl Iterator<Item = (T, &E)> {
        self.pending.iter().map(|Reverse(e)| (e.at, &e.event))
    }
}

/// Totally ordered milliseconds for the bus simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Millis(pub f64);

impl Eq for Millis {}

impl PartialOrd for Millis {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Millis {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

// ---------------------------------------------------------------------------
// broadcast simulation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum BusEvent {
    FrameStart { frame: u64 },
    HostPrepDone { frame: u64, device: u32 },
    TransferDone { frame: u64, device: u32 },
    ComputeDone { frame: u64, device: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub at_ms: f64,
    #[serde(flatten)]
    pub event: BusEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadcastRun {
    pub fps: f64,
    pub makespan_ms: f64,
    pub frames: u64,
    pub trace: Vec<TraceEntry>,
}

/// Event-driven broadcast load test: each frame is pushed to all `n` devices.
///
/// The host prepares and drives one transfer at a time; the bus carries one
/// transfer at a time, each slowed by `n * t_contend` of arbitration; devices
/// compute in parallel once their copy has landed. The next frame starts when
/// the slowest device reports back (batch size 1 per device).
pub fn simulate_broadcast(
    profile: &DeviceProfile,
    n_devices: usize,
    n_frames: u64,
    config: &BusConfig,
) -> Result<BroadcastRun, BusError> {
    if n_devices < 1 {
        return Err(BusError::InvalidDeviceCount(n_devices));
    }
    if n_frames < 1 {
        return Err(BusError::InvalidFrameCount);
    }
    profile.validate()?;
    config.validate()?;

    let n = n_devices as u32;
    let per_transfer = transfer_time(profile.frame_bytes, config) + n as f64 * profile.t_contend_ms;
    let mut queue: EventQueue<Millis, BusEvent> = EventQueue::new(Millis(0.0));
    let mut trace = Vec::new();
    let mut outstanding = 0u32;
    let mut frames_done = 0u64;

    queue.schedule(Millis(0.0), BusEvent::FrameStart { frame: 0 })?;
    while let Some((Millis(t), ev)) = queue.step() {
        trace.push(TraceEntry { at_ms: t, event: ev });
        match ev {
            BusEvent::FrameStart { frame } => {
                outstanding = n;
                queue.schedule(
                    Millis(t + profile.t_host_ms),
                    BusEvent::HostPrepDone { frame, device: 0 },
                )?;
            }
            BusEvent::HostPrepDone { frame, device } => {
                queue.schedule(Millis(t + per_transfer), BusEvent::TransferDone { frame, device })?;
            }
            BusEvent::TransferDone { frame, device } => {
                queue.schedule(
                    Millis(t + profile.t_compute_ms),
                    BusEvent::ComputeDone { frame, device },
                )?;
                // bus and host are free again: drive the next device
                if device + 1 < n {
                    queue.schedule(
                        Millis(t + profile.t_host_ms),
                        BusEvent::HostPrepDone { frame, device: device + 1 },
                    )?;
                }
            }
            BusEvent::ComputeDone { frame, .. } => {
                outstanding -= 1;
                if outstanding == 0 {
                    frames_done += 1;
                    if frames_done < n_frames {
                        queue.schedule(Millis(t), BusEvent::FrameStart { frame: frame + 1 })?;
                    }
                }
            }
        }
    }
    let makespan_ms = queue.now().0;
    Ok(BroadcastRun {
        fps: frames_done as f64 * 1000.0 / makespan_ms,
        makespan_ms,
        frames: frames_done,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ideal(efficiency: f64, overhead: f64) -> BusConfig {
        BusConfig {
            raw_bandwidth_bps: 5e9,
            per_transfer_overhead_ms: overhead,
            protocol_efficiency: efficiency,
        }
    }

    #[test]
    fn transfer_time_examples() {
        assert_eq!(transfer_time(0, &ideal(1.0, 0.0)), 0.0);
        assert!((transfer_time(1_000_000, &ideal(1.0, 0.0)) - 1.6).abs() < 1e-12);
        assert!((transfer_time(1_000_000, &ideal(0.8, 0.1)) - 2.1).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(BusConfig::default().validate().is_ok());
        assert!(ideal(0.0, 0.0).validate().is_err());
        assert!(ideal(1.1, 0.0).validate().is_err());
        assert!(ideal(1.0, -1.0).validate().is_err());
    }

    #[test]
    fn predict_rejects_zero_devices() {
        let p = DeviceProfile {
            name: "x".into(),
            t_compute_ms: 10.0,
            t_host_ms: 1.0,
            t_contend_ms: 0.0,
            frame_bytes: 0,
        };
        assert_eq!(
            predict_fps(&p, 0, &BusConfig::default()),
            Err(BusError::InvalidDeviceCount(0))
        );
        assert!((predict_fps(&p, 2, &BusConfig::default()).unwrap() - 1000.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q: EventQueue<u64, &str> = EventQueue::new(0);
        q.schedule(5, "late").unwrap();
        q.schedule(3, "early").unwrap();
        q.schedule(7, "a").unwrap();
        q.schedule(7, "b").unwrap();
        assert_eq!(q.step(), Some((3, "early")));
        assert_eq!(q.now(), 3);
        assert_eq!(q.step(), Some((5, "late")));
        assert_eq!(q.step(), Some((7, "a")));
        assert_eq!(q.step(), Some((7, "b")));
        assert_eq!(q.step(), None);
        assert!(matches!(q.schedule(1, "past"), Err(BusError::ScheduleInPast { .. })));
    }

    #[test]
    fn calibration_needs_three_points() {
        let m = [Measurement { n: 1, fps: 10.0 }, Measurement { n: 2, fps: 9.0 }, Measurement { n: 2, fps: 9.0 }];
        assert_eq!(
            calibrate("x", &m, &BusConfig::default(), 0),
            Err(BusError::InsufficientData(2))
        );
        let bad = [Measurement { n: 1, fps: 0.0 }];
        assert!(matches!(
            calibrate("x", &bad, &BusConfig::default(), 0),
            Err(BusError::InvalidMeasurement { .. })
        ));
    }

    #[test]
    fn table_parsing() {
        let m = parse_table_csv("n,fps\n1,15\n2,13.5\n").unwrap();
        assert_eq!(m, vec![Measurement { n: 1, fps: 15.0 }, Measurement { n: 2, fps: 13.5 }]);
        assert!(parse_table_csv("a,b\n1,2").is_err());
        assert!(parse_table_csv("n,fps\n1;2").is_err());
    }
}
