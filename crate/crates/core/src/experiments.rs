//! Reproducible experiments: bus throughput scaling, pipeline latency,
//! hot-swap behaviour and the power estimate.
//!
//! Every run is a pure function of its inputs and seed. Reports serialize to
//! canonical JSON (sorted keys), so reruns are byte-identical.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bus::{self, BusConfig, BusError, Calibration, DeviceProfile, DEFAULT_FRAME_BYTES};
use crate::cartridge::{splitmix64, Cartridge, Catalog, CatalogError};
use crate::kernel::{Kernel, KernelConfig, KernelEvent, SinkRecord, SwapCause, SwapOutcome, HANDOFF};
use crate::protocol::{CapabilityId, LatencySpec};
use crate::scenario::{self, CartridgeFactory, Scenario, ScenarioError};
use crate::time::SimTime;

pub const NCS2_TABLE: [f64; 5] = [15.0, 13.0, 10.0, 8.0, 6.0];
pub const CORAL_TABLE: [f64; 5] = [25.0, 22.0, 19.0, 17.0, 15.0];
pub const FPS_TOLERANCE: f64 = 1.0;
/// Pipeline fill excluded from latency statistics.
pub const WARMUP_FRAMES: usize = 20;
pub const REMOVAL_PAUSE_LIMIT: SimTime = SimTime::from_millis(500);
pub const INSERTION_PAUSE_LIMIT: SimTime = SimTime::from_millis(2000);
pub const LATENCY_BAND_MS: (f64, f64) = (90.0, 100.0);
pub const OVERHEAD_LIMIT: f64 = 0.10;
pub const HANDOFF_LIMIT: f64 = 0.05;
pub const DEFAULT_SCALING_FRAMES: u64 = 300;
pub const DEFAULT_LATENCY_FRAMES: u64 = 500;

const NCS2_CSV: &str = include_str!("../fixtures/table1_ncs2.csv");
const CORAL_CSV: &str = include_str!("../fixtures/table1_coral.csv");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("bad parameter: {0}")]
    BadParameter(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub name: String,
    /// Where the expected value comes from.
    pub source: String,
    pub expected: Value,
    pub observed: Value,
    pub tolerance: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: &Value| match v {
            Value::String(s) => s.clone(),
            Value::Null => String::new(),
            other => other.to_string(),
        };
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(cell).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub parameters: Value,
    pub metrics: Value,
    pub summary: Table,
    pub expectations: Vec<Expectation>,
    pub passed: bool,
}

impl ExperimentReport {
    fn new(name: &str, seed: u64, parameters: Value, metrics: Value, summary: Table, expectations: Vec<Expectation>) -> Self {
        let passed = expectations.iter().all(|e| e.pass);
        ExperimentReport {
            name: name.to_string(),
            seed,
            parameters,
            metrics,
            summary,
            expectations,
            passed,
        }
    }

    /// Canonical JSON: keys sorted, pretty printed, trailing newline.
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        self.summary.to_csv()
    }
}

fn expect(name: &str, source: &str, expected: Value, observed: Value, tolerance: &str, pass: bool) -> Expectation {
    Expectation {
        name: name.to_string(),
        source: source.to_string(),
        expected,
        observed,
        tolerance: tolerance.to_string(),
        pass,
    }
}

/// Rounds for reporting so tiny float noise never reaches the JSON.
fn r6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

// ---------------------------------------------------------------------------
// profiles

pub fn reference_table(profile: &str) -> Option<&'static [f64; 5]> {
    match profile {
        "ncs2" => Some(&NCS2_TABLE),
        "coral" => Some(&CORAL_TABLE),
        _ => None,
    }
}

/// The two reference accelerators calibrated from their measured tables
/// under the default bus configuration.
pub fn builtin_profiles() -> Result<BTreeMap<String, Calibration>, BusError> {
    let config = BusConfig::default();
    let mut out = BTreeMap::new();
    for (name, csv) in [("ncs2", NCS2_CSV), ("coral", CORAL_CSV)] {
        let table = bus::parse_table_csv(csv)?;
        out.insert(name.to_string(), bus::calibrate(name, &table, &config, DEFAULT_FRAME_BYTES)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// scaling

pub fn run_scaling_named(
    name: &str,
    profiles: &BTreeMap<String, DeviceProfile>,
    n_range: &[usize],
    frames: u64,
    seed: u64,
) -> Result<ExperimentReport, ExperimentError> {
    let profile = profiles
        .get(name)
        .ok_or_else(|| ExperimentError::UnknownProfile(name.to_string()))?;
    run_scaling(profile, n_range, frames, &BusConfig::default(), seed)
}

/// Broadcast load test for each device count in `n_range`.
pub fn run_scaling(
    profile: &DeviceProfile,
    n_range: &[usize],
    frames: u64,
    config: &BusConfig,
    seed: u64,
) -> Result<ExperimentReport, ExperimentError> {
    if n_range.is_empty() {
        return Err(ExperimentError::BadParameter("empty device range".into()));
    }
    let reference = reference_table(&profile.name);
    let mut table = Table::new(&["profile", "n", "fps_simulated", "fps_model", "reference_fps"]);
    let mut expectations = Vec::new();
    let mut rows = Vec::new();
    let mut fps_by_n = BTreeMap::new();
    for &n in n_range {
        let run = bus::simulate_broadcast(profile, n, frames, config)?;
        let model = bus::predict_fps(profile, n, config)?;
        let refv = reference.and_then(|t| t.get(n.wrapping_sub(1)).copied());
        fps_by_n.insert(n, run.fps);
        table.rows.push(vec![
            json!(profile.name),
            json!(n),
            json!(r6(run.fps)),
            json!(r6(model)),
            refv.map_or(Value::Null, |v| json!(v)),
        ]);
        rows.push(json!({
            "n": n,
            "fps_simulated": r6(run.fps),
            "fps_model": r6(model),
            "makespan_ms": r6(run.makespan_ms),
        }));
        if let Some(r) = refv {
            expectations.push(expect(
                &format!("{} fps at n={n}", profile.name),
                &format!("published throughput table, {} column", profile.name),
                json!(r),
                json!(r6(run.fps)),
                "+-1 fps",
                (run.fps - r).abs() <= FPS_TOLERANCE,
            ));
        }
    }
    if let (Some(first), Some(last)) = (fps_by_n.get(&1), fps_by_n.get(&5)) {
        expectations.push(expect(
            &format!("{} sub-linear slowdown", profile.name),
            "fps(5) exceeds fps(1)/5",
            json!(r6(first / 5.0)),
            json!(r6(*last)),
            "strictly greater",
            *last > first / 5.0,
        ));
    }
    let tx = bus::transfer_time(profile.frame_bytes, config);
    Ok(ExperimentReport::new(
        "scaling",
        seed,
        json!({
            "profile": profile,
            "bus": config,
            "n_range": n_range,
            "frames": frames,
            "frame_bytes": profile.frame_bytes,
            "t_tx_ms": r6(tx),
        }),
        json!({ "rows": rows }),
        table,
        expectations,
    ))
}

// ---------------------------------------------------------------------------
// latency

fn latency_stage_presets(k: usize) -> Vec<&'static str> {
    match k {
        0 => vec![],
        1 => vec!["face-detect"],
        _ => {
            let mut v = vec!["face-detect"];
            v.extend(std::iter::repeat_n("face-quality", k - 2));
            v.push("face-embed");
            v
        }
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Multiset difference accepted - delivered - still held. Never negative.
pub fn frames_lost(accepted: &[u64], delivered: &[u64], held: &[u64]) -> u64 {
    let mut counts: BTreeMap<u64, i64> = BTreeMap::new();
    for s in accepted {
        *counts.entry(*s).or_default() += 1;
    }
    for s in delivered.iter().chain(held) {
        *counts.entry(*s).or_default() -= 1;
    }
    counts.values().filter(|&&c| c > 0).map(|&c| c as u64).sum()
}

fn lost_in(kernel: &Kernel) -> u64 {
    let delivered: Vec<u64> = kernel.sink().iter().map(|r| r.sequence).collect();
    frames_lost(kernel.accepted(), &delivered, &kernel.held_sequences())
}

/// Straight pipeline of stages with the given fixed per-frame means, fed
/// slowly enough that nothing queues.
pub fn run_latency(stage_means_ms: &[u32], frames: u64, seed: u64) -> Result<ExperimentReport, ExperimentError> {
    if frames == 0 {
        return Err(ExperimentError::BadParameter("frames must be >= 1".into()));
    }
    let catalog = Catalog::builtin();
    let mut plugged = Vec::new();
    for (i, (preset, &mean)) in latency_stage_presets(stage_means_ms.len()).iter().zip(stage_means_ms).enumerate() {
        if mean == 0 {
            return Err(ExperimentError::BadParameter("stage means must be > 0".into()));
        }
        let d = catalog.with_latency(preset, LatencySpec::fixed(mean))?;
        let id = i as u64 + 1;
        let c = Cartridge::new(id, d, splitmix64(seed ^ id)).map_err(|e| ExperimentError::BadParameter(e.to_string()))?;
        plugged.push((i as u32, c));
    }
    let slowest = stage_means_ms.iter().copied().max().unwrap_or(0) as u64;
    let period_ms = (slowest * 5).div_ceil(4).max(40);
    let mut config = KernelConfig::default();
    config.source.period = SimTime::from_millis(period_ms);
    config.source.max_frames = Some(frames);
    let mut kernel = Kernel::boot(config, plugged).map_err(ScenarioError::from)?;
    kernel.run_to_idle(SimTime::from_millis(period_ms * (frames + 10) + 60_000));

    let steady: Vec<&SinkRecord> = kernel.sink().iter().skip(WARMUP_FRAMES).collect();
    let mut lat: Vec<f64> = steady.iter().map(|r| r.latency().as_millis_f64()).collect();
    lat.sort_by(f64::total_cmp);
    let mean = if lat.is_empty() { 0.0 } else { lat.iter().sum::<f64>() / lat.len() as f64 };
    let sum_us: u64 = stage_means_ms.iter().map(|&m| m as u64 * 1000).sum();
    let sum_ms = sum_us as f64 / 1000.0;
    let hops = stage_means_ms.len().max(1) as u64;
    let handoff_us = hops * HANDOFF.as_micros();
    let overhead_ms = mean - sum_ms;
    let frac = |x: f64| if sum_ms > 0.0 { x / sum_ms } else { 0.0 };
    let analytic = sum_ms + handoff_us as f64 / 1000.0;
    let lost = lost_in(&kernel);

    let mut expectations = vec![
        expect(
            "frames_lost",
            "lossless backpressure",
            json!(0),
            json!(lost),
            "exact",
            lost == 0,
        ),
        expect(
            "delivery order",
            "per-stream ordering",
            json!(0),
            json!(kernel.order_violations()),
            "exact",
            kernel.order_violations() == 0,
        ),
        expect(
            "mean latency vs analytic",
            "sum of stage means plus one handoff per hop",
            json!(r6(analytic)),
            json!(r6(mean)),
            "+-0.001 ms",
            (mean - analytic).abs() <= 1e-3,
        ),
    ];
    if stage_means_ms == [30, 30, 30] {
        let (lo, hi) = LATENCY_BAND_MS;
        expectations.push(expect(
            "mean latency band",
            "reported three-stage pipeline latency",
            json!([lo, hi]),
            json!(r6(mean)),
            "inclusive band",
            (lo..=hi).contains(&mean),
        ));
        expectations.push(expect(
            "routing and handoff overhead",
            "overhead at most 10% of summed stage means",
            json!(OVERHEAD_LIMIT),
            json!(r6(frac(overhead_ms))),
            "<=",
            frac(overhead_ms) <= OVERHEAD_LIMIT + 1e-12,
        ));
        expectations.push(expect(
            "kernel handoff component",
            "buffer handoff about 5% of summed stage means",
            json!(HANDOFF_LIMIT),
            json!(r6(frac(handoff_us as f64 / 1000.0))),
            "<=",
            // integer comparison: 100 * handoff <= 5 * sum
            handoff_us * 100 <= sum_us * 5,
        ));
    }

    let mut table = Table::new(&["stages", "frames", "mean_ms", "p50_ms", "p95_ms", "p99_ms", "overhead_fraction", "handoff_fraction"]);
    table.rows.push(vec![
        json!(stage_means_ms.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("+")),
        json!(frames),
        json!(r6(mean)),
        json!(r6(percentile(&lat, 50.0))),
        json!(r6(percentile(&lat, 95.0))),
        json!(r6(percentile(&lat, 99.0))),
        json!(r6(frac(overhead_ms))),
        json!(r6(frac(handoff_us as f64 / 1000.0))),
    ]);
    Ok(ExperimentReport::new(
        "latency",
        seed,
        json!({
            "stage_means_ms": stage_means_ms,
            "frames": frames,
            "warmup_frames": WARMUP_FRAMES,
            "source_period_ms": period_ms,
            "handoff_ms": HANDOFF.as_millis_f64(),
        }),
        json!({
            "delivered": kernel.sink().len(),
            "accepted": kernel.accepted().len(),
            "frames_lost": lost,
            "latency_ms": {
                "mean": r6(mean),
                "min": r6(lat.first().copied().unwrap_or(0.0)),
                "max": r6(lat.last().copied().unwrap_or(0.0)),
                "p50": r6(percentile(&lat, 50.0)),
                "p95": r6(percentile(&lat, 95.0)),
                "p99": r6(percentile(&lat, 99.0)),
            },
            "sum_stage_means_ms": sum_ms,
            "overhead_ms": r6(overhead_ms),
            "overhead_fraction": r6(frac(overhead_ms)),
            "handoff_component_ms": handoff_us as f64 / 1000.0,
            "handoff_fraction": r6(frac(handoff_us as f64 / 1000.0)),
        }),
        table,
        expectations,
    ))
}

// ---------------------------------------------------------------------------
// hot-swap

fn trail_label(trail: &[CapabilityId]) -> String {
    let names: Vec<&str> = trail
        .iter()
        .filter(|c| **c != CapabilityId::PassThrough)
        .map(|c| c.name())
        .collect();
    if names.is_empty() {
        "(none)".into()
    } else {
        names.join(">")
    }
}

/// Plays a scenario and reports pauses, loss and what the frames went through.
pub fn run_hotswap(scenario: &Scenario, catalog: &Catalog, seed: u64) -> Result<ExperimentReport, ExperimentError> {
    let mut factory = CartridgeFactory::new(catalog.clone(), seed);
    let mut kernel = scenario::prepare(scenario, &mut factory, KernelConfig::default())?;

    // Step to each event time so degraded windows can be checked against the
    // frames that were already past the gap when it opened.
    let mut gaps = Vec::new();
    let mut times: Vec<u64> = scenario.events.iter().map(|e| e.at_ms).collect();
    times.sort_unstable();
    times.dedup();
    let mut events = Vec::new();
    for t in times {
        kernel.run_until(SimTime::from_millis(t));
        for ev in kernel.take_events() {
            if let KernelEvent::Swap {
                at,
                outcome: SwapOutcome::Degraded { slot, missing },
            } = &ev
            {
                gaps.push((*at, *slot, *missing, kernel.sink().len(), kernel.sequences_past(*slot)));
            }
            events.push(ev);
        }
    }
    let end = SimTime::from_millis(scenario.duration_ms);
    kernel.run_until(end);
    kernel.stop_source();
    kernel.run_to_idle(end + SimTime::from_millis(120_000));
    events.extend(kernel.take_events());

    let lost = lost_in(&kernel);
    let mut expectations = vec![
        expect("frames_lost", "no data lost across swaps", json!(0), json!(lost), "exact", lost == 0),
        expect(
            "delivery order",
            "per-stream ordering",
            json!(0),
            json!(kernel.order_violations()),
            "exact",
            kernel.order_violations() == 0,
        ),
    ];

    let mut pauses = Vec::new();
    let mut table = Table::new(&["cause", "slot", "start_ms", "pause_ms"]);
    for p in kernel.pauses() {
        let dur = p.duration();
        let (limit, label, source) = match p.cause {
            SwapCause::Removal => (Some(REMOVAL_PAUSE_LIMIT), "removal pause", "about half a second to bypass"),
            SwapCause::Insertion => (Some(INSERTION_PAUSE_LIMIT), "insertion pause", "about two seconds to reintegrate"),
            SwapCause::Reorder => (None, "reorder pause", ""),
        };
        let dur_ms = dur.map(|d| d.as_millis_f64());
        if let Some(limit) = limit {
            expectations.push(expect(
                &format!("{label} at {} ms", p.start.as_millis_f64()),
                source,
                json!(limit.as_millis_f64()),
                dur_ms.map_or(Value::Null, |d| json!(d)),
                "<=",
                dur.is_some_and(|d| d <= limit),
            ));
        }
        pauses.push(json!({
            "cause": p.cause,
            "slot": p.slot,
            "start_ms": p.start.as_millis_f64(),
            "pause_ms": dur_ms,
        }));
        table.rows.push(vec![
            json!(p.cause),
            p.slot.map_or(Value::Null, |s| json!(s)),
            json!(p.start.as_millis_f64()),
            dur_ms.map_or(Value::Null, |d| json!(d)),
        ]);
    }

    let mut degraded = Vec::new();
    for (at, slot, missing, sink_mark, past) in gaps {
        let resume = kernel
            .pauses()
            .iter()
            .find(|p| p.cause == SwapCause::Insertion && p.slot == Some(slot) && p.start >= at)
            .and_then(|p| p.end)
            .unwrap_or(SimTime::from_micros(u64::MAX));
        let leaked = kernel.sink()[sink_mark..]
            .iter()
            .filter(|r| r.delivered_at < resume)
            .filter(|r| !past.contains(&r.sequence) || !r.hop_trail.contains(&missing))
            .count();
        let alerted = kernel.alerts().iter().any(|a| a.at == at && a.capability == Some(missing));
        expectations.push(expect(
            &format!("no frames past gap in slot {slot}"),
            "halt and notify when a capability is missing",
            json!(0),
            json!(leaked),
            "exact",
            leaked == 0,
        ));
        expectations.push(expect(
            &format!("operator alert for slot {slot}"),
            "halt and notify when a capability is missing",
            json!(true),
            json!(alerted),
            "exact",
            alerted,
        ));
        degraded.push(json!({
            "at_ms": at.as_millis_f64(),
            "slot": slot,
            "missing": missing,
            "resumed_at_ms": (resume.as_micros() != u64::MAX).then(|| resume.as_millis_f64()),
            "in_flight_past_gap": past.len(),
        }));
    }

    let first_swap = kernel.pauses().first().map(|p| p.start);
    let mut histogram: BTreeMap<String, u64> = BTreeMap::new();
    for r in kernel.sink() {
        if first_swap.is_none_or(|t| r.accepted_at >= t) {
            *histogram.entry(trail_label(&r.hop_trail)).or_default() += 1;
        }
    }
    let phases: Vec<Value> = events
        .iter()
        .filter_map(|e| match e {
            KernelEvent::PhaseChanged { at, phase } => Some(json!({"at_ms": at.as_millis_f64(), "phase": phase.label()})),
            _ => None,
        })
        .collect();

    Ok(ExperimentReport::new(
        "hotswap",
        seed,
        json!({ "scenario": scenario }),
        json!({
            "accepted": kernel.accepted().len(),
            "delivered": kernel.sink().len(),
            "held_at_end": kernel.held_sequences().len(),
            "frames_lost": lost,
            "source_stalls": kernel.source_stalls(),
            "pauses": pauses,
            "phases": phases,
            "degraded": degraded,
            "alerts": kernel.alerts(),
            "post_swap_trails": histogram,
        }),
        table,
        expectations,
    ))
}

// ---------------------------------------------------------------------------
// power

/// Arithmetic extrapolation: devices times their draw plus the host.
pub fn estimate_power(n_devices: u32, watts_per_device: f64, host_watts: f64) -> f64 {
    n_devices as f64 * watts_per_device + host_watts
}

pub fn run_power(n_devices: u32, watts_per_device: f64, host_watts: f64, seed: u64) -> Result<ExperimentReport, ExperimentError> {
    if !(watts_per_device >= 0.0 && host_watts >= 0.0) {
        return Err(ExperimentError::BadParameter("wattages must be >= 0".into()));
    }
    let w = estimate_power(n_devices, watts_per_device, host_watts);
    let mut expectations = Vec::new();
    if n_devices == 5 && watts_per_device == 1.5 && host_watts == 2.5 {
        expectations.push(expect(
            "five-stick system power",
            "extrapolated system draw around 10 W",
            json!(10.0),
            json!(w),
            "+-1e-9 W",
            (w - 10.0).abs() <= 1e-9,
        ));
    }
    let mut table = Table::new(&["n_devices", "watts_per_device", "host_watts", "total_watts"]);
    table.rows.push(vec![json!(n_devices), json!(watts_per_device), json!(host_watts), json!(w)]);
    Ok(ExperimentReport::new(
        "power",
        seed,
        json!({"n_devices": n_devices, "watts_per_device": watts_per_device, "host_watts": host_watts}),
        json!({"total_watts": w, "note": "arithmetic estimate, not a measurement"}),
        table,
        expectations,
    ))
}
