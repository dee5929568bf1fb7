//! The control plane: owns the kernel, applies validated commands and fans
//! observer events out to subscribers.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{broadcast, watch};
use tokio::task::JoinHandle;

use champ::cartridge::{Catalog, CatalogError};
use champ::gallery::{decrypt_gallery, EncryptedGallery, Gallery, CONTAINER_MAGIC};
use champ::kernel::{
    validate_permutation, HotplugKind, Kernel, KernelCommand, KernelConfig, KernelError, KernelEvent, Phase,
    SourceConfig, StageRole,
};
use champ::scenario::{CartridgeFactory, Scenario, ScenarioKind};
use champ::SimTime;

use crate::api::{ControlCommand, MetricsTick, Placeholder, RejectReason, ServerEvent, StageInfo, TopologySnapshot};

pub const DEFAULT_METRICS_INTERVAL: SimTime = SimTime::from_millis(500);
pub const DEFAULT_EVENT_CAPACITY: usize = 1024;
pub const MAX_SOURCE_FPS: f64 = 1000.0;
const REPLY_CACHE: usize = 4096;

#[derive(Debug, Error)]
pub enum PlaneError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("source fps must be in (0, {MAX_SOURCE_FPS}], got {0}")]
    BadFps(f64),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub catalog: Catalog,
    pub seed: u64,
    /// Presets plugged into slots 0.. at boot.
    pub initial: Vec<String>,
    pub source_fps: f64,
    pub metrics_interval: SimTime,
    /// Per-subscriber backlog before it is dropped as lagging.
    pub event_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            catalog: Catalog::builtin(),
            seed: 0,
            initial: Vec::new(),
            source_fps: 30.0,
            metrics_interval: DEFAULT_METRICS_INTERVAL,
            event_capacity: DEFAULT_EVENT_CAPACITY,
        }
    }
}

struct State {
    kernel: Kernel,
    factory: CartridgeFactory,
    /// Preset each cartridge was built from, by cartridge id.
    presets: HashMap<u64, String>,
    replies: HashMap<String, ServerEvent>,
    reply_order: VecDeque<String>,
    seq: u64,
    metrics_interval: SimTime,
    next_metrics: SimTime,
    window_start: SimTime,
    window_count: u64,
    window_latency: SimTime,
    fps: f64,
    latency_ms: Option<f64>,
    shutting_down: bool,
}

struct Shared {
    state: Mutex<State>,
    events: broadcast::Sender<ServerEvent>,
    snapshot: watch::Sender<Arc<TopologySnapshot>>,
    shutdown: watch::Sender<bool>,
}

#[derive(Clone)]
pub struct ControlPlane {
    shared: Arc<Shared>,
}

type Rejection = (RejectReason, String);

impl ControlPlane {
    pub fn new(config: ServiceConfig) -> Result<Self, PlaneError> {
        if !(config.source_fps > 0.0 && config.source_fps <= MAX_SOURCE_FPS) {
            return Err(PlaneError::BadFps(config.source_fps));
        }
        let mut factory = CartridgeFactory::new(config.catalog, config.seed);
        let mut presets = HashMap::new();
        let mut plugged = Vec::new();
        for (slot, name) in config.initial.iter().enumerate() {
            let c = factory.make(name)?;
            presets.insert(c.id(), name.clone());
            plugged.push((slot as u32, c));
        }
        let mut kc = KernelConfig::default();
        kc.source.period = SourceConfig::period_for_fps(config.source_fps);
        let kernel = Kernel::boot(kc, plugged)?;
        let state = State {
            kernel,
            factory,
            presets,
            replies: HashMap::new(),
            reply_order: VecDeque::new(),
            seq: 0,
            metrics_interval: config.metrics_interval.max(SimTime::from_millis(1)),
            next_metrics: config.metrics_interval,
            window_start: SimTime::ZERO,
            window_count: 0,
            window_latency: SimTime::ZERO,
            fps: 0.0,
            latency_ms: None,
            shutting_down: false,
        };
        let first = Arc::new(topology(&state, None));
        let (events, _) = broadcast::channel(config.event_capacity.max(1));
        let (snapshot, _) = watch::channel(first);
        let (shutdown, _) = watch::channel(false);
        Ok(ControlPlane {
            shared: Arc::new(Shared {
                state: Mutex::new(state),
                events,
                snapshot,
                shutdown,
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.shared.state.lock().expect("control plane state poisoned")
    }

    pub fn now(&self) -> SimTime {
        self.lock().kernel.now()
    }

    /// Advances simulated time, emitting events as they happen.
    pub fn advance_to(&self, target: SimTime) {
        let mut st = self.lock();
        self.advance_locked(&mut st, target);
    }

    pub fn advance_by(&self, d: SimTime) {
        let mut st = self.lock();
        let target = st.kernel.now() + d;
        self.advance_locked(&mut st, target);
    }

    /// Drives simulated time from the wall clock until shutdown.
    pub fn spawn_clock(&self, tick: Duration) -> JoinHandle<()> {
        let plane = self.clone();
        tokio::spawn(async move {
            let base = plane.now();
            let start = Instant::now();
            let mut shutdown = plane.shutdown_signal();
            let mut interval = tokio::time::interval(tick);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
            loop {
                tokio::select! {
                    _ = interval.tick() => {
                        let elapsed = SimTime::from_micros(start.elapsed().as_micros() as u64);
                        plane.advance_to(base + elapsed);
                    }
                    _ = shutdown.changed() => break,
                }
                if *shutdown.borrow() {
                    break;
                }
            }
        })
    }

    pub fn shutdown_signal(&self) -> watch::Receiver<bool> {
        self.shared.shutdown.subscribe()
    }

    pub fn is_shutting_down(&self) -> bool {
        *self.shared.shutdown.borrow()
    }

    /// Latest snapshot, refreshed on topology changes and metrics ticks.
    pub fn watch_topology(&self) -> watch::Receiver<Arc<TopologySnapshot>> {
        self.shared.snapshot.subscribe()
    }

    /// A fresh snapshot event tagged with the current sequence number.
    pub fn snapshot(&self) -> ServerEvent {
        let st = self.lock();
        let payload = topology(&st, None);
        ServerEvent::Topology {
            seq: st.seq,
            ts_ms: payload.ts_ms,
            cause: json!("request"),
            payload,
        }
    }

    /// Snapshot plus a receiver for everything emitted after it.
    pub fn subscribe(&self) -> (ServerEvent, broadcast::Receiver<ServerEvent>) {
        let st = self.lock();
        let rx = self.shared.events.subscribe();
        let payload = topology(&st, None);
        let ev = ServerEvent::Topology {
            seq: st.seq,
            ts_ms: payload.ts_ms,
            cause: json!("request"),
            payload,
        };
        (ev, rx)
    }

    /// Validates and applies a command. A repeated `request_id` gets the
    /// original reply and has no further effect.
    pub fn apply(&self, request_id: Option<String>, command: ControlCommand) -> ServerEvent {
        let mut st = self.lock();
        if let Some(reply) = request_id.as_ref().and_then(|id| st.replies.get(id)) {
            return reply.clone();
        }
        let name = command.name();
        let reply = match self.execute(&mut st, command) {
            Ok(mut payload) => {
                payload["command"] = json!(name);
                ServerEvent::Ack {
                    request_id: request_id.clone(),
                    payload,
                }
            }
            Err((reason, message)) => ServerEvent::Reject {
                request_id: request_id.clone(),
                reason,
                message,
            },
        };
        if let Some(id) = request_id {
            if st.reply_order.len() >= REPLY_CACHE {
                if let Some(old) = st.reply_order.pop_front() {
                    st.replies.remove(&old);
                }
            }
            st.reply_order.push_back(id.clone());
            st.replies.insert(id, reply.clone());
        }
        // take effect at the current instant so the reply and state agree
        let now = st.kernel.now();
        self.advance_locked(&mut st, now);
        reply
    }

    fn execute(&self, st: &mut State, command: ControlCommand) -> Result<Value, Rejection> {
        if st.shutting_down {
            return Err((RejectReason::ShuttingDown, "service is shutting down".into()));
        }
        let now = st.kernel.now();
        let projected = st.kernel.projected_slots();
        match command {
            ControlCommand::Insert { slot, preset } => {
                if projected.contains(&slot) {
                    return Err((RejectReason::OccupiedSlot, format!("slot {slot} is occupied")));
                }
                let cartridge = st
                    .factory
                    .make(&preset)
                    .map_err(|e| (RejectReason::UnknownPreset, e.to_string()))?;
                let id = cartridge.id();
                st.presets.insert(id, preset.clone());
                schedule(st, now, KernelCommand::Hotplug(HotplugKind::Insert {
                    slot,
                    cartridge: Box::new(cartridge),
                }))?;
                Ok(json!({"slot": slot, "preset": preset, "cartridge_id": id}))
            }
            ControlCommand::Remove { slot } => {
                if !projected.contains(&slot) {
                    return Err((RejectReason::EmptySlot, format!("slot {slot} is empty")));
                }
                schedule(st, now, KernelCommand::Hotplug(HotplugKind::Remove { slot }))?;
                Ok(json!({"slot": slot}))
            }
            ControlCommand::Reorder { assignments } => {
                let perm: Vec<(u32, u32)> = assignments.iter().map(|a| (a.from, a.to)).collect();
                validate_permutation(&projected, &perm).map_err(|e| (RejectReason::BadPermutation, e.to_string()))?;
                schedule(st, now, KernelCommand::Reorder(perm))?;
                Ok(json!({"assignments": assignments.len()}))
            }
            ControlCommand::SetSourceRate { fps } => {
                if !(fps > 0.0 && fps <= MAX_SOURCE_FPS) {
                    return Err((
                        RejectReason::BadRequest,
                        format!("fps must be in (0, {MAX_SOURCE_FPS}], got {fps}"),
                    ));
                }
                schedule(st, now, KernelCommand::SetSourceRate { fps })?;
                Ok(json!({"fps": fps}))
            }
            ControlCommand::LoadGallery { path, key_ref } => {
                let gallery =
                    load_gallery(Path::new(&path), key_ref.as_deref()).map_err(|e| (RejectReason::Gallery, e))?;
                let n = gallery.len();
                st.factory.set_gallery(Arc::new(gallery));
                Ok(json!({"templates": n}))
            }
            ControlCommand::RunScenario { path } => {
                let text = fs::read_to_string(&path).map_err(|e| (RejectReason::Scenario, format!("{path}: {e}")))?;
                let scenario = Scenario::from_json(&text).map_err(|e| (RejectReason::Scenario, e.to_string()))?;
                scenario.validate().map_err(|e| (RejectReason::Scenario, e.to_string()))?;
                // build every cartridge first so a bad preset schedules nothing
                let mut cmds = Vec::with_capacity(scenario.events.len());
                for e in &scenario.events {
                    let cmd = match e.kind {
                        ScenarioKind::Insert => {
                            let preset = e.preset.as_deref().unwrap_or_default();
                            let c = st
                                .factory
                                .make(preset)
                                .map_err(|err| (RejectReason::UnknownPreset, err.to_string()))?;
                            st.presets.insert(c.id(), preset.to_string());
                            KernelCommand::Hotplug(HotplugKind::Insert {
                                slot: e.slot.unwrap_or_default(),
                                cartridge: Box::new(c),
                            })
                        }
                        ScenarioKind::Remove => KernelCommand::Hotplug(HotplugKind::Remove {
                            slot: e.slot.unwrap_or_default(),
                        }),
                        ScenarioKind::SourceRateChange => KernelCommand::SetSourceRate {
                            fps: e.fps.unwrap_or_default(),
                        },
                    };
                    cmds.push((now + SimTime::from_millis(e.at_ms), cmd));
                }
                let n = cmds.len();
                for (at, cmd) in cmds {
                    schedule(st, at, cmd)?;
                }
                Ok(json!({"events": n, "starts_at_ms": now.as_millis_f64()}))
            }
            ControlCommand::Shutdown => {
                st.shutting_down = true;
                st.kernel.stop_source();
                self.shared.shutdown.send_replace(true);
                Ok(json!({}))
            }
        }
    }

    fn advance_locked(&self, st: &mut State, target: SimTime) {
        let target = target.max(st.kernel.now());
        loop {
            let mut t = target.min(st.next_metrics);
            if let Some(next) = st.kernel.next_event_time() {
                t = t.min(next);
            }
            let t = t.max(st.kernel.now());
            st.kernel.run_until(t);
            self.drain_locked(st);
            if t >= st.next_metrics {
                self.emit_metrics(st, t);
                st.next_metrics = t + st.metrics_interval;
            }
            if t >= target {
                break;
            }
        }
    }

    fn drain_locked(&self, st: &mut State) {
        for r in st.kernel.take_sink() {
            st.window_count += 1;
            st.window_latency += r.latency();
        }
        for ev in st.kernel.take_events() {
            let out = match ev {
                KernelEvent::PhaseChanged { at, phase } => {
                    let cause = json!({"phase": phase.label()});
                    self.topology_event(st, at, cause, Some(phase))
                }
                KernelEvent::Swap { at, outcome } => {
                    let cause = serde_json::to_value(&outcome).expect("outcome serializes");
                    self.topology_event(st, at, cause, None)
                }
                KernelEvent::Alert(alert) => {
                    st.seq += 1;
                    ServerEvent::Alert {
                        seq: st.seq,
                        ts_ms: alert.at.as_millis_f64(),
                        payload: alert,
                    }
                }
            };
            let _ = self.shared.events.send(out);
        }
    }

    fn topology_event(&self, st: &mut State, at: SimTime, cause: Value, phase: Option<Phase>) -> ServerEvent {
        let mut payload = topology(st, phase);
        payload.ts_ms = at.as_millis_f64();
        self.shared.snapshot.send_replace(Arc::new(payload.clone()));
        st.seq += 1;
        ServerEvent::Topology {
            seq: st.seq,
            ts_ms: at.as_millis_f64(),
            cause,
            payload,
        }
    }

    fn emit_metrics(&self, st: &mut State, t: SimTime) {
        let span = (t - st.window_start).as_millis_f64();
        st.fps = if span > 0.0 {
            st.window_count as f64 * 1000.0 / span
        } else {
            0.0
        };
        st.latency_ms = (st.window_count > 0).then(|| st.window_latency.as_millis_f64() / st.window_count as f64);
        st.window_start = t;
        st.window_count = 0;
        st.window_latency = SimTime::ZERO;
        let snap = topology(st, None);
        let tick = MetricsTick {
            phase: snap.phase.clone(),
            fps: snap.fps,
            latency_ms: snap.latency_ms,
            accepted: snap.accepted,
            delivered: snap.delivered,
            holdback: snap.holdback,
            link_depths: snap.link_depths.clone(),
        };
        self.shared.snapshot.send_replace(Arc::new(snap));
        st.seq += 1;
        let _ = self.shared.events.send(ServerEvent::Metrics {
            seq: st.seq,
            ts_ms: t.as_millis_f64(),
            payload: tick,
        });
    }
}

fn schedule(st: &mut State, at: SimTime, cmd: KernelCommand) -> Result<(), Rejection> {
    st.kernel
        .schedule_command(at, cmd)
        .map_err(|e| (RejectReason::BadRequest, e.to_string()))
}

fn topology(st: &State, phase: Option<Phase>) -> TopologySnapshot {
    let snap = st.kernel.snapshot();
    let phase = phase.unwrap_or(snap.phase);
    let missing = match phase {
        Phase::Degraded { missing } => Some(missing),
        _ => None,
    };
    let catalog = st.factory.catalog();
    let ids: HashMap<u32, u64> = st.kernel.graph().stages.iter().map(|g| (g.slot, g.cartridge_id)).collect();
    let mut stages = Vec::new();
    let mut placeholders = Vec::new();
    for s in &snap.stages {
        match (s.role.clone(), s.cartridge_state) {
            (StageRole::Active, Some(state)) => stages.push(StageInfo {
                slot: s.slot,
                capability: s.capability,
                preset: ids
                    .get(&s.slot)
                    .and_then(|id| st.presets.get(id))
                    .cloned()
                    .or_else(|| catalog.name_for(s.capability).map(str::to_string)),
                state,
                bypassable: s.bypassable,
            }),
            (role, _) => placeholders.push(Placeholder {
                slot: s.slot,
                capability: s.capability,
                role,
            }),
        }
    }
    TopologySnapshot {
        ts_ms: snap.now.as_millis_f64(),
        phase: phase.label().to_string(),
        missing,
        stages,
        placeholders,
        alerts: snap
            .alerts
            .into_iter()
            .filter(|a| missing.is_some() && a.capability == missing)
            .collect(),
        link_depths: snap.stages.iter().map(|s| s.queue_depth).collect(),
        holdback: snap.holdback,
        fps: st.fps,
        latency_ms: st.latency_ms,
        accepted: snap.accepted,
        delivered: snap.delivered,
    }
}

/// Reads hex key material from `env:NAME` or `file:PATH`.
pub fn resolve_key(key_ref: &str) -> Result<Vec<u8>, String> {
    let text = if let Some(name) = key_ref.strip_prefix("env:") {
        std::env::var(name).map_err(|_| format!("environment variable {name} is not set"))?
    } else if let Some(path) = key_ref.strip_prefix("file:") {
        fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?
    } else {
        return Err(format!("key reference `{key_ref}` must start with env: or file:"));
    };
    hex::decode(text.trim()).map_err(|e| format!("key is not hex: {e}"))
}

/// Loads a gallery file: a sealed container (needs `key_ref`) or plaintext JSON.
pub fn load_gallery(path: &Path, key_ref: Option<&str>) -> Result<Gallery, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if bytes.starts_with(&CONTAINER_MAGIC) {
        let key_ref = key_ref.ok_or("sealed gallery needs a key_ref")?;
        let key = resolve_key(key_ref)?;
        let sealed = EncryptedGallery::from_bytes(&bytes).map_err(|e| e.to_string())?;
        decrypt_gallery(&sealed, &key).map_err(|e| e.to_string())
    } else if key_ref.is_some() {
        Err(format!("{} is not a sealed gallery but a key was given", path.display()))
    } else {
        Gallery::from_json(&bytes).map_err(|e| e.to_string())
    }
}
