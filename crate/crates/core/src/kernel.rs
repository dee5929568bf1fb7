//! Pipeline orchestration kernel.
//!
//! Cartridges are arranged as a linear pipeline in slot order. Every stage
//! owns a bounded input link; a producer may only hand an envelope over while
//! the link has both queue room and credit, otherwise it holds the envelope
//! and stalls. The source is throttled the same way, so nothing is ever
//! dropped.
//!
//! Structural changes (insert, remove, reorder) are applied one at a time from
//! a serialized command queue:
//!
//! * removing a bypassable stage swaps in a pass-through after a fixed
//!   reconfiguration pause;
//! * removing any other stage leaves a gap, raises an alert and puts the
//!   kernel in `Degraded` until the capability is re-inserted;
//! * inserting pauses for the reconfiguration budget plus the new cartridge's
//!   model load, then splices the stage in at its slot position.
//!
//! While paused, arriving envelopes go to the holdback queue and are replayed
//! through the new pipeline once it resumes.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{BusError, EventQueue};
use crate::cartridge::{pass_through, Cartridge, CartridgeError, CartridgeState};
use crate::protocol::{negotiate, CapabilityDescriptor, CapabilityId, DataFormat, FrameEnvelope, Negotiation};
use crate::time::SimTime;

/// Routing plus buffer handoff cost charged each time an envelope enters a link.
pub const HANDOFF: SimTime = SimTime::from_micros(1500);
pub const RECONFIGURE_BUDGET: SimTime = SimTime::from_millis(500);
pub const HOLDBACK_CAPACITY: usize = 256;
pub const DEFAULT_LINK_CAPACITY: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("two cartridges claim slot {0}")]
    DuplicateSlot(u32),
    #[error("slot {0} is empty")]
    EmptySlot(u32),
    #[error("slot {0} is occupied")]
    OccupiedSlot(u32),
    #[error("cartridge in slot {0} is not ready")]
    NotReady(u32),
    #[error("slot {upstream_slot} output {upstream} does not feed slot {downstream_slot} input {downstream}: {reason}")]
    FormatMismatch {
        upstream_slot: u32,
        downstream_slot: u32,
        upstream: DataFormat,
        downstream: DataFormat,
        reason: String,
    },
    #[error("unknown link {0}")]
    UnknownLink(usize),
    #[error("bad permutation: {0}")]
    BadPermutation(String),
    #[error("pipeline is degraded")]
    Degraded,
    #[error(transparent)]
    Cartridge(#[from] CartridgeError),
    #[error(transparent)]
    Schedule(#[from] BusError),
}

// ---------------------------------------------------------------------------
// enumeration and graph construction

/// Plugs each cartridge into its slot and runs the handshake at `now`.
pub fn enumerate(
    plugged: Vec<(u32, Cartridge)>,
    now: SimTime,
) -> Result<BTreeMap<u32, Cartridge>, KernelError> {
    let mut map = BTreeMap::new();
    for (slot, mut c) in plugged {
        if map.contains_key(&slot) {
            return Err(KernelError::DuplicateSlot(slot));
        }
        c.plug(slot)?;
        c.handshake(now)?;
        map.insert(slot, c);
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStage {
    pub slot: u32,
    pub cartridge_id: u64,
    pub descriptor: CapabilityDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphLink {
    pub producer: usize,
    pub consumer: usize,
    pub format: DataFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferPolicy {
    pub capacity: usize,
    pub credits: usize,
}

impl Default for BufferPolicy {
    fn default() -> Self {
        BufferPolicy {
            capacity: DEFAULT_LINK_CAPACITY,
            credits: DEFAULT_LINK_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineGraph {
    pub stages: Vec<GraphStage>,
    pub links: Vec<GraphLink>,
    pub buffer_policy: BufferPolicy,
}

fn check_link(
    up_slot: u32,
    up: &DataFormat,
    down_slot: u32,
    down: &DataFormat,
) -> Result<(), KernelError> {
    match negotiate(up, down) {
        Negotiation::Compatible => Ok(()),
        Negotiation::Incompatible(reason) => Err(KernelError::FormatMismatch {
            upstream_slot: up_slot,
            downstream_slot: down_slot,
            upstream: up.clone(),
            downstream: down.clone(),
            reason,
        }),
    }
}

/// Linear graph over the slot map in ascending slot order.
pub fn build_pipeline(
    slots: &BTreeMap<u32, Cartridge>,
    buffer_policy: BufferPolicy,
) -> Result<PipelineGraph, KernelError> {
    let mut stages = Vec::with_capacity(slots.len());
    for (&slot, c) in slots {
        if c.state() != CartridgeState::Ready {
            return Err(KernelError::NotReady(slot));
        }
        stages.push(GraphStage {
            slot,
            cartridge_id: c.id(),
            descriptor: c.descriptor().clone(),
        });
    }
    let mut links = Vec::with_capacity(stages.len().saturating_sub(1));
    for (i, pair) in stages.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        check_link(a.slot, &a.descriptor.output_format, b.slot, &b.descriptor.input_format)?;
        links.push(GraphLink {
            producer: i,
            consumer: i + 1,
            format: a.descriptor.output_format.clone(),
        });
    }
    Ok(PipelineGraph {
        stages,
        links,
        buffer_policy,
    })
}

// ---------------------------------------------------------------------------
// public state types

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    Running,
    Reconfiguring { deadline: SimTime },
    Degraded { missing: CapabilityId },
}

impl Phase {
    pub fn label(&self) -> &'static str {
        match self {
            Phase::Running => "running",
            Phase::Reconfiguring { .. } => "reconfiguring",
            Phase::Degraded { .. } => "degraded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub at: SimTime,
    pub slot: Option<u32>,
    pub capability: Option<CapabilityId>,
    pub message: String,
}

#[derive(Debug, Clone)]
pub enum HotplugKind {
    Insert { slot: u32, cartridge: Box<Cartridge> },
    Remove { slot: u32 },
}

#[derive(Debug, Clone)]
pub struct HotplugEvent {
    pub kind: HotplugKind,
    pub at: SimTime,
}

/// Anything that goes through the kernel's serialized command queue.
#[derive(Debug, Clone)]
pub enum KernelCommand {
    Hotplug(HotplugKind),
    /// `(from_slot, to_slot)` pairs; must permute a subset of occupied slots.
    Reorder(Vec<(u32, u32)>),
    SetSourceRate { fps: f64 },
    StopSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapCause {
    Removal,
    Insertion,
    Reorder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SwapOutcome {
    /// Stage replaced by a pass-through once the pause ends.
    Bypassed { slot: u32, resume_at: SimTime },
    /// Non-bypassable stage missing; pipeline halted past the gap.
    Degraded { slot: u32, missing: CapabilityId },
    /// New stage joins once its model is loaded and the pause ends.
    Integrating { slot: u32, resume_at: SimTime },
    Reordering { resume_at: SimTime },
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PauseRecord {
    pub cause: SwapCause,
    pub slot: Option<u32>,
    pub start: SimTime,
    pub end: Option<SimTime>,
}

impl PauseRecord {
    pub fn duration(&self) -> Option<SimTime> {
        self.end.map(|e| e - self.start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkRecord {
    pub stream_id: u32,
    pub sequence: u64,
    pub accepted_at: SimTime,
    pub delivered_at: SimTime,
    pub hop_trail: Vec<CapabilityId>,
}

impl SinkRecord {
    pub fn latency(&self) -> SimTime {
        self.delivered_at - self.accepted_at
    }
}

/// Notifications for observers of the kernel, in the order they happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum KernelEvent {
    PhaseChanged { at: SimTime, phase: Phase },
    Swap { at: SimTime, outcome: SwapOutcome },
    Alert(Alert),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageRole {
    Active,
    Bypassed,
    Gap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageView {
    pub slot: u32,
    pub capability: CapabilityId,
    pub role: StageRole,
    pub cartridge_state: Option<CartridgeState>,
    pub bypassable: bool,
    pub online: bool,
    pub queue_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSnapshot {
    pub now: SimTime,
    pub phase: Phase,
    pub stages: Vec<StageView>,
    pub holdback: usize,
    pub accepted: u64,
    pub delivered: u64,
    pub alerts: Vec<Alert>,
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub stream_id: u32,
    pub period: SimTime,
    pub format: DataFormat,
    pub payload_bytes: usize,
    /// Stop after this many accepted frames.
    pub max_frames: Option<u64>,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            stream_id: 1,
            period: SimTime::from_micros(33_333),
            format: DataFormat::image(640, 480, 3),
            payload_bytes: 64,
            max_frames: None,
        }
    }
}

impl SourceConfig {
    pub fn period_for_fps(fps: f64) -> SimTime {
        SimTime::from_millis_f64(1000.0 / fps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub handoff: SimTime,
    pub reconfigure_budget: SimTime,
    pub holdback_capacity: usize,
    pub buffer_policy: BufferPolicy,
    pub source: SourceConfig,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            handoff: HANDOFF,
            reconfigure_budget: RECONFIGURE_BUDGET,
            holdback_capacity: HOLDBACK_CAPACITY,
            buffer_policy: BufferPolicy::default(),
            source: SourceConfig::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// internals

#[derive(Debug)]
enum StageKind {
    Active(Box<Cartridge>),
    Bypass { removed: CapabilityDescriptor },
    Gap { missing: CapabilityDescriptor },
}

#[derive(Debug)]
enum Work {
    Idle,
    Busy {
        token: u64,
        input: FrameEnvelope,
        output: FrameEnvelope,
    },
    /// Finished output waiting for room downstream.
    Blocked(FrameEnvelope),
    /// Input taken back from a cartridge pulled mid-frame.
    Retained(FrameEnvelope),
}

#[derive(Debug)]
struct Link {
    queue: VecDeque<(SimTime, FrameEnvelope)>,
    capacity: usize,
    credits: usize,
    max_depth: usize,
}

impl Link {
    fn new(policy: BufferPolicy) -> Self {
        Link {
            queue: VecDeque::new(),
            capacity: policy.capacity,
            credits: policy.credits,
            max_depth: 0,
        }
    }

    fn has_room(&self) -> bool {
        self.queue.len() < self.capacity.min(self.credits)
    }

    fn push(&mut self, ready_at: SimTime, env: FrameEnvelope) {
        self.queue.push_back((ready_at, env));
        self.max_depth = self.max_depth.max(self.queue.len());
    }

    fn pop_ready(&mut self, now: SimTime) -> Option<FrameEnvelope> {
        match self.queue.front() {
            Some((t, _)) if *t <= now => self.queue.pop_front().map(|(_, e)| e),
            _ => None,
        }
    }
}

#[derive(Debug)]
struct Stage {
    slot: u32,
    kind: StageKind,
    online: bool,
    work: Work,
    input: Link,
}

impl Stage {
    fn descriptor(&self) -> &CapabilityDescriptor {
        match &self.kind {
            StageKind::Active(c) => c.descriptor(),
            StageKind::Bypass { removed } => removed,
            StageKind::Gap { missing } => missing,
        }
    }

    fn is_active(&self) -> bool {
        matches!(self.kind, StageKind::Active(_))
    }

    fn envelopes(&self) -> impl Iterator<Item = &FrameEnvelope> {
        let held = match &self.work {
            Work::Idle => None,
            Work::Busy { input, .. } => Some(input),
            Work::Blocked(e) | Work::Retained(e) => Some(e),
        };
        held.into_iter().chain(self.input.queue.iter().map(|(_, e)| e))
    }
}

#[derive(Debug)]
enum Event {
    SourceTick,
    StageDone { token: u64 },
    LinkReady,
    ReconfigDone { token: u64 },
    SinkArrival(FrameEnvelope),
    Command(Box<KernelCommand>),
}

#[derive(Debug)]
struct Source {
    next_seq: u64,
    period: SimTime,
    /// A frame is due but could not be admitted yet.
    stalled: bool,
    tick_token: u64,
    stopped: bool,
    stalls: u64,
}

#[derive(Debug)]
enum PendingSwap {
    Insert { slot: u32, cartridge: Box<Cartridge> },
    Bypass,
    Reorder { permutation: Vec<(u32, u32)>, awaiting_drain: bool },
}

/// Handle for feeding commands to a kernel from any thread. Commands are
/// picked up the next time the kernel advances.
#[derive(Debug, Clone, Default)]
pub struct CommandSender {
    inbox: Arc<Mutex<VecDeque<KernelCommand>>>,
}

impl CommandSender {
    pub fn send(&self, command: KernelCommand) {
        self.inbox.lock().expect("command inbox poisoned").push_back(command);
    }
}

pub struct Kernel {
    config: KernelConfig,
    queue: EventQueue<SimTime, Event>,
    stages: Vec<Stage>,
    phase: Phase,
    holdback: VecDeque<FrameEnvelope>,
    source: Source,
    accepted_at: BTreeMap<u64, SimTime>,
    accepted: Vec<u64>,
    sink: Vec<SinkRecord>,
    last_delivered: Option<(u32, u64)>,
    delivered_total: u64,
    order_violations: u64,
    alerts: Vec<Alert>,
    events: Vec<KernelEvent>,
    pauses: Vec<PauseRecord>,
    structural: VecDeque<KernelCommand>,
    pending: Option<(u64, PendingSwap)>,
    inbox: CommandSender,
    next_token: u64,
    sink_in_flight: usize,
}

impl Kernel {
    /// Boots an empty kernel. The source starts at t = 0.
    pub fn new(config: KernelConfig) -> Self {
        let period = config.source.period;
        let mut k = Kernel {
            config,
            queue: EventQueue::new(SimTime::ZERO),
            stages: Vec::new(),
            phase: Phase::Running,
            holdback: VecDeque::new(),
            source: Source {
                next_seq: 0,
                period,
                stalled: false,
                tick_token: 0,
                stopped: false,
                stalls: 0,
            },
            accepted_at: BTreeMap::new(),
            accepted: Vec::new(),
            sink: Vec::new(),
            last_delivered: None,
            delivered_total: 0,
            order_violations: 0,
            alerts: Vec::new(),
            events: Vec::new(),
            pauses: Vec::new(),
            structural: VecDeque::new(),
            pending: None,
            inbox: CommandSender::default(),
            next_token: 1,
            sink_in_flight: 0,
        };
        k.queue
            .schedule(SimTime::ZERO, Event::SourceTick)
            .expect("clock starts at zero");
        k
    }

    /// Enumerates `plugged`, lets every model finish loading before the stream
    /// starts, and builds the initial pipeline.
    pub fn boot(config: KernelConfig, plugged: Vec<(u32, Cartridge)>) -> Result<Self, KernelError> {
        let mut slots = enumerate(plugged, SimTime::ZERO)?;
        for c in slots.values_mut() {
            if let Some(t) = c.ready_at() {
                c.poll(t);
            }
        }
        build_pipeline(&slots, config.buffer_policy)?;
        let mut k = Kernel::new(config);
        k.stages = slots
            .into_values()
            .map(|c| Stage {
                slot: c.slot().expect("plugged cartridge has a slot"),
                kind: StageKind::Active(Box::new(c)),
                online: true,
                work: Work::Idle,
                input: Link::new(k.config.buffer_policy),
            })
            .collect();
        Ok(k)
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn command_sender(&self) -> CommandSender {
        self.inbox.clone()
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn pauses(&self) -> &[PauseRecord] {
        &self.pauses
    }

    pub fn sink(&self) -> &[SinkRecord] {
        &self.sink
    }

    /// Removes and returns the delivery records collected so far.
    pub fn take_sink(&mut self) -> Vec<SinkRecord> {
        std::mem::take(&mut self.sink)
    }

    /// Deliveries since boot, including records already taken.
    pub fn delivered_total(&self) -> u64 {
        self.delivered_total
    }

    /// Sequence numbers accepted from the source, in acceptance order.
    pub fn accepted(&self) -> &[u64] {
        &self.accepted
    }

    pub fn order_violations(&self) -> u64 {
        self.order_violations
    }

    pub fn source_stalls(&self) -> u64 {
        self.source.stalls
    }

    pub fn holdback_len(&self) -> usize {
        self.holdback.len()
    }

    /// Largest queue depth each stage input link has seen.
    pub fn max_link_depths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.input.max_depth).collect()
    }

    /// Slots with a live cartridge, ascending.
    pub fn occupied_slots(&self) -> Vec<u32> {
        self.stages.iter().filter(|s| s.is_active()).map(|s| s.slot).collect()
    }

    /// Occupancy once every queued structural command has been applied,
    /// assuming each succeeds.
    pub fn projected_slots(&self) -> Vec<u32> {
        fn apply(slots: &mut Vec<u32>, cmd: &KernelCommand) {
            match cmd {
            KernelCommand::Hotplug(HotplugKind::Insert { slot, .. }) => slots.push(*slot),
            KernelCommand::Hotplug(HotplugKind::Remove { slot }) => slots.retain(|s| s != slot),
            KernelCommand::Reorder(perm) => {
                let from: Vec<u32> = perm.iter().map(|p| p.0).collect();
                slots.retain(|s| !from.contains(s));
                slots.extend(perm.iter().map(|p| p.1));
            }
            _ => {}
            }
        }
        let mut slots = self.occupied_slots();
        if let Some((_, PendingSwap::Insert { slot, .. })) = &self.pending {
            slots.push(*slot);
        }
        if let Some((_, PendingSwap::Reorder { permutation, .. })) = &self.pending {
            apply(&mut slots, &KernelCommand::Reorder(permutation.clone()));
        }
        for cmd in &self.structural {
            apply(&mut slots, cmd);
        }
        for (_, ev) in self.queue.iter() {
            if let Event::Command(cmd) = ev {
                apply(&mut slots, cmd);
            }
        }
        for cmd in self.inbox.inbox.lock().expect("command inbox poisoned").iter() {
            apply(&mut slots, cmd);
        }
        slots.sort_unstable();
        slots.dedup();
        slots
    }

    /// Drains observer notifications accumulated since the last call.
    pub fn take_events(&mut self) -> Vec<KernelEvent> {
        std::mem::take(&mut self.events)
    }

    /// Every envelope still inside the kernel (holdback, links, stages and
    /// in-transit deliveries).
    pub fn held_sequences(&self) -> Vec<u64> {
        let mut held: Vec<u64> = self.holdback.iter().map(|e| e.sequence).collect();
        for s in &self.stages {
            held.extend(s.envelopes().map(|e| e.sequence));
        }
        for (_, ev) in self.queue.iter() {
            if let Event::SinkArrival(e) = ev {
                held.push(e.sequence);
            }
        }
        held.sort_unstable();
        held
    }

    /// Envelopes already processed by the stage in `slot` or further along:
    /// its finished output, later stages, and deliveries in transit.
    pub fn sequences_past(&self, slot: u32) -> Vec<u64> {
        let mut out = Vec::new();
        for s in self.stages.iter().filter(|s| s.slot >= slot) {
            if s.slot == slot {
                if let Work::Blocked(e) = &s.work {
                    out.push(e.sequence);
                }
            } else {
                out.extend(s.envelopes().map(|e| e.sequence));
            }
        }
        for (_, ev) in self.queue.iter() {
            if let Event::SinkArrival(e) = ev {
                out.push(e.sequence);
            }
        }
        out.sort_unstable();
        out
    }

    pub fn snapshot(&self) -> KernelSnapshot {
        KernelSnapshot {
            now: self.now(),
            phase: self.phase.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| {
                    let d = s.descriptor();
                    let (role, cartridge_state) = match &s.kind {
                        StageKind::Active(c) => (StageRole::Active, Some(c.state())),
                        StageKind::Bypass { .. } => (StageRole::Bypassed, None),
                        StageKind::Gap { .. } => (StageRole::Gap, None),
                    };
                    StageView {
                        slot: s.slot,
                        capability: d.capability,
                        role,
                        cartridge_state,
                        bypassable: d.bypassable,
                        online: s.online,
                        queue_depth: s.input.queue.len(),
                    }
                })
                .collect(),
            holdback: self.holdback.len(),
            accepted: self.accepted.len() as u64,
            delivered: self.delivered_total,
            alerts: self.alerts.clone(),
        }
    }

    /// Current graph over the active stages.
    pub fn graph(&self) -> PipelineGraph {
        let stages: Vec<GraphStage> = self
            .stages
            .iter()
            .filter_map(|s| match &s.kind {
                StageKind::Active(c) => Some(GraphStage {
                    slot: s.slot,
                    cartridge_id: c.id(),
                    descriptor: c.descriptor().clone(),
                }),
                _ => None,
            })
            .collect();
        let links = stages
            .windows(2)
            .enumerate()
            .map(|(i, w)| GraphLink {
                producer: i,
                consumer: i + 1,
                format: w[0].descriptor.output_format.clone(),
            })
            .collect();
        PipelineGraph {
            stages,
            links,
            buffer_policy: self.config.buffer_policy,
        }
    }

    // -- commands ----------------------------------------------------------

    /// Queues a command to take effect at `at` (or now, if earlier).
    pub fn schedule_command(&mut self, at: SimTime, command: KernelCommand) -> Result<(), KernelError> {
        let at = at.max(self.now());
        self.queue.schedule(at, Event::Command(Box::new(command)))?;
        Ok(())
    }

    pub fn schedule_hotplug(&mut self, event: HotplugEvent) -> Result<(), KernelError> {
        self.schedule_command(event.at, KernelCommand::Hotplug(event.kind))
    }

    /// Adjusts the credit count of the link feeding stage `link`; credits
    /// never drop below zero.
    pub fn throttle(&mut self, link: usize, credit_delta: i64) -> Result<(), KernelError> {
        let l = &mut self
            .stages
            .get_mut(link)
            .ok_or(KernelError::UnknownLink(link))?
            .input;
        l.credits = (l.credits as i64 + credit_delta).max(0) as usize;
        self.pump();
        Ok(())
    }

    // -- simulation loop ---------------------------------------------------

    /// Time of the next queued event, if any.
    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek_time()
    }

    /// Processes every event up to and including `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: SimTime) {
        self.collect_inbox();
        while self.queue.peek_time().is_some_and(|next| next <= t) {
            let (_, ev) = self.queue.step().expect("peeked");
            self.handle(ev);
            self.pump();
            self.collect_inbox();
        }
        self.queue.advance_to(t);
        self.pump();
    }

    /// Runs until no events remain. Returns false if `limit` was hit first.
    pub fn run_to_idle(&mut self, limit: SimTime) -> bool {
        self.collect_inbox();
        while let Some(next) = self.queue.peek_time() {
            if next > limit {
                self.queue.advance_to(limit);
                return false;
            }
            let (_, ev) = self.queue.step().expect("peeked");
            self.handle(ev);
            self.pump();
            self.collect_inbox();
        }
        true
    }

    /// Stops the source now.
    pub fn stop_source(&mut self) {
        self.source.stopped = true;
        self.source.stalled = false;
        self.source.tick_token += 1;
        self.queue.retain(|e| !matches!(e, Event::SourceTick));
    }

    fn collect_inbox(&mut self) {
        let cmds: Vec<KernelCommand> = self.inbox.inbox.lock().expect("command inbox poisoned").drain(..).collect();
        let now = self.now();
        for cmd in cmds {
            self.queue
                .schedule(now, Event::Command(Box::new(cmd)))
                .expect("scheduling at now");
        }
    }

    fn token(&mut self) -> u64 {
        let t = self.next_token;
        self.next_token += 1;
        t
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::SourceTick => self.on_source_tick(),
            Event::StageDone { token } => self.on_stage_done(token),
            Event::LinkReady => {}
            Event::ReconfigDone { token } => self.on_reconfig_done(token),
            Event::SinkArrival(env) => {
                self.sink_in_flight -= 1;
                self.deliver(env);
            }
            Event::Command(cmd) => match *cmd {
                KernelCommand::SetSourceRate { fps } => {
                    if fps > 0.0 && fps.is_finite() {
                        self.source.period = SourceConfig::period_for_fps(fps);
                    }
                }
                KernelCommand::StopSource => self.stop_source(),
                structural => {
                    self.structural.push_back(structural);
                    self.apply_structural();
                }
            },
        }
    }

    fn max_frames_reached(&self) -> bool {
        self.config
            .source
            .max_frames
            .is_some_and(|m| self.source.next_seq >= m)
    }

    fn on_source_tick(&mut self) {
        if self.source.stopped || self.max_frames_reached() {
            return;
        }
        if !self.try_emit() {
            self.source.stalled = true;
            self.source.stalls += 1;
        }
    }

    fn make_frame(&self, seq: u64) -> FrameEnvelope {
        let src = &self.config.source;
        let payload = (0..src.payload_bytes)
            .map(|i| (seq as usize).wrapping_add(i).wrapping_mul(31) as u8)
            .collect();
        FrameEnvelope::new(src.stream_id, seq, src.format.clone(), payload)
    }

    /// Emits the next frame if the kernel can take it, scheduling the tick
    /// after it.
    fn try_emit(&mut self) -> bool {
        let now = self.now();
        let env = self.make_frame(self.source.next_seq);
        if self.admit(env).is_none() {
            return false;
        }
        self.accepted.push(self.source.next_seq);
        self.accepted_at.insert(self.source.next_seq, now);
        self.source.next_seq += 1;
        self.source.stalled = false;
        self.source.tick_token += 1;
        if !self.max_frames_reached() {
            self.queue
                .schedule(now + self.source.period, Event::SourceTick)
                .expect("future tick");
        }
        true
    }

    fn gate_open(&self) -> bool {
        !matches!(self.phase, Phase::Reconfiguring { .. })
    }

    /// Places a new envelope; `None` means no room anywhere (source stalls).
    fn admit(&mut self, env: FrameEnvelope) -> Option<()> {
        let now = self.now();
        let handoff = self.config.handoff;
        if self.gate_open() && self.holdback.is_empty() {
            if self.stages.is_empty() {
                self.send_to_sink_after(now + handoff, env);
                return Some(());
            }
            if self.stages[0].input.has_room() {
                self.stages[0].input.push(now + handoff, env);
                self.queue.schedule(now + handoff, Event::LinkReady).expect("future");
                return Some(());
            }
            if matches!(self.phase, Phase::Running) {
                return None;
            }
        }
        if self.holdback.len() < self.config.holdback_capacity {
            self.holdback.push_back(env);
            return Some(());
        }
        None
    }

    fn send_to_sink_after(&mut self, at: SimTime, env: FrameEnvelope) {
        self.sink_in_flight += 1;
        self.queue.schedule(at, Event::SinkArrival(env)).expect("future");
    }

    fn deliver(&mut self, env: FrameEnvelope) {
        if let Some((stream, seq)) = self.last_delivered {
            if env.stream_id == stream && env.sequence <= seq {
                self.order_violations += 1;
            }
        }
        self.last_delivered = Some((env.stream_id, env.sequence));
        self.delivered_total += 1;
        let accepted_at = self.accepted_at.remove(&env.sequence).unwrap_or(self.now());
        self.sink.push(SinkRecord {
            stream_id: env.stream_id,
            sequence: env.sequence,
            accepted_at,
            delivered_at: self.now(),
            hop_trail: env.hop_trail,
        });
    }

    fn on_stage_done(&mut self, token: u64) {
        let Some(i) = self
            .stages
            .iter()
            .position(|s| matches!(&s.work, Work::Busy { token: t, .. } if *t == token))
        else {
            return;
        };
        let stage = &mut self.stages[i];
        let Work::Busy { output, .. } = std::mem::replace(&mut stage.work, Work::Idle) else {
            unreachable!()
        };
        if let StageKind::Active(c) = &mut stage.kind {
            c.complete().expect("busy cartridge completes");
        }
        stage.work = Work::Blocked(output);
    }

    /// Moves everything that can move at the current instant.
    fn pump(&mut self) {
        loop {
            let mut progressed = false;

            // downstream first so freed room propagates upstream in one sweep
            for i in (0..self.stages.len()).rev() {
                progressed |= self.flush_output(i);
                progressed |= self.start_work(i);
                progressed |= self.flush_output(i);
            }

            if self.gate_open() {
                while !self.holdback.is_empty() {
                    let now = self.now();
                    let handoff = self.config.handoff;
                    if self.stages.is_empty() {
                        let env = self.holdback.pop_front().expect("non-empty");
                        self.send_to_sink_after(now + handoff, env);
                    } else if self.stages[0].input.has_room() {
                        let env = self.holdback.pop_front().expect("non-empty");
                        self.stages[0].input.push(now + handoff, env);
                        self.queue.schedule(now + handoff, Event::LinkReady).expect("future");
                    } else {
                        break;
                    }
                    progressed = true;
                }
            }

            if self.source.stalled && !self.source.stopped && self.try_emit() {
                progressed = true;
            }

            if !progressed {
                break;
            }
        }
        self.check_drain();
    }

    /// Pushes a blocked output downstream if there is room.
    fn flush_output(&mut self, i: usize) -> bool {
        if !matches!(self.stages[i].work, Work::Blocked(_)) {
            return false;
        }
        let now = self.now();
        let handoff = self.config.handoff;
        if i + 1 == self.stages.len() {
            let Work::Blocked(out) = std::mem::replace(&mut self.stages[i].work, Work::Idle) else {
                unreachable!()
            };
            self.deliver(out);
            return true;
        }
        if !self.stages[i + 1].input.has_room() {
            return false;
        }
        let Work::Blocked(out) = std::mem::replace(&mut self.stages[i].work, Work::Idle) else {
            unreachable!()
        };
        self.stages[i + 1].input.push(now + handoff, out);
        self.queue.schedule(now + handoff, Event::LinkReady).expect("future");
        true
    }

    fn start_work(&mut self, i: usize) -> bool {
        let now = self.now();
        let mut halted = None;
        let stage = &mut self.stages[i];
        if !stage.online || matches!(stage.kind, StageKind::Gap { .. }) {
            return false;
        }
        let input = match std::mem::replace(&mut stage.work, Work::Idle) {
            Work::Idle => match stage.input.pop_ready(now) {
                Some(e) => e,
                None => return false,
            },
            Work::Retained(e) => e,
            other => {
                stage.work = other;
                return false;
            }
        };
        match &mut stage.kind {
            StageKind::Bypass { .. } => {
                stage.work = Work::Blocked(pass_through(&input));
            }
            StageKind::Active(c) => match c.process(&input) {
                Ok((output, busy_for)) => {
                    let token = self.next_token;
                    self.next_token += 1;
                    stage.work = Work::Busy { token, input, output };
                    self.queue
                        .schedule(now + busy_for, Event::StageDone { token })
                        .expect("future");
                }
                Err(e) => {
                    // negotiation keeps this from happening; hold the frame
                    // rather than lose it and tell the operator
                    halted = Some((stage.slot, c.capability(), e));
                    stage.work = Work::Retained(input);
                    stage.online = false;
                }
            },
            StageKind::Gap { .. } => unreachable!(),
        }
        if let Some((slot, capability, e)) = halted {
            self.raise_alert(Some(slot), Some(capability), format!("stage halted: {e}"));
        }
        true
    }

    fn raise_alert(&mut self, slot: Option<u32>, capability: Option<CapabilityId>, message: String) {
        let alert = Alert {
            at: self.now(),
            slot,
            capability,
            message,
        };
        self.alerts.push(alert.clone());
        self.events.push(KernelEvent::Alert(alert));
    }

    fn set_phase(&mut self, phase: Phase) {
        if self.phase != phase {
            self.phase = phase.clone();
            self.events.push(KernelEvent::PhaseChanged { at: self.now(), phase });
        }
    }

    fn settled_phase(&self) -> Phase {
        match self.stages.iter().find(|s| matches!(s.kind, StageKind::Gap { .. })) {
            Some(s) => Phase::Degraded {
                missing: s.descriptor().capability,
            },
            None => Phase::Running,
        }
    }

    fn record_swap(&mut self, outcome: SwapOutcome) {
        self.events.push(KernelEvent::Swap {
            at: self.now(),
            outcome,
        });
    }

    // -- structural changes ------------------------------------------------

    fn apply_structural(&mut self) {
        while self.pending.is_none() {
            let Some(cmd) = self.structural.pop_front() else {
                return;
            };
            let result = match cmd {
                KernelCommand::Hotplug(HotplugKind::Remove { slot }) => self.on_remove(slot),
                KernelCommand::Hotplug(HotplugKind::Insert { slot, cartridge }) => self.on_insert(slot, *cartridge),
                KernelCommand::Reorder(perm) => self.on_reorder(perm),
                _ => continue,
            };
            let outcome = match result {
                Ok(o) => o,
                Err(e) => SwapOutcome::Rejected { reason: e.to_string() },
            };
            self.record_swap(outcome);
        }
    }

    /// Effective producer format feeding position `idx` in `stages`, skipping
    /// bypassed placeholders.
    fn upstream_of<'a>(stages: &[(u32, &'a CapabilityDescriptor, bool)], idx: usize) -> Option<(u32, &'a DataFormat)> {
        stages[..idx]
            .iter()
            .rev()
            .find(|(_, _, bypassed)| !bypassed)
            .map(|(slot, d, _)| (*slot, &d.output_format))
    }

    /// Checks every effective link of a prospective stage list.
    fn validate_chain(stages: &[(u32, &CapabilityDescriptor, bool)]) -> Result<(), KernelError> {
        for (idx, (slot, d, bypassed)) in stages.iter().enumerate() {
            if *bypassed {
                continue;
            }
            if let Some((up_slot, up)) = Self::upstream_of(stages, idx) {
                check_link(up_slot, up, *slot, &d.input_format)?;
            }
        }
        Ok(())
    }

    fn chain_view(&self) -> Vec<(u32, &CapabilityDescriptor, bool)> {
        self.stages
            .iter()
            .map(|s| (s.slot, s.descriptor(), matches!(s.kind, StageKind::Bypass { .. })))
            .collect()
    }

    /// Handles removal of the cartridge in `slot`.
    pub fn on_remove(&mut self, slot: u32) -> Result<SwapOutcome, KernelError> {
        let idx = self
            .stages
            .iter()
            .position(|s| s.slot == slot && s.is_active())
            .ok_or(KernelError::EmptySlot(slot))?;
        let now = self.now();

        let can_bypass = {
            let mut chain = self.chain_view();
            let bypassable = chain[idx].1.bypassable;
            chain[idx].2 = true;
            bypassable && Self::validate_chain(&chain).is_ok()
        };

        let stage = &mut self.stages[idx];
        let missing = stage.descriptor().clone();
        let StageKind::Active(mut cartridge) = std::mem::replace(&mut stage.kind, StageKind::Gap { missing }) else {
            unreachable!()
        };
        cartridge.remove()?;
        let descriptor = cartridge.descriptor().clone();
        stage.online = false;
        stage.work = match std::mem::replace(&mut stage.work, Work::Idle) {
            Work::Busy { input, .. } => Work::Retained(input),
            other => other,
        };

        if can_bypass {
            stage.kind = StageKind::Bypass { removed: descriptor };
            let token = self.token();
            let deadline = now + self.config.reconfigure_budget;
            self.pending = Some((token, PendingSwap::Bypass));
            self.pauses.push(PauseRecord {
                cause: SwapCause::Removal,
                slot: Some(slot),
                start: now,
                end: None,
            });
            self.queue.schedule(deadline, Event::ReconfigDone { token })?;
            self.set_phase(Phase::Reconfiguring { deadline });
            Ok(SwapOutcome::Bypassed {
                slot,
                resume_at: deadline,
            })
        } else {
            let missing = descriptor.capability;
            self.raise_alert(
                Some(slot),
                Some(missing),
                format!("capability {missing} missing from slot {slot}; pipeline halted past the gap"),
            );
            let phase = self.settled_phase();
            self.set_phase(phase);
            Ok(SwapOutcome::Degraded { slot, missing })
        }
    }

    /// Handles a cartridge plugged into `slot`.
    pub fn on_insert(&mut self, slot: u32, mut cartridge: Cartridge) -> Result<SwapOutcome, KernelError> {
        if self.stages.iter().any(|s| s.slot == slot && s.is_active()) {
            return Err(KernelError::OccupiedSlot(slot));
        }
        let now = self.now();
        cartridge.plug(slot)?;
        let descriptor = cartridge.handshake(now)?;

        let mut chain = self.chain_view();
        match chain.iter().position(|(s, _, _)| *s == slot) {
            Some(i) => chain[i] = (slot, &descriptor, false),
            None => {
                let i = chain.partition_point(|(s, _, _)| *s < slot);
                chain.insert(i, (slot, &descriptor, false));
            }
        }
        if let Err(e) = Self::validate_chain(&chain) {
            let _ = cartridge.remove();
            self.raise_alert(
                Some(slot),
                Some(descriptor.capability),
                format!("insertion of {} into slot {slot} rejected: {e}", descriptor.capability),
            );
            return Err(e);
        }

        let token = self.token();
        let deadline = now + self.config.reconfigure_budget + SimTime::from_millis(descriptor.model_load_time_ms as u64);
        self.pending = Some((
            token,
            PendingSwap::Insert {
                slot,
                cartridge: Box::new(cartridge),
            },
        ));
        self.pauses.push(PauseRecord {
            cause: SwapCause::Insertion,
            slot: Some(slot),
            start: now,
            end: None,
        });
        self.queue.schedule(deadline, Event::ReconfigDone { token })?;
        self.set_phase(Phase::Reconfiguring { deadline });
        Ok(SwapOutcome::Integrating {
            slot,
            resume_at: deadline,
        })
    }

    fn on_reorder(&mut self, permutation: Vec<(u32, u32)>) -> Result<SwapOutcome, KernelError> {
        validate_permutation(&self.occupied_slots(), &permutation)?;
        if matches!(self.phase, Phase::Degraded { .. }) {
            return Err(KernelError::Degraded);
        }
        let mut chain: Vec<(u32, &CapabilityDescriptor, bool)> = self
            .chain_view()
            .into_iter()
            .map(|(s, d, b)| (remap(&permutation, s, !b), d, b))
            .collect();
        chain.sort_by_key(|c| c.0);
        Self::validate_chain(&chain)?;

        let now = self.now();
        let token = self.token();
        let deadline = now + self.config.reconfigure_budget;
        self.pending = Some((
            token,
            PendingSwap::Reorder {
                permutation,
                awaiting_drain: false,
            },
        ));
        self.pauses.push(PauseRecord {
            cause: SwapCause::Reorder,
            slot: None,
            start: now,
            end: None,
        });
        self.queue.schedule(deadline, Event::ReconfigDone { token })?;
        self.set_phase(Phase::Reconfiguring { deadline });
        Ok(SwapOutcome::Reordering { resume_at: deadline })
    }

    fn pipeline_drained(&self) -> bool {
        self.sink_in_flight == 0 && self.stages.iter().all(|s| s.envelopes().next().is_none())
    }

    fn check_drain(&mut self) {
        let ready = matches!(
            &self.pending,
            Some((_, PendingSwap::Reorder { awaiting_drain: true, .. }))
        ) && self.pipeline_drained();
        if ready {
            let token = self.pending.as_ref().expect("pending").0;
            self.on_reconfig_done(token);
            self.pump();
        }
    }

    fn on_reconfig_done(&mut self, token: u64) {
        let drained = self.pipeline_drained();
        match &mut self.pending {
            Some((t, PendingSwap::Reorder { awaiting_drain, .. })) if *t == token => {
                if !drained {
                    *awaiting_drain = true;
                    return;
                }
            }
            Some((t, _)) if *t == token => {}
            _ => return,
        }
        let now = self.now();
        let (_, swap) = self.pending.take().expect("matched above");
        match swap {
            PendingSwap::Bypass => {
                for s in &mut self.stages {
                    if matches!(s.kind, StageKind::Bypass { .. }) {
                        s.online = true;
                    }
                }
            }
            PendingSwap::Insert { slot, mut cartridge } => {
                cartridge.poll(now);
                let policy = self.config.buffer_policy;
                match self.stages.iter().position(|s| s.slot == slot) {
                    Some(i) => {
                        let s = &mut self.stages[i];
                        s.kind = StageKind::Active(cartridge);
                        s.online = true;
                    }
                    None => {
                        let i = self.stages.partition_point(|s| s.slot < slot);
                        self.stages.insert(
                            i,
                            Stage {
                                slot,
                                kind: StageKind::Active(cartridge),
                                online: true,
                                work: Work::Idle,
                                input: Link::new(policy),
                            },
                        );
                    }
                }
            }
            PendingSwap::Reorder { permutation, .. } => {
                for s in &mut self.stages {
                    let active = s.is_active();
                    s.slot = remap(&permutation, s.slot, active);
                    if let StageKind::Active(c) = &mut s.kind {
                        c.reassign_slot(s.slot).expect("drained pipeline leaves cartridges idle");
                    }
                }
                self.stages.sort_by_key(|s| s.slot);
            }
        }
        if let Some(p) = self.pauses.iter_mut().rev().find(|p| p.end.is_none()) {
            p.end = Some(now);
        }
        let phase = self.settled_phase();
        self.set_phase(phase);
        self.apply_structural();
    }
}

fn remap(permutation: &[(u32, u32)], slot: u32, active: bool) -> u32 {
    if !active {
        return slot;
    }
    permutation
        .iter()
        .find(|(from, _)| *from == slot)
        .map(|(_, to)| *to)
        .unwrap_or(slot)
}

/// A reorder must move occupied slots onto the same set of slots, each once.
pub fn validate_permutation(occupied: &[u32], permutation: &[(u32, u32)]) -> Result<(), KernelError> {
    if permutation.is_empty() {
        return Err(KernelError::BadPermutation("empty".into()));
    }
    let mut from: Vec<u32> = permutation.iter().map(|p| p.0).collect();
    let mut to: Vec<u32> = permutation.iter().map(|p| p.1).collect();
    for s in &from {
        if !occupied.contains(s) {
            return Err(KernelError::BadPermutation(format!("slot {s} is not occupied")));
        }
    }
    from.sort_unstable();
    to.sort_unstable();
    if from.windows(2).any(|w| w[0] == w[1]) {
        return Err(KernelError::BadPermutation("slot moved twice".into()));
    }
    if from != to {
        return Err(KernelError::BadPermutation(
            "target slots are not a permutation of the source slots".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cartridge::Catalog;

    fn cart(name: &str, id: u64) -> Cartridge {
        Catalog::builtin().instantiate(name, id, id * 7919).unwrap()
    }

    fn face_pipeline(config: KernelConfig) -> Kernel {
        Kernel::boot(
            config,
            vec![(0, cart("face-detect", 1)), (1, cart("face-quality", 2)), (2, cart("face-embed", 3))],
        )
        .unwrap()
    }

    #[test]
    fn enumerate_sorts_by_slot() {
        let map = enumerate(
            vec![(2, cart("face-embed", 1)), (0, cart("face-detect", 2)), (1, cart("face-quality", 3))],
            SimTime::ZERO,
        )
        .unwrap();
        assert_eq!(map.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(map.values().all(|c| c.state() == CartridgeState::LoadingModel));
    }

    #[test]
    fn enumerate_rejects_duplicate_slots() {
        let err = enumerate(vec![(1, cart("face-embed", 1)), (1, cart("face-detect", 2))], SimTime::ZERO);
        assert_eq!(err.unwrap_err(), KernelError::DuplicateSlot(1));
    }

    #[test]
    fn build_requires_ready_cartridges() {
        let map = enumerate(vec![(0, cart("face-detect", 1))], SimTime::ZERO).unwrap();
        assert_eq!(build_pipeline(&map, BufferPolicy::default()), Err(KernelError::NotReady(0)));
    }

    #[test]
    fn build_face_pipeline() {
        let k = face_pipeline(KernelConfig::default());
        let g = k.graph();
        assert_eq!(g.stages.len(), 3);
        assert_eq!(g.links.len(), 2);
    }

    #[test]
    fn build_reports_mismatch() {
        let err = Kernel::boot(
            KernelConfig::default(),
            vec![(0, cart("face-embed", 1)), (1, cart("face-detect", 2))],
        )
        .err()
        .unwrap();
        match err {
            KernelError::FormatMismatch { upstream, downstream, upstream_slot, downstream_slot, .. } => {
                assert_eq!((upstream_slot, downstream_slot), (0, 1));
                assert_eq!(upstream.kind, crate::protocol::FormatKind::EmbeddingVector);
                assert_eq!(downstream.kind, crate::protocol::FormatKind::ImageFrame);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_stage_graph_has_no_links() {
        let k = Kernel::boot(KernelConfig::default(), vec![(3, cart("face-detect", 1))]).unwrap();
        let g = k.graph();
        assert_eq!(g.stages.len(), 1);
        assert!(g.links.is_empty());
    }

    #[test]
    fn empty_pipeline_passes_through_in_order() {
        let mut config = KernelConfig::default();
        config.source.max_frames = Some(20);
        let mut k = Kernel::new(config);
        assert!(k.run_to_idle(SimTime::from_millis(10_000)));
        let seqs: Vec<u64> = k.sink().iter().map(|r| r.sequence).collect();
        assert_eq!(seqs, (0..20).collect::<Vec<_>>());
        assert!(k.sink().iter().all(|r| r.hop_trail.is_empty() && r.latency() == HANDOFF));
        assert_eq!(k.phase(), &Phase::Running);
    }

    #[test]
    fn hundred_frames_through_three_stages() {
        let mut config = KernelConfig::default();
        config.source.max_frames = Some(100);
        let mut k = face_pipeline(config);
        assert!(k.run_to_idle(SimTime::from_millis(60_000)));
        assert_eq!(k.sink().len(), 100);
        assert_eq!(k.order_violations(), 0);
        for r in k.sink() {
            assert_eq!(
                r.hop_trail,
                vec![CapabilityId::FaceDetection, CapabilityId::FaceQuality, CapabilityId::FaceRecognition]
            );
        }
    }

    #[test]
    fn credit_one_is_lock_step() {
        let mut config = KernelConfig::default();
        config.source.max_frames = Some(30);
        config.source.period = SimTime::from_millis(1);
        config.buffer_policy = BufferPolicy { capacity: 8, credits: 1 };
        let mut k = face_pipeline(config);
        assert!(k.run_to_idle(SimTime::from_millis(60_000)));
        assert_eq!(k.sink().len(), 30);
        assert!(k.max_link_depths().iter().all(|&d| d <= 1));
    }

    #[test]
    fn throttle_clamps_and_validates() {
        let mut k = face_pipeline(KernelConfig::default());
        assert_eq!(k.throttle(5, 1), Err(KernelError::UnknownLink(5)));
        k.throttle(0, -100).unwrap();
        k.run_until(SimTime::from_millis(500));
        // no credit on the first link: nothing enters the pipeline
        assert!(k.sink().is_empty());
        assert_eq!(k.max_link_depths()[0], 0);
        k.throttle(0, 4).unwrap();
        k.run_until(SimTime::from_millis(1000));
        assert!(!k.sink().is_empty());
    }

    #[test]
    fn remove_errors_on_empty_slot() {
        let mut k = face_pipeline(KernelConfig::default());
        assert_eq!(k.on_remove(7), Err(KernelError::EmptySlot(7)));
    }

    #[test]
    fn insert_errors_on_occupied_slot() {
        let mut k = face_pipeline(KernelConfig::default());
        assert_eq!(k.on_insert(1, cart("face-quality", 9)), Err(KernelError::OccupiedSlot(1)));
    }

    #[test]
    fn clashing_insert_is_rejected_and_pipeline_kept() {
        let mut k = face_pipeline(KernelConfig::default());
        k.run_until(SimTime::from_millis(300));
        let before = k.graph();
        // face-embed between detect (slot 0) and quality (slot 1)
        let err = k.on_insert(0, cart("face-embed", 9));
        assert!(matches!(err, Err(KernelError::OccupiedSlot(0))));
        let mut k = Kernel::boot(
            KernelConfig::default(),
            vec![(0, cart("face-detect", 1)), (2, cart("face-quality", 2)), (3, cart("face-embed", 3))],
        )
        .unwrap();
        let err = k.on_insert(1, cart("face-embed", 9)).unwrap_err();
        assert!(matches!(err, KernelError::FormatMismatch { .. }));
        assert_eq!(k.phase(), &Phase::Running);
        assert_eq!(k.alerts().len(), 1);
        assert_eq!(k.graph().stages.len(), 3);
        assert_eq!(before.stages.len(), 3);
    }

    #[test]
    fn insert_into_empty_pipeline() {
        let mut k = Kernel::new(KernelConfig::default());
        let out = k.on_insert(0, cart("face-detect", 1)).unwrap();
        assert_eq!(
            out,
            SwapOutcome::Integrating {
                slot: 0,
                resume_at: SimTime::from_millis(2000)
            }
        );
        k.run_until(SimTime::from_millis(2500));
        assert_eq!(k.phase(), &Phase::Running);
        assert_eq!(k.graph().stages.len(), 1);
        assert_eq!(k.pauses()[0].duration(), Some(SimTime::from_millis(2000)));
    }

    #[test]
    fn permutation_validation() {
        assert!(validate_permutation(&[0, 1], &[(2, 0)]).is_err());
        assert!(validate_permutation(&[0, 1], &[(0, 1)]).is_err());
        assert!(validate_permutation(&[0, 1], &[(0, 1), (0, 1)]).is_err());
        assert!(validate_permutation(&[0, 1], &[(0, 1), (1, 0)]).is_ok());
        assert!(validate_permutation(&[0, 1], &[]).is_err());
    }
}
