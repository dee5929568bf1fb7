//! Replayable hot-swap scripts.
//!
//! A script is either a bare JSON array of timed events or an object that also
//! sets the initial pipeline, run length and source rate:
//!
//! ```json
//! [{"at_ms": 5000, "kind": "remove", "slot": 1},
//!  {"at_ms": 15000, "kind": "insert", "slot": 1, "preset": "face-quality"}]
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cartridge::{splitmix64, Cartridge, Catalog, CatalogError, EMBEDDING_DIM, SUBJECT_POOL};
use crate::gallery::Gallery;
use crate::kernel::{HotplugKind, Kernel, KernelCommand, KernelConfig, KernelError, SourceConfig};
use crate::protocol::CapabilityId;
use crate::time::SimTime;

pub const DEFAULT_INITIAL: [&str; 3] = ["face-detect", "face-quality", "face-embed"];
pub const DEFAULT_SOURCE_FPS: f64 = 30.0;
/// Run length past the last event when the script does not say.
pub const DEFAULT_TAIL_MS: u64 = 5000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario file: {0}")]
    Parse(String),
    #[error("event {index}: {reason}")]
    BadEvent { index: usize, reason: String },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Insert,
    Remove,
    SourceRateChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub at_ms: u64,
    pub kind: ScenarioKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Preset names for slots 0, 1, 2, ...
    pub initial: Vec<String>,
    pub duration_ms: u64,
    pub source_fps: f64,
    pub events: Vec<ScenarioEvent>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawScenario {
    Events(Vec<ScenarioEvent>),
    Full {
        #[serde(default)]
        initial: Option<Vec<String>>,
        #[serde(default)]
        duration_ms: Option<u64>,
        #[serde(default)]
        source_fps: Option<f64>,
        #[serde(default)]
        events: Vec<ScenarioEvent>,
    },
}

impl Scenario {
    pub fn from_events(events: Vec<ScenarioEvent>) -> Self {
        Self::with_defaults(None, None, None, events)
    }

    fn with_defaults(
        initial: Option<Vec<String>>,
        duration_ms: Option<u64>,
        source_fps: Option<f64>,
        events: Vec<ScenarioEvent>,
    ) -> Self {
        let last = events.iter().map(|e| e.at_ms).max().unwrap_or(0);
        Scenario {
            initial: initial.unwrap_or_else(|| DEFAULT_INITIAL.iter().map(|s| s.to_string()).collect()),
            duration_ms: duration_ms.unwrap_or(last + DEFAULT_TAIL_MS),
            source_fps: source_fps.unwrap_or(DEFAULT_SOURCE_FPS),
            events,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let raw: RawScenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        let s = match raw {
            RawScenario::Events(events) => Self::from_events(events),
            RawScenario::Full {
                initial,
                duration_ms,
                source_fps,
                events,
            } => Self::with_defaults(initial, duration_ms, source_fps, events),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.source_fps > 0.0 && self.source_fps.is_finite()) {
            return Err(ScenarioError::Parse(format!("source_fps must be > 0, got {}", self.source_fps)));
        }
        for (index, e) in self.events.iter().enumerate() {
            let bad = |reason: &str| ScenarioError::BadEvent {
                index,
                reason: reason.to_string(),
            };
            match e.kind {
                ScenarioKind::Insert if e.slot.is_none() || e.preset.is_none() => {
                    return Err(bad("insert needs slot and preset"))
                }
                ScenarioKind::Remove if e.slot.is_none() => return Err(bad("remove needs slot")),
                ScenarioKind::SourceRateChange if !e.fps.is_some_and(|f| f > 0.0 && f.is_finite()) => {
                    return Err(bad("source_rate_change needs fps > 0"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Builds cartridges from catalog presets with reproducible ids and seeds.
pub struct CartridgeFactory {
    catalog: Catalog,
    seed: u64,
    next_id: u64,
    gallery: Arc<Gallery>,
}

impl CartridgeFactory {
    pub fn new(catalog: Catalog, seed: u64) -> Self {
        let gallery = Gallery::synthetic(SUBJECT_POOL, EMBEDDING_DIM as usize).expect("synthetic gallery dims are valid");
        CartridgeFactory {
            catalog,
            seed,
            next_id: 1,
            gallery: Arc::new(gallery),
        }
    }

    pub fn with_gallery(mut self, gallery: Arc<Gallery>) -> Self {
        self.gallery = gallery;
        self
    }

    /// Gallery handed to database cartridges made from now on.
    pub fn set_gallery(&mut self, gallery: Arc<Gallery>) {
        self.gallery = gallery;
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn make(&mut self, preset: &str) -> Result<Cartridge, CatalogError> {
        let id = self.next_id;
        self.next_id += 1;
        let c = self.catalog.instantiate(preset, id, splitmix64(self.seed ^ id))?;
        Ok(if c.capability() == CapabilityId::DatabaseStorage {
            c.with_gallery(self.gallery.clone())
        } else {
            c
        })
    }
}

/// Boots the scenario's pipeline and schedules all of its events.
pub fn prepare(scenario: &Scenario, factory: &mut CartridgeFactory, mut config: KernelConfig) -> Result<Kernel, ScenarioError> {
    scenario.validate()?;
    config.source.period = SourceConfig::period_for_fps(scenario.source_fps);
    let plugged = scenario
        .initial
        .iter()
        .enumerate()
        .map(|(slot, name)| Ok((slot as u32, factory.make(name)?)))
        .collect::<Result<Vec<_>, CatalogError>>()?;
    let mut kernel = Kernel::boot(config, plugged)?;
    for e in &scenario.events {
        let at = SimTime::from_millis(e.at_ms);
        let cmd = match e.kind {
            ScenarioKind::Insert => KernelCommand::Hotplug(HotplugKind::Insert {
                slot: e.slot.expect("validated"),
                cartridge: Box::new(factory.make(e.preset.as_deref().expect("validated"))?),
            }),
            ScenarioKind::Remove => KernelCommand::Hotplug(HotplugKind::Remove {
                slot: e.slot.expect("validated"),
            }),
            ScenarioKind::SourceRateChange => KernelCommand::SetSourceRate {
                fps: e.fps.expect("validated"),
            },
        };
        kernel.schedule_command(at, cmd)?;
    }
    Ok(kernel)
}

/// Runs the scenario to its end, stops the source and lets the pipeline
/// drain for up to `drain` of simulated time.
pub fn play(scenario: &Scenario, factory: &mut CartridgeFactory, config: KernelConfig, drain: SimTime) -> Result<Kernel, ScenarioError> {
    let mut kernel = prepare(scenario, factory, config)?;
    let end = SimTime::from_millis(scenario.duration_ms);
    kernel.run_until(end);
    kernel.stop_source();
    kernel.run_to_idle(end + drain);
    Ok(kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_array_gets_defaults() {
        let s = Scenario::from_json(r#"[{"at_ms": 100, "kind": "remove", "slot": 1}]"#).unwrap();
        assert_eq!(s.initial, DEFAULT_INITIAL);
        assert_eq!(s.duration_ms, 5100);
        assert_eq!(s.source_fps, 30.0);
    }

    #[test]
    fn object_form_and_round_trip() {
        let text = r#"{"initial": ["face-detect"], "duration_ms": 1000, "events": []}"#;
        let s = Scenario::from_json(text).unwrap();
        assert_eq!(s.initial, vec!["face-detect"]);
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn incomplete_events_are_rejected() {
        assert!(matches!(
            Scenario::from_json(r#"[{"at_ms": 1, "kind": "insert", "slot": 1}]"#),
            Err(ScenarioError::BadEvent { index: 0, .. })
        ));
        assert!(Scenario::from_json(r#"[{"at_ms": 1, "kind": "source_rate_change"}]"#).is_err());
        assert!(Scenario::from_json(r#"[{"at_ms": 1, "kind": "explode"}]"#).is_err());
    }

    #[test]
    fn unknown_preset_fails_prepare() {
        let s = Scenario::from_json(r#"[{"at_ms": 1, "kind": "insert", "slot": 4, "preset": "nope"}]"#).unwrap();
        let mut f = CartridgeFactory::new(Catalog::builtin(), 1);
        assert!(matches!(
            prepare(&s, &mut f, KernelConfig::default()),
            Err(ScenarioError::Catalog(CatalogError::UnknownPreset(_)))
        ));
    }
}
