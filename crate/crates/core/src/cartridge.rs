//! Simulated capability cartridges.
//!
//! A cartridge walks `Unplugged -> Handshaking -> LoadingModel -> Ready <-> Busy`
//! and may be pulled (`Removed`) at any point; a removed cartridge re-enters at
//! `Handshaking` and always reloads its model. Processing is a latency-shaped
//! stub whose output is a pure function of the seed and the input envelope.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gallery::{self, Gallery, Modality, Template, DEFAULT_FACE_THRESHOLD};
use crate::payload::{self, BoundingBox, Embedding, MatchRecord, PayloadError};
use crate::protocol::{
    negotiate, CapabilityDescriptor, CapabilityId, DataFormat, FormatKind, FrameEnvelope, InvariantViolation,
    LatencySpec, Mode,
};
use crate::time::SimTime;

pub const EMBEDDING_DIM: u32 = 128;
/// Size of the identity pool the synthetic detectors draw subject tags from.
pub const SUBJECT_POOL: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CartridgeState {
    Unplugged,
    Handshaking,
    LoadingModel,
    Ready,
    Busy,
    Removed,
}

impl CartridgeState {
    pub const ALL: [CartridgeState; 6] = [
        CartridgeState::Unplugged,
        CartridgeState::Handshaking,
        CartridgeState::LoadingModel,
        CartridgeState::Ready,
        CartridgeState::Busy,
        CartridgeState::Removed,
    ];

    pub fn is_legal_transition(from: CartridgeState, to: CartridgeState) -> bool {
        use CartridgeState::*;
        matches!(
            (from, to),
            (Unplugged, Handshaking)
                | (Handshaking, LoadingModel)
                | (LoadingModel, Ready)
                | (Ready, Busy)
                | (Busy, Ready)
                | (Removed, Handshaking)
        ) || (to == Removed && from != Removed)
    }

    fn has_slot(self) -> bool {
        !matches!(self, CartridgeState::Unplugged | CartridgeState::Removed)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CartridgeError {
    #[error("cartridge is {actual:?}, operation needs {expected}")]
    WrongState {
        expected: &'static str,
        actual: CartridgeState,
    },
    #[error("input {input} does not fit {capability} input {expected}")]
    FormatMismatch {
        capability: CapabilityId,
        input: DataFormat,
        expected: DataFormat,
    },
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Invariant(#[from] InvariantViolation),
}

#[derive(Debug, Clone)]
pub struct Cartridge {
    id: u64,
    descriptor: CapabilityDescriptor,
    state: CartridgeState,
    slot: Option<u32>,
    rng_seed: u64,
    ready_at: Option<SimTime>,
    gallery: Option<Arc<Gallery>>,
}

impl Cartridge {
    pub fn new(id: u64, descriptor: CapabilityDescriptor, rng_seed: u64) -> Result<Self, CartridgeError> {
        descriptor.validate()?;
        Ok(Cartridge {
            id,
            descriptor,
            state: CartridgeState::Unplugged,
            slot: None,
            rng_seed,
            ready_at: None,
            gallery: None,
        })
    }

    /// Attaches the reference gallery a database cartridge answers queries from.
    pub fn with_gallery(mut self, gallery: Arc<Gallery>) -> Self {
        self.gallery = Some(gallery);
        self
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn descriptor(&self) -> &CapabilityDescriptor {
        &self.descriptor
    }

    pub fn capability(&self) -> CapabilityId {
        self.descriptor.capability
    }

    pub fn state(&self) -> CartridgeState {
        self.state
    }

    pub fn slot(&self) -> Option<u32> {
        self.slot
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn ready_at(&self) -> Option<SimTime> {
        self.ready_at
    }

    fn set_state(&mut self, to: CartridgeState) {
        debug_assert!(CartridgeState::is_legal_transition(self.state, to));
        self.state = to;
        if !to.has_slot() {
            self.slot = None;
        }
    }

    fn require(&self, ok: bool, expected: &'static str) -> Result<(), CartridgeError> {
        if ok {
            Ok(())
        } else {
            Err(CartridgeError::WrongState {
                expected,
                actual: self.state,
            })
        }
    }

    /// Bus detected the cartridge in `slot`.
    pub fn plug(&mut self, slot: u32) -> Result<(), CartridgeError> {
        self.require(
            matches!(self.state, CartridgeState::Unplugged | CartridgeState::Removed),
            "Unplugged or Removed",
        )?;
        self.set_state(CartridgeState::Handshaking);
        self.slot = Some(slot);
        self.ready_at = None;
        Ok(())
    }

    /// Reports the capability descriptor and starts loading the model. The
    /// cartridge becomes `Ready` once `model_load_time` has elapsed, which is
    /// immediately for a zero load time.
    pub fn handshake(&mut self, now: SimTime) -> Result<CapabilityDescriptor, CartridgeError> {
        self.require(self.state == CartridgeState::Handshaking, "Handshaking")?;
        self.set_state(CartridgeState::LoadingModel);
        let ready = now + SimTime::from_millis(self.descriptor.model_load_time_ms as u64);
        self.ready_at = Some(ready);
        self.poll(now);
        Ok(self.descriptor.clone())
    }

    /// Finishes a model load whose deadline has passed. Returns whether the
    /// cartridge is now `Ready`.
    pub fn poll(&mut self, now: SimTime) -> bool {
        if self.state == CartridgeState::LoadingModel && self.ready_at.is_some_and(|t| now >= t) {
            self.set_state(CartridgeState::Ready);
        }
        self.state == CartridgeState::Ready
    }

    /// Moves an idle cartridge to another pipeline position without a new
    /// handshake.
    pub fn reassign_slot(&mut self, slot: u32) -> Result<(), CartridgeError> {
        self.require(self.state == CartridgeState::Ready, "Ready")?;
        self.slot = Some(slot);
        Ok(())
    }

    pub fn remove(&mut self) -> Result<(), CartridgeError> {
        self.require(self.state != CartridgeState::Removed, "any state but Removed")?;
        self.set_state(CartridgeState::Removed);
        self.ready_at = None;
        Ok(())
    }

    /// Runs the stub on `input`. The cartridge stays `Busy` until
    /// [`Cartridge::complete`] is called after `busy_for` has elapsed.
    pub fn process(&mut self, input: &FrameEnvelope) -> Result<(FrameEnvelope, SimTime), CartridgeError> {
        self.require(self.state == CartridgeState::Ready, "Ready")?;
        let (output, busy_for) = self.evaluate(input)?;
        self.set_state(CartridgeState::Busy);
        Ok((output, busy_for))
    }

    pub fn complete(&mut self) -> Result<(), CartridgeError> {
        self.require(self.state == CartridgeState::Busy, "Busy")?;
        self.set_state(CartridgeState::Ready);
        Ok(())
    }

    /// Output and service time for `input` without touching the lifecycle.
    pub fn evaluate(&self, input: &FrameEnvelope) -> Result<(FrameEnvelope, SimTime), CartridgeError> {
        if !negotiate(&input.payload_format, &self.descriptor.input_format).is_compatible() {
            return Err(CartridgeError::FormatMismatch {
                capability: self.descriptor.capability,
                input: input.payload_format.clone(),
                expected: self.descriptor.input_format.clone(),
            });
        }
        let key = frame_key(self.rng_seed, input);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let busy_for = draw_latency(&self.descriptor.per_frame_latency, &mut rng);
        let payload = self.synthesize(input, &mut rng)?;
        let mut hop_trail = input.hop_trail.clone();
        hop_trail.push(self.descriptor.capability);
        let output = FrameEnvelope {
            stream_id: input.stream_id,
            sequence: input.sequence,
            partition_index: 0,
            partition_count: 1,
            payload_format: self.descriptor.output_format.clone(),
            payload,
            hop_trail,
        };
        Ok((output, busy_for))
    }

    fn synthesize(&self, input: &FrameEnvelope, rng: &mut ChaCha8Rng) -> Result<Vec<u8>, CartridgeError> {
        let mix = self.rng_seed ^ input.sequence;
        Ok(match self.descriptor.capability {
            CapabilityId::ObjectDetection => payload::encode_boxes(&random_boxes(rng, (mix % 5) as usize)),
            CapabilityId::FaceDetection => payload::encode_boxes(&random_boxes(rng, 1 + (mix % 3) as usize)),
            CapabilityId::FaceQuality => {
                let mut boxes = payload::decode_boxes(&input.payload)?;
                for b in &mut boxes {
                    b.quality = Some(rng.gen_range(0.0f32..=1.0));
                }
                payload::encode_boxes(&boxes)
            }
            CapabilityId::FaceRecognition => {
                let boxes = payload::decode_boxes(&input.payload)?;
                let embeddings: Vec<Embedding> = boxes
                    .iter()
                    .map(|b| Embedding {
                        subject: b.subject,
                        values: subject_embedding(b.subject, self.embedding_dim()),
                    })
                    .collect();
                payload::encode_embeddings(&embeddings)
            }
            CapabilityId::GaitRecognition => {
                let subject = (mix % SUBJECT_POOL as u64) as u32;
                payload::encode_embeddings(&[Embedding {
                    subject,
                    values: subject_embedding(subject, self.embedding_dim()),
                }])
            }
            CapabilityId::DatabaseStorage => {
                let probes = payload::decode_embeddings(&input.payload)?;
                let records: Vec<MatchRecord> = probes
                    .into_iter()
                    .map(|e| self.query(e))
                    .collect();
                payload::encode_matches(&records)
            }
            CapabilityId::PassThrough => input.payload.clone(),
        })
    }

    fn embedding_dim(&self) -> usize {
        match &self.descriptor.output_format.dims {
            Some(d) if d.len() == 1 => d[0] as usize,
            _ => EMBEDDING_DIM as usize,
        }
    }

    fn query(&self, probe: Embedding) -> MatchRecord {
        let best = self.gallery.as_ref().and_then(|g| {
            let t = Template::from_raw("probe", Modality::Face, &probe.values).ok()?;
            g.match_probe(&t, 1, DEFAULT_FACE_THRESHOLD).ok()?.into_iter().next()
        });
        match best {
            Some(m) => MatchRecord {
                probe_subject: probe.subject,
                matched: Some(m.subject_id),
                score: m.score,
            },
            None => MatchRecord {
                probe_subject: probe.subject,
                matched: None,
                score: 0.0,
            },
        }
    }
}

/// The embedding the recognition stub emits for identity tag `k`.
pub fn subject_embedding(k: u32, d: usize) -> Vec<f64> {
    gallery::embed(&gallery::subject_label(k), d.max(gallery::MIN_DIM)).expect("dimension clamped to minimum")
}

fn frame_key(seed: u64, input: &FrameEnvelope) -> u64 {
    splitmix64(seed ^ splitmix64(input.sequence ^ ((input.stream_id as u64) << 48)))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn draw_latency(spec: &LatencySpec, rng: &mut ChaCha8Rng) -> SimTime {
    let mean = spec.mean_ms as f64;
    let jitter = spec.jitter_ms as f64;
    if jitter == 0.0 {
        return SimTime::from_millis_f64(mean);
    }
    SimTime::from_millis_f64(rng.gen_range(mean - jitter..=mean + jitter))
}

fn random_boxes(rng: &mut ChaCha8Rng, count: usize) -> Vec<BoundingBox> {
    (0..count)
        .map(|_| {
            let x = rng.gen_range(0.0f32..600.0);
            let y = rng.gen_range(0.0f32..440.0);
            BoundingBox {
                x,
                y,
                w: rng.gen_range(16.0f32..(640.0 - x).max(17.0)),
                h: rng.gen_range(16.0f32..(480.0 - y).max(17.0)),
                subject: rng.gen_range(0..SUBJECT_POOL),
                quality: None,
            }
        })
        .collect()
}

/// Default-route stand-in for a bypassed stage.
pub fn pass_through(input: &FrameEnvelope) -> FrameEnvelope {
    let mut out = input.clone();
    out.hop_trail.push(CapabilityId::PassThrough);
    out
}

// ---------------------------------------------------------------------------
// catalog

/// Named cartridge descriptors. Latencies in the built-in presets are
/// synthetic defaults, not measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Catalog {
    presets: BTreeMap<String, CapabilityDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CatalogError {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("preset `{0}`: {1}")]
    Invalid(String, InvariantViolation),
    #[error("catalog file: {0}")]
    Parse(String),
}

#[derive(Deserialize)]
struct CatalogEntry {
    name: String,
    #[serde(flatten)]
    descriptor: CapabilityDescriptor,
}

impl Default for Catalog {
    fn default() -> Self {
        Catalog::builtin()
    }
}

impl Catalog {
    pub fn builtin() -> Self {
        let boxes = || DataFormat::any(FormatKind::BoundingBoxSet);
        let any_image = || DataFormat::any(FormatKind::ImageFrame);
        let streaming = |capability, input_format, output_format, bypassable, load, mean, jitter, bytes| {
            CapabilityDescriptor {
                capability,
                input_format,
                output_format,
                mode: Mode::Streaming,
                bypassable,
                model_load_time_ms: load,
                per_frame_latency: LatencySpec { mean_ms: mean, jitter_ms: jitter },
                output_bytes_per_frame: bytes,
            }
        };
        let mut presets = BTreeMap::new();
        presets.insert(
            "object-detect".into(),
            streaming(CapabilityId::ObjectDetection, any_image(), boxes(), true, 1500, 30, 0, 512),
        );
        presets.insert(
            "face-detect".into(),
            streaming(CapabilityId::FaceDetection, any_image(), boxes(), false, 1500, 30, 0, 512),
        );
        presets.insert(
            "face-quality".into(),
            streaming(CapabilityId::FaceQuality, boxes(), boxes(), true, 1500, 30, 0, 512),
        );
        presets.insert(
            "face-embed".into(),
            streaming(
                CapabilityId::FaceRecognition,
                boxes(),
                DataFormat::embedding(EMBEDDING_DIM),
                false,
                1500,
                30,
                0,
                EMBEDDING_DIM * 8 * 3,
            ),
        );
        presets.insert(
            "gait-embed".into(),
            streaming(
                CapabilityId::GaitRecognition,
                any_image(),
                DataFormat::embedding(EMBEDDING_DIM),
                false,
                1800,
                45,
                5,
                EMBEDDING_DIM * 8,
            ),
        );
        presets.insert(
            "database".into(),
            CapabilityDescriptor {
                capability: CapabilityId::DatabaseStorage,
                input_format: DataFormat::any(FormatKind::EmbeddingVector),
                output_format: DataFormat::any(FormatKind::MatchResultSet),
                mode: Mode::RequestResponse,
                bypassable: false,
                model_load_time_ms: 500,
                per_frame_latency: LatencySpec::fixed(5),
                output_bytes_per_frame: 128,
            },
        );
        presets.insert(
            "passthrough".into(),
            streaming(
                CapabilityId::PassThrough,
                DataFormat::any(FormatKind::Opaque),
                DataFormat::any(FormatKind::Opaque),
                true,
                0,
                0,
                0,
                0,
            ),
        );
        Catalog { presets }
    }

    /// Parses a catalog file: a JSON list of descriptors, each with a `name`.
    pub fn from_json(text: &str) -> Result<Self, CatalogError> {
        let entries: Vec<CatalogEntry> = serde_json::from_str(text).map_err(|e| CatalogError::Parse(e.to_string()))?;
        let mut presets = BTreeMap::new();
        for e in entries {
            e.descriptor
                .validate()
                .map_err(|v| CatalogError::Invalid(e.name.clone(), v))?;
            presets.insert(e.name, e.descriptor);
        }
        Ok(Catalog { presets })
    }

    pub fn to_json(&self) -> String {
        let list: Vec<serde_json::Value> = self
            .presets
            .iter()
            .map(|(name, d)| {
                let mut v = serde_json::to_value(d).expect("descriptor serializes");
                v.as_object_mut()
                    .expect("descriptor is an object")
                    .insert("name".into(), name.clone().into());
                v
            })
            .collect();
        serde_json::to_string_pretty(&list).expect("catalog serializes")
    }

    pub fn get(&self, name: &str) -> Result<&CapabilityDescriptor, CatalogError> {
        self.presets
            .get(name)
            .ok_or_else(|| CatalogError::UnknownPreset(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.presets.keys().map(String::as_str)
    }

    /// Preset with its per-frame latency replaced.
    pub fn with_latency(&self, name: &str, latency: LatencySpec) -> Result<CapabilityDescriptor, CatalogError> {
        let mut d = self.get(name)?.clone();
        d.per_frame_latency = latency;
        d.validate().map_err(|v| CatalogError::Invalid(name.to_string(), v))?;
        Ok(d)
    }

    pub fn instantiate(&self, name: &str, id: u64, seed: u64) -> Result<Cartridge, CatalogError> {
        let d = self.get(name)?.clone();
        Cartridge::new(id, d, seed).map_err(|e| match e {
            CartridgeError::Invariant(v) => CatalogError::Invalid(name.to_string(), v),
            other => CatalogError::Parse(other.to_string()),
        })
    }

    /// Preset name whose descriptor advertises `capability`, if any.
    pub fn name_for(&self, capability: CapabilityId) -> Option<&str> {
        self.presets
            .iter()
            .find(|(_, d)| d.capability == capability)
            .map(|(n, _)| n.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seq: u64) -> FrameEnvelope {
        FrameEnvelope::new(1, seq, DataFormat::image(640, 480, 3), vec![0u8; 32])
    }

    fn ready(name: &str, seed: u64) -> Cartridge {
        let mut c = Catalog::builtin().instantiate(name, 1, seed).unwrap();
        c.plug(0).unwrap();
        c.handshake(SimTime::ZERO).unwrap();
        c.poll(SimTime::from_millis(10_000));
        c
    }

    #[test]
    fn handshake_schedules_ready_after_model_load() {
        let mut c = Catalog::builtin().instantiate("face-quality", 1, 0).unwrap();
        c.plug(1).unwrap();
        let t = SimTime::from_millis(100);
        let d = c.handshake(t).unwrap();
        assert_eq!(d.capability, CapabilityId::FaceQuality);
        assert_eq!(c.state(), CartridgeState::LoadingModel);
        assert!(!c.poll(SimTime::from_millis(1599)));
        assert!(c.poll(SimTime::from_millis(1600)));
        assert_eq!(c.ready_at(), Some(SimTime::from_millis(1600)));
        assert!(matches!(c.handshake(t), Err(CartridgeError::WrongState { .. })));
    }

    #[test]
    fn zero_load_is_ready_at_once() {
        let mut c = Catalog::builtin().instantiate("passthrough", 2, 0).unwrap();
        c.plug(0).unwrap();
        c.handshake(SimTime::from_millis(5)).unwrap();
        assert_eq!(c.state(), CartridgeState::Ready);
    }

    #[test]
    fn slot_follows_state() {
        let mut c = Catalog::builtin().instantiate("face-detect", 3, 0).unwrap();
        assert_eq!(c.slot(), None);
        c.plug(4).unwrap();
        assert_eq!(c.slot(), Some(4));
        c.remove().unwrap();
        assert_eq!(c.slot(), None);
        assert!(c.remove().is_err());
        c.plug(2).unwrap();
        assert_eq!(c.state(), CartridgeState::Handshaking);
        assert_eq!(c.slot(), Some(2));
    }

    #[test]
    fn object_detection_box_count() {
        let mut c = ready("object-detect", 0xABCD);
        for seq in 0..20 {
            let (out, busy) = c.process(&image(seq)).unwrap();
            c.complete().unwrap();
            let boxes = payload::decode_boxes(&out.payload).unwrap();
            assert_eq!(boxes.len() as u64, (0xABCD ^ seq) % 5);
            assert_eq!(out.sequence, seq);
            assert_eq!(out.hop_trail, vec![CapabilityId::ObjectDetection]);
            assert_eq!(out.payload_format.kind, FormatKind::BoundingBoxSet);
            assert_eq!(busy, SimTime::from_millis(30));
        }
    }

    #[test]
    fn quality_scores_one_per_box_in_unit_range() {
        let det = ready("face-detect", 5);
        let mut q = ready("face-quality", 6);
        for seq in 0..50 {
            let (boxes, _) = det.evaluate(&image(seq)).unwrap();
            let (scored, _) = q.process(&boxes).unwrap();
            q.complete().unwrap();
            let before = payload::decode_boxes(&boxes.payload).unwrap();
            let after = payload::decode_boxes(&scored.payload).unwrap();
            assert_eq!(before.len(), after.len());
            for b in after {
                let s = b.quality.unwrap();
                assert!((0.0..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn recognition_emits_gallery_embedding() {
        let det = ready("face-detect", 9);
        let rec = ready("face-embed", 10);
        let (boxes, _) = det.evaluate(&image(3)).unwrap();
        let (emb, _) = rec.evaluate(&boxes).unwrap();
        let tags = payload::decode_boxes(&boxes.payload).unwrap();
        let vecs = payload::decode_embeddings(&emb.payload).unwrap();
        assert_eq!(tags.len(), vecs.len());
        for (b, e) in tags.iter().zip(&vecs) {
            assert_eq!(e.subject, b.subject);
            let oracle = gallery::embed(&gallery::subject_label(b.subject), 128).unwrap();
            assert_eq!(e.values, oracle);
        }
    }

    #[test]
    fn database_matches_against_gallery() {
        let g = Arc::new(Gallery::synthetic(SUBJECT_POOL, 128).unwrap());
        let det = ready("face-detect", 9);
        let rec = ready("face-embed", 10);
        let db = ready("database", 11).with_gallery(g);
        let (boxes, _) = det.evaluate(&image(3)).unwrap();
        let (emb, _) = rec.evaluate(&boxes).unwrap();
        let (res, busy) = db.evaluate(&emb).unwrap();
        assert_eq!(busy, SimTime::from_millis(5));
        for r in payload::decode_matches(&res.payload).unwrap() {
            assert_eq!(r.matched.as_deref(), Some(gallery::subject_label(r.probe_subject).as_str()));
            assert!((r.score - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn process_requires_ready_and_matching_format() {
        let mut c = Catalog::builtin().instantiate("face-quality", 1, 0).unwrap();
        assert!(matches!(c.process(&image(0)), Err(CartridgeError::WrongState { .. })));
        let mut c = ready("face-quality", 0);
        assert!(matches!(c.process(&image(0)), Err(CartridgeError::FormatMismatch { .. })));
        assert_eq!(c.state(), CartridgeState::Ready);
    }

    #[test]
    fn pass_through_preserves_payload() {
        let e = image(77);
        let once = pass_through(&e);
        let twice = pass_through(&once);
        assert_eq!(once.payload, e.payload);
        assert_eq!(twice.payload, e.payload);
        assert_eq!(once.sequence, 77);
        assert_eq!(once.hop_trail, vec![CapabilityId::PassThrough]);
    }

    #[test]
    fn catalog_json_round_trip() {
        let cat = Catalog::builtin();
        let parsed = Catalog::from_json(&cat.to_json()).unwrap();
        assert_eq!(parsed, cat);
        for name in ["object-detect", "face-detect", "face-embed", "face-quality", "gait-embed", "database", "passthrough"] {
            assert!(cat.get(name).is_ok(), "{name}");
        }
        assert!(matches!(cat.get("nope"), Err(CatalogError::UnknownPreset(_))));
        assert!(Catalog::from_json("{").is_err());
    }

    #[test]
    fn bypass_policy_flags() {
        let cat = Catalog::builtin();
        assert!(cat.get("face-quality").unwrap().bypassable);
        assert!(cat.get("object-detect").unwrap().bypassable);
        assert!(!cat.get("face-detect").unwrap().bypassable);
        assert!(!cat.get("face-embed").unwrap().bypassable);
        assert!(!cat.get("database").unwrap().bypassable);
    }
}
