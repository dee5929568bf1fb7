//! CHAMP wire types and their binary framing.
//!
//! Every message on the wire is laid out as:
//!
//! ```text
//! +--------+-------+-------------+----------------------+
//! | "CHMP" | class | body length | body                 |
//! | 4 B    | 1 B   | u32 BE      | body length bytes    |
//! +--------+-------+-------------+----------------------+
//! ```
//!
//! Class `0x01` carries a [`FrameEnvelope`], class `0x02` a [`ControlMessage`].
//! Bodies start with a version byte (always [`WIRE_VERSION`]) followed by the
//! fields in declaration order. Integers are big-endian; durations travel as
//! unsigned 32-bit milliseconds.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CHMP";
pub const HEADER_LEN: usize = 9;
pub const WIRE_VERSION: u8 = 1;

const CLASS_FRAME: u8 = 0x01;
const CLASS_CONTROL: u8 = 0x02;

/// Registered capability codes. Codes `0x0100` and above are reserved for
/// third-party cartridges and are not accepted by this codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityId {
    ObjectDetection,
    FaceDetection,
    FaceRecognition,
    FaceQuality,
    GaitRecognition,
    DatabaseStorage,
    PassThrough,
}

impl CapabilityId {
    pub const ALL: [CapabilityId; 7] = [
        CapabilityId::ObjectDetection,
        CapabilityId::FaceDetection,
        CapabilityId::FaceRecognition,
        CapabilityId::FaceQuality,
        CapabilityId::GaitRecognition,
        CapabilityId::DatabaseStorage,
        CapabilityId::PassThrough,
    ];

    pub fn code(self) -> u16 {
        match self {
            CapabilityId::ObjectDetection => 0x0001,
            CapabilityId::FaceDetection => 0x0002,
            CapabilityId::FaceRecognition => 0x0003,
            CapabilityId::FaceQuality => 0x0004,
            CapabilityId::GaitRecognition => 0x0005,
            CapabilityId::DatabaseStorage => 0x0006,
            CapabilityId::PassThrough => 0x00FF,
        }
    }

    pub fn from_code(code: u16) -> Result<Self, DecodeError> {
        Ok(match code {
            0x0001 => CapabilityId::ObjectDetection,
            0x0002 => CapabilityId::FaceDetection,
            0x0003 => CapabilityId::FaceRecognition,
            0x0004 => CapabilityId::FaceQuality,
            0x0005 => CapabilityId::GaitRecognition,
            0x0006 => CapabilityId::DatabaseStorage,
            0x00FF => CapabilityId::PassThrough,
            other => return Err(DecodeError::UnknownCapabilityCode(other)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            CapabilityId::ObjectDetection => "ObjectDetection",
            CapabilityId::FaceDetection => "FaceDetection",
            CapabilityId::FaceRecognition => "FaceRecognition",
            CapabilityId::FaceQuality => "FaceQuality",
            CapabilityId::GaitRecognition => "GaitRecognition",
            CapabilityId::DatabaseStorage => "DatabaseStorage",
            CapabilityId::PassThrough => "PassThrough",
        }
    }
}

impl fmt::Display for CapabilityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatKind {
    ImageFrame,
    BoundingBoxSet,
    EmbeddingVector,
    QualityScoreSet,
    MatchResultSet,
    Opaque,
}

impl FormatKind {
    fn tag(self) -> u8 {
        match self {
            FormatKind::ImageFrame => 0,
            FormatKind::BoundingBoxSet => 1,
            FormatKind::EmbeddingVector => 2,
            FormatKind::QualityScoreSet => 3,
            FormatKind::MatchResultSet => 4,
            FormatKind::Opaque => 5,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, DecodeError> {
        Ok(match tag {
            0 => FormatKind::ImageFrame,
            1 => FormatKind::BoundingBoxSet,
            2 => FormatKind::EmbeddingVector,
            3 => FormatKind::QualityScoreSet,
            4 => FormatKind::MatchResultSet,
            5 => FormatKind::Opaque,
            _ => return Err(DecodeError::InvalidField("format kind")),
        })
    }
}

/// Payload type advertised by a cartridge. `dims == None` means "any shape";
/// a consumer with no dims accepts whatever its producer emits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataFormat {
    pub kind: FormatKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<u32>>,
}

impl DataFormat {
    pub fn any(kind: FormatKind) -> Self {
        DataFormat { kind, dims: None }
    }

    pub fn image(width: u32, height: u32, channels: u32) -> Self {
        DataFormat {
            kind: FormatKind::ImageFrame,
            dims: Some(vec![width, height, channels]),
        }
    }

    pub fn embedding(len: u32) -> Self {
        DataFormat {
            kind: FormatKind::EmbeddingVector,
            dims: Some(vec![len]),
        }
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let Some(dims) = &self.dims else {
            return Ok(());
        };
        match self.kind {
            FormatKind::EmbeddingVector if dims.len() != 1 || dims[0] == 0 => Err(
                InvariantViolation("EmbeddingVector dims must be [d] with d >= 1".into()),
            ),
            FormatKind::ImageFrame if dims.len() != 3 || dims.contains(&0) => Err(
                InvariantViolation("ImageFrame dims must be [W, H, C], all >= 1".into()),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.kind)?;
        if let Some(dims) = &self.dims {
            write!(f, "{dims:?}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Streaming,
    RequestResponse,
}

/// Per-frame processing time, uniform on `[mean - jitter, mean + jitter]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatencySpec {
    pub mean_ms: u32,
    #[serde(default)]
    pub jitter_ms: u32,
}

impl LatencySpec {
    pub const fn fixed(mean_ms: u32) -> Self {
        LatencySpec {
            mean_ms,
            jitter_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CapabilityDescriptor {
    pub capability: CapabilityId,
    pub input_format: DataFormat,
    pub output_format: DataFormat,
    pub mode: Mode,
    pub bypassable: bool,
    pub model_load_time_ms: u32,
    pub per_frame_latency: LatencySpec,
    pub output_bytes_per_frame: u32,
}

impl CapabilityDescriptor {
    pub fn validate(&self) -> Result<(), InvariantViolation> {
        self.input_format.validate()?;
        self.output_format.validate()?;
        // The pass-through placeholder is the one stage allowed to cost nothing.
        if self.capability != CapabilityId::PassThrough && self.per_frame_latency.mean_ms == 0 {
            return Err(InvariantViolation("per-frame latency mean must be > 0".into()));
        }
        if self.per_frame_latency.jitter_ms > self.per_frame_latency.mean_ms {
            return Err(InvariantViolation("latency jitter exceeds mean".into()));
        }
        let expected = if self.capability == CapabilityId::DatabaseStorage {
            Mode::RequestResponse
        } else {
            Mode::Streaming
        };
        if self.mode != expected {
            return Err(InvariantViolation(format!(
                "{} must use {expected:?} mode",
                self.capability
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameEnvelope {
    pub stream_id: u32,
    pub sequence: u64,
    pub partition_index: u16,
    pub partition_count: u16,
    pub payload_format: DataFormat,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub hop_trail: Vec<CapabilityId>,
}

impl FrameEnvelope {
    /// A single-partition envelope with an empty hop trail.
    pub fn new(stream_id: u32, sequence: u64, payload_format: DataFormat, payload: Vec<u8>) -> Self {
        FrameEnvelope {
            stream_id,
            sequence,
            partition_index: 0,
            partition_count: 1,
            payload_format,
            payload,
            hop_trail: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        if self.partition_count == 0 {
            return Err(InvariantViolation("partition_count must be >= 1".into()));
        }
        if self.partition_index >= self.partition_count {
            return Err(InvariantViolation(format!(
                "partition_index {} out of range for count {}",
                self.partition_index, self.partition_count
            )));
        }
        self.payload_format.validate()
    }

    /// Hop trail with pass-through hops removed.
    pub fn effective_trail(&self) -> Vec<CapabilityId> {
        self.hop_trail
            .iter()
            .copied()
            .filter(|&c| c != CapabilityId::PassThrough)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlKind {
    HandshakeRequest,
    HandshakeReply { descriptor: CapabilityDescriptor },
    Throttle { credit_delta: i32 },
    Pause,
    Resume,
    Detach,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlMessage {
    pub kind: ControlKind,
    pub issued_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    Frame(FrameEnvelope),
    Control(ControlMessage),
}

impl From<FrameEnvelope> for Message {
    fn from(f: FrameEnvelope) -> Self {
        Message::Frame(f)
    }
}

impl From<ControlMessage> for Message {
    fn from(c: ControlMessage) -> Self {
        Message::Control(c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invariant violation: {0}")]
pub struct InvariantViolation(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated body")]
    TruncatedBody,
    #[error("unknown capability code {0:#06x}")]
    UnknownCapabilityCode(u16),
    #[error("unknown message class {0:#04x}")]
    UnknownMessageClass(u8),
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u8),
    #[error("invalid {0}")]
    InvalidField(&'static str),
    #[error("{0} trailing bytes after body")]
    TrailingBytes(usize),
    #[error(transparent)]
    Invariant(#[from] InvariantViolation),
}

// ---------------------------------------------------------------------------
// encoding

pub fn encode(message: &Message) -> Result<Vec<u8>, InvariantViolation> {
    let mut body = vec![WIRE_VERSION];
    let class = match message {
        Message::Frame(f) => {
            f.validate()?;
            put_frame(&mut body, f)?;
            CLASS_FRAME
        }
        Message::Control(c) => {
            if let ControlKind::HandshakeReply { descriptor } = &c.kind {
                descriptor.validate()?;
            }
            put_control(&mut body, c)?;
            CLASS_CONTROL
        }
    };
    let len = u32::try_from(body.len())
        .map_err(|_| InvariantViolation("body exceeds u32 length".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.push(class);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

fn put_format(out: &mut Vec<u8>, fmt: &DataFormat) -> Result<(), InvariantViolation> {
    out.push(fmt.kind.tag());
    match &fmt.dims {
        None => out.push(0),
        Some(dims) => {
            out.push(1);
            let n = u16::try_from(dims.len())
                .map_err(|_| InvariantViolation("too many dims".into()))?;
            out.extend_from_slice(&n.to_be_bytes());
            for d in dims {
                out.extend_from_slice(&d.to_be_bytes());
            }
        }
    }
    Ok(())
}

fn put_frame(out: &mut Vec<u8>, f: &FrameEnvelope) -> Result<(), InvariantViolation> {
    out.extend_from_slice(&f.stream_id.to_be_bytes());
    out.extend_from_slice(&f.sequence.to_be_bytes());
    out.extend_from_slice(&f.partition_index.to_be_bytes());
    out.extend_from_slice(&f.partition_count.to_be_bytes());
    put_format(out, &f.payload_format)?;
    let plen = u32::try_from(f.payload.len())
        .map_err(|_| InvariantViolation("payload exceeds u32 length".into()))?;
    out.extend_from_slice(&plen.to_be_bytes());
    out.extend_from_slice(&f.payload);
    let hops = u16::try_from(f.hop_trail.len())
        .map_err(|_| InvariantViolation("hop trail too long".into()))?;
    out.extend_from_slice(&hops.to_be_bytes());
    for hop in &f.hop_trail {
        out.extend_from_slice(&hop.code().to_be_bytes());
    }
    Ok(())
}

fn put_descriptor(out: &mut Vec<u8>, d: &CapabilityDescriptor) -> Result<(), InvariantViolation> {
    out.extend_from_slice(&d.capability.code().to_be_bytes());
    put_format(out, &d.input_format)?;
    put_format(out, &d.output_format)?;
    out.push(match d.mode {
        Mode::Streaming => 0,
        Mode::RequestResponse => 1,
    });
    out.push(u8::from(d.bypassable));
    out.extend_from_slice(&d.model_load_time_ms.to_be_bytes());
    out.extend_from_slice(&d.per_frame_latency.mean_ms.to_be_bytes());
    out.extend_from_slice(&d.per_frame_latency.jitter_ms.to_be_bytes());
    out.extend_from_slice(&d.output_bytes_per_frame.to_be_bytes());
    Ok(())
}

fn put_control(out: &mut Vec<u8>, c: &ControlMessage) -> Result<(), InvariantViolation> {
    out.extend_from_slice(&c.issued_at_ms.to_be_bytes());
    match &c.kind {
        ControlKind::HandshakeRequest => out.push(0),
        ControlKind::HandshakeReply { descriptor } => {
            out.push(1);
            put_descriptor(out, descriptor)?;
        }
        ControlKind::Throttle { credit_delta } => {
            out.push(2);
            out.extend_from_slice(&credit_delta.to_be_bytes());
        }
        ControlKind::Pause => out.push(3),
        ControlKind::Resume => out.push(4),
        ControlKind::Detach => out.push(5),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// decoding

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::TruncatedBody);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32, DecodeError> {
        Ok(i32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bool(&mut self, what: &'static str) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(DecodeError::InvalidField(what)),
        }
    }

    fn format(&mut self) -> Result<DataFormat, DecodeError> {
        let kind = FormatKind::from_tag(self.u8()?)?;
        let dims = if self.bool("dims flag")? {
            let n = self.u16()? as usize;
            // bound the allocation by what is actually present
            if self.buf.len() < n * 4 {
                return Err(DecodeError::TruncatedBody);
            }
            Some((0..n).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?)
        } else {
            None
        };
        Ok(DataFormat { kind, dims })
    }

    fn descriptor(&mut self) -> Result<CapabilityDescriptor, DecodeError> {
        let capability = CapabilityId::from_code(self.u16()?)?;
        let input_format = self.format()?;
        let output_format = self.format()?;
        let mode = match self.u8()? {
            0 => Mode::Streaming,
            1 => Mode::RequestResponse,
            _ => return Err(DecodeError::InvalidField("mode")),
        };
        let bypassable = self.bool("bypassable")?;
        let model_load_time_ms = self.u32()?;
        let mean_ms = self.u32()?;
        let jitter_ms = self.u32()?;
        let output_bytes_per_frame = self.u32()?;
        let d = CapabilityDescriptor {
            capability,
            input_format,
            output_format,
            mode,
            bypassable,
            model_load_time_ms,
            per_frame_latency: LatencySpec { mean_ms, jitter_ms },
            output_bytes_per_frame,
        };
        d.validate()?;
        Ok(d)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::TruncatedBody);
    }
    if bytes[..4] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let class = bytes[4];
    if class != CLASS_FRAME && class != CLASS_CONTROL {
        return Err(DecodeError::UnknownMessageClass(class));
    }
    let len = u32::from_be_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let rest = &bytes[HEADER_LEN..];
    if rest.len() < len {
        return Err(DecodeError::TruncatedBody);
    }
    if rest.len() > len {
        return Err(DecodeError::TrailingBytes(rest.len() - len));
    }
    let mut r = Reader { buf: rest };
    let version = r.u8()?;
    if version != WIRE_VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let msg = if class == CLASS_FRAME {
        Message::Frame(decode_frame(&mut r)?)
    } else {
        Message::Control(decode_control(&mut r)?)
    };
    if !r.buf.is_empty() {
        return Err(DecodeError::TrailingBytes(r.buf.len()));
    }
    Ok(msg)
}

fn decode_frame(r: &mut Reader<'_>) -> Result<FrameEnvelope, DecodeError> {
    let stream_id = r.u32()?;
    let sequence = r.u64()?;
    let partition_index = r.u16()?;
    let partition_count = r.u16()?;
    let payload_format = r.format()?;
    let plen = r.u32()? as usize;
    let payload = r.take(plen)?.to_vec();
    let hops = r.u16()? as usize;
    if r.buf.len() < hops * 2 {
        return Err(DecodeError::TruncatedBody);
    }
    let hop_trail = (0..hops)
        .map(|_| CapabilityId::from_code(r.u16()?))
        .collect::<Result<Vec<_>, _>>()?;
    let f = FrameEnvelope {
        stream_id,
        sequence,
        partition_index,
        partition_count,
        payload_format,
        payload,
        hop_trail,
    };
    f.validate()?;
    Ok(f)
}

fn decode_control(r: &mut Reader<'_>) -> Result<ControlMessage, DecodeError> {
    let issued_at_ms = r.u64()?;
    let kind = match r.u8()? {
        0 => ControlKind::HandshakeRequest,
        1 => ControlKind::HandshakeReply {
            descriptor: r.descriptor()?,
        },
        2 => ControlKind::Throttle {
            credit_delta: r.i32()?,
        },
        3 => ControlKind::Pause,
        4 => ControlKind::Resume,
        5 => ControlKind::Detach,
        _ => return Err(DecodeError::InvalidField("control kind")),
    };
    Ok(ControlMessage { kind, issued_at_ms })
}

// ---------------------------------------------------------------------------
// partitioning

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PartitionError {
    #[error("chunk size must be >= 1")]
    ZeroChunk,
    #[error("payload needs {0} partitions, more than a u16 count allows")]
    TooManyPartitions(usize),
    #[error("missing partition {0}")]
    MissingPartition(u16),
    #[error("duplicate partition {0}")]
    DuplicatePartition(u16),
    #[error("parts disagree on stream, sequence or partition count")]
    MixedSequence,
}

/// Number of chunks needed for `len` bytes; an empty payload still takes one.
pub fn partition_count_for(len: usize, chunk_size: usize) -> usize {
    if len == 0 {
        1
    } else {
        len.div_ceil(chunk_size)
    }
}

/// Splits a whole envelope into `chunk_size`-byte partitions sharing its
/// stream, sequence, format and hop trail.
pub fn partition(
    envelope: &FrameEnvelope,
    chunk_size: usize,
) -> Result<Vec<FrameEnvelope>, PartitionError> {
    if chunk_size == 0 {
        return Err(PartitionError::ZeroChunk);
    }
    let count = partition_count_for(envelope.payload.len(), chunk_size);
    let count16 = u16::try_from(count).map_err(|_| PartitionError::TooManyPartitions(count))?;
    let chunks: Vec<&[u8]> = if envelope.payload.is_empty() {
        vec![&[]]
    } else {
        envelope.payload.chunks(chunk_size).collect()
    };
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(i, chunk)| FrameEnvelope {
            stream_id: envelope.stream_id,
            sequence: envelope.sequence,
            partition_index: i as u16,
            partition_count: count16,
            payload_format: envelope.payload_format.clone(),
            payload: chunk.to_vec(),
            hop_trail: envelope.hop_trail.clone(),
        })
        .collect())
}

/// Reassembles the payload from parts given in any order.
pub fn reassemble(parts: &[FrameEnvelope]) -> Result<Vec<u8>, PartitionError> {
    let Some(first) = parts.first() else {
        return Err(PartitionError::MissingPartition(0));
    };
    let count = first.partition_count;
    let mut slots: Vec<Option<&FrameEnvelope>> = vec![None; count as usize];
    for p in parts {
        if p.stream_id != first.stream_id
            || p.sequence != first.sequence
            || p.partition_count != count
            || p.partition_index >= count
        {
            return Err(PartitionError::MixedSequence);
        }
        let slot = &mut slots[p.partition_index as usize];
        if slot.is_some() {
            return Err(PartitionError::DuplicatePartition(p.partition_index));
        }
        *slot = Some(p);
    }
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.payload.len()).sum());
    for (i, slot) in slots.iter().enumerate() {
        let part = slot.ok_or(PartitionError::MissingPartition(i as u16))?;
        out.extend_from_slice(&part.payload);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// format negotiation

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Negotiation {
    Compatible,
    Incompatible(String),
}

impl Negotiation {
    pub fn is_compatible(&self) -> bool {
        matches!(self, Negotiation::Compatible)
    }
}

pub fn negotiate(upstream_out: &DataFormat, downstream_in: &DataFormat) -> Negotiation {
    if upstream_out.kind != downstream_in.kind {
        return Negotiation::Incompatible(format!(
            "kind mismatch: {:?} produced, {:?} consumed",
            upstream_out.kind, downstream_in.kind
        ));
    }
    match (&upstream_out.dims, &downstream_in.dims) {
        (_, None) => Negotiation::Compatible,
        (Some(a), Some(b)) if a == b => Negotiation::Compatible,
        (None, Some(b)) => Negotiation::Incompatible(format!(
            "consumer requires dims {b:?}, producer advertises none"
        )),
        (Some(a), Some(b)) => {
            Negotiation::Incompatible(format!("dims mismatch: {a:?} produced, {b:?} consumed"))
        }
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        let mut out = String::with_capacity(bytes.len() * 2);
        for b in bytes {
            out.push_str(&format!("{b:02x}"));
        }
        s.serialize_str(&out)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() % 2 != 0 {
            return Err(serde::de::Error::custom("odd-length hex"));
        }
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn face_quality() -> CapabilityDescriptor {
        CapabilityDescriptor {
            capability: CapabilityId::FaceQuality,
            input_format: DataFormat::any(FormatKind::BoundingBoxSet),
            output_format: DataFormat::any(FormatKind::BoundingBoxSet),
            mode: Mode::Streaming,
            bypassable: true,
            model_load_time_ms: 1500,
            per_frame_latency: LatencySpec::fixed(30),
            output_bytes_per_frame: 256,
        }
    }

    #[test]
    fn header_layout() {
        let f = FrameEnvelope::new(7, 42, DataFormat::any(FormatKind::Opaque), vec![1, 2, 3]);
        let bytes = encode(&f.clone().into()).unwrap();
        assert_eq!(&bytes[..4], b"CHMP");
        assert_eq!(bytes[4], 0x01);
        let len = u32::from_be_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 9 + len);
        assert_eq!(bytes[9], WIRE_VERSION);
        assert_eq!(decode(&bytes).unwrap(), Message::Frame(f));
    }

    #[test]
    fn empty_payload_body_is_fixed_header() {
        let f = FrameEnvelope::new(1, 0, DataFormat::any(FormatKind::Opaque), vec![]);
        let bytes = encode(&f.into()).unwrap();
        let len = u32::from_be_bytes(bytes[5..9].try_into().unwrap()) as usize;
        // version + stream + seq + index + count + kind + dims flag + payload len + hop count
        assert_eq!(len, 1 + 4 + 8 + 2 + 2 + 1 + 1 + 4 + 2);
    }

    #[test]
    fn encode_rejects_bad_partition_fields() {
        let mut f = FrameEnvelope::new(1, 0, DataFormat::any(FormatKind::Opaque), vec![]);
        f.partition_index = 2;
        f.partition_count = 2;
        assert!(encode(&f.into()).is_err());
    }

    #[test]
    fn handshake_request_round_trip() {
        let m: Message = ControlMessage {
            kind: ControlKind::HandshakeRequest,
            issued_at_ms: 12,
        }
        .into();
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn short_input_is_truncated() {
        for n in 0..HEADER_LEN {
            assert_eq!(decode(&b"CHMP\x01\0\0\0\0"[..n]), Err(DecodeError::TruncatedBody));
        }
    }

    #[test]
    fn header_errors() {
        assert_eq!(decode(b"CHMQ\x01\0\0\0\0"), Err(DecodeError::BadMagic));
        assert_eq!(
            decode(b"CHMP\x07\0\0\0\0"),
            Err(DecodeError::UnknownMessageClass(7))
        );
        assert_eq!(decode(b"CHMP\x01\0\0\0\x05\x01"), Err(DecodeError::TruncatedBody));
    }

    #[test]
    fn unknown_capability_in_handshake_reply() {
        let m: Message = ControlMessage {
            kind: ControlKind::HandshakeReply {
                descriptor: face_quality(),
            },
            issued_at_ms: 0,
        }
        .into();
        let mut bytes = encode(&m).unwrap();
        // version(1) + issued_at(8) + kind tag(1) precede the capability code
        let at = HEADER_LEN + 1 + 8 + 1;
        assert_eq!(&bytes[at..at + 2], &[0x00, 0x04]);
        bytes[at..at + 2].copy_from_slice(&0x7777u16.to_be_bytes());
        assert_eq!(decode(&bytes), Err(DecodeError::UnknownCapabilityCode(0x7777)));
    }

    #[test]
    fn partition_sizes() {
        let f = FrameEnvelope::new(1, 9, DataFormat::any(FormatKind::Opaque), (0..10).collect());
        let parts = partition(&f, 4).unwrap();
        let sizes: Vec<_> = parts.iter().map(|p| p.payload.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(parts.iter().all(|p| p.partition_count == 3 && p.sequence == 9));
        assert_eq!(reassemble(&parts).unwrap(), f.payload);
    }

    #[test]
    fn empty_payload_single_partition() {
        let f = FrameEnvelope::new(1, 0, DataFormat::any(FormatKind::Opaque), vec![]);
        let parts = partition(&f, 4).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].partition_count, 1);
        assert!(reassemble(&parts).unwrap().is_empty());
    }

    #[test]
    fn three_megabyte_image_takes_three_mebibyte_chunks() {
        let f = FrameEnvelope::new(1, 0, DataFormat::image(1000, 1000, 3), vec![0; 3_000_000]);
        let parts = partition(&f, 1 << 20).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0].partition_count, 3);
    }

    #[test]
    fn partition_count_matches_exhaustive_chunking() {
        let chunk = 1 << 20;
        for len in (0..=(4 << 20)).step_by(64 << 10) {
            // count by walking the payload one chunk at a time
            let mut walked = 0usize;
            let mut offset = 0usize;
            loop {
                walked += 1;
                offset += chunk;
                if offset >= len {
                    break;
                }
            }
            assert_eq!(partition_count_for(len, chunk), walked, "len {len}");
        }
    }

    #[test]
    fn reassemble_errors() {
        let f = FrameEnvelope::new(1, 5, DataFormat::any(FormatKind::Opaque), (0..10).collect());
        let parts = partition(&f, 4).unwrap();
        assert_eq!(
            reassemble(&parts[..2]),
            Err(PartitionError::MissingPartition(2))
        );
        let dup = vec![parts[0].clone(), parts[0].clone(), parts[2].clone()];
        assert_eq!(reassemble(&dup), Err(PartitionError::DuplicatePartition(0)));
        let mut other = parts.clone();
        other[1].sequence = 6;
        assert_eq!(reassemble(&other), Err(PartitionError::MixedSequence));
        assert_eq!(partition(&f, 0), Err(PartitionError::ZeroChunk));
        assert_eq!(reassemble(&[]), Err(PartitionError::MissingPartition(0)));
    }

    #[test]
    fn negotiation_rules() {
        let boxes = DataFormat::any(FormatKind::BoundingBoxSet);
        assert_eq!(negotiate(&boxes, &boxes), Negotiation::Compatible);
        assert!(!negotiate(&DataFormat::image(640, 480, 3), &DataFormat::embedding(512)).is_compatible());
        assert_eq!(
            negotiate(&DataFormat::embedding(512), &DataFormat::any(FormatKind::EmbeddingVector)),
            Negotiation::Compatible
        );
        assert!(!negotiate(&DataFormat::embedding(512), &DataFormat::embedding(128)).is_compatible());
        assert!(!negotiate(&DataFormat::any(FormatKind::EmbeddingVector), &DataFormat::embedding(128)).is_compatible());
    }

    #[test]
    fn descriptor_invariants() {
        let mut d = face_quality();
        assert!(d.validate().is_ok());
        d.mode = Mode::RequestResponse;
        assert!(d.validate().is_err());
        let mut d = face_quality();
        d.per_frame_latency.mean_ms = 0;
        assert!(d.validate().is_err());
        let mut d = face_quality();
        d.capability = CapabilityId::DatabaseStorage;
        assert!(d.validate().is_err());
        d.mode = Mode::RequestResponse;
        assert!(d.validate().is_ok());
        assert!(DataFormat { kind: FormatKind::EmbeddingVector, dims: Some(vec![0]) }.validate().is_err());
        assert!(DataFormat { kind: FormatKind::ImageFrame, dims: Some(vec![640, 480]) }.validate().is_err());
    }

    #[test]
    fn capability_codes_round_trip() {
        for c in CapabilityId::ALL {
            assert_eq!(CapabilityId::from_code(c.code()), Ok(c));
        }
        assert!(CapabilityId::from_code(0x0100).is_err());
    }
}
