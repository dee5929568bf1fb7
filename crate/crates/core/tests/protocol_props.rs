use champ::protocol::{
    decode, encode, partition, reassemble, CapabilityDescriptor, CapabilityId, ControlKind, ControlMessage, DataFormat,
    FormatKind, FrameEnvelope, LatencySpec, Message, Mode,
};
use proptest::prelude::*;

fn capability() -> impl Strategy<Value = CapabilityId> {
    prop::sample::select(CapabilityId::ALL.to_vec())
}

fn format() -> impl Strategy<Value = DataFormat> {
    prop_oneof![
        Just(DataFormat::any(FormatKind::Opaque)),
        Just(DataFormat::any(FormatKind::BoundingBoxSet)),
        Just(DataFormat::any(FormatKind::QualityScoreSet)),
        Just(DataFormat::any(FormatKind::MatchResultSet)),
        (1u32..4096, 1u32..4096, 1u32..5).prop_map(|(w, h, c)| DataFormat::image(w, h, c)),
        (1u32..2048).prop_map(DataFormat::embedding),
        Just(DataFormat::any(FormatKind::EmbeddingVector)),
    ]
}

fn frame() -> impl Strategy<Value = FrameEnvelope> {
    (
        any::<u32>(),
        any::<u64>(),
        (1u16..=u16::MAX).prop_flat_map(|count| (0..count, Just(count))),
        format(),
        prop::collection::vec(any::<u8>(), 0..512),
        prop::collection::vec(capability(), 0..8),
    )
        .prop_map(|(stream_id, sequence, (partition_index, partition_count), payload_format, payload, hop_trail)| {
            FrameEnvelope {
                stream_id,
                sequence,
                partition_index,
                partition_count,
                payload_format,
                payload,
                hop_trail,
            }
        })
}

fn descriptor() -> impl Strategy<Value = CapabilityDescriptor> {
    (capability(), format(), format(), any::<bool>(), any::<u32>(), 1u32..10_000, any::<u32>(), any::<u32>()).prop_map(
        |(capability, input_format, output_format, bypassable, load, mean, jitter_seed, bytes)| CapabilityDescriptor {
            capability,
            input_format,
            output_format,
            mode: if capability == CapabilityId::DatabaseStorage {
                Mode::RequestResponse
            } else {
                Mode::Streaming
            },
            bypassable,
            model_load_time_ms: load,
            per_frame_latency: LatencySpec {
                mean_ms: mean,
                jitter_ms: jitter_seed % (mean + 1),
            },
            output_bytes_per_frame: bytes,
        },
    )
}

fn control() -> impl Strategy<Value = ControlMessage> {
    let kind = prop_oneof![
        Just(ControlKind::HandshakeRequest),
        descriptor().prop_map(|descriptor| ControlKind::HandshakeReply { descriptor }),
        any::<i32>().prop_map(|credit_delta| ControlKind::Throttle { credit_delta }),
        Just(ControlKind::Pause),
        Just(ControlKind::Resume),
        Just(ControlKind::Detach),
    ];
    (kind, any::<u64>()).prop_map(|(kind, issued_at_ms)| ControlMessage { kind, issued_at_ms })
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![frame().prop_map(Message::Frame), control().prop_map(Message::Control)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn encode_decode_round_trip(m in message()) {
        let bytes = encode(&m).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100_000))]

    // Random bytes, half of them behind a valid magic so the body parser is
    // exercised too. Passing means no panic.
    #[test]
    fn decoder_never_panics(prefix in any::<bool>(), class in 0u8..4, mut body in prop::collection::vec(any::<u8>(), 0..96)) {
        let mut bytes = Vec::new();
        if prefix {
            bytes.extend_from_slice(b"CHMP");
            bytes.push(class);
            bytes.extend_from_slice(&(body.len() as u32).to_be_bytes());
            if let Some(b) = body.first_mut() { *b = 1; }
        }
        bytes.extend_from_slice(&body);
        let _ = decode(&bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn mutated_encodings_never_panic(m in message(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..6), cut in any::<prop::sample::Index>()) {
        let mut bytes = encode(&m).unwrap();
        for (i, v) in &flips {
            let i = i.index(bytes.len());
            bytes[i] ^= v;
        }
        let _ = decode(&bytes);
        let _ = decode(&bytes[..cut.index(bytes.len() + 1)]);
    }

    #[test]
    fn partition_then_reassemble_is_identity(payload in prop::collection::vec(any::<u8>(), 0..4096), chunk in 1usize..600, seed in any::<u64>()) {
        let env = FrameEnvelope::new(3, 9, DataFormat::any(FormatKind::Opaque), payload.clone());
        let mut parts = partition(&env, chunk).unwrap();
        prop_assert_eq!(parts.len(), payload.len().div_ceil(chunk).max(1));
        for p in &parts {
            prop_assert!(p.payload.len() <= chunk);
        }
        // any order reassembles
        let n = parts.len();
        if n > 1 {
            let k = (seed % n as u64) as usize;
            parts.rotate_left(k);
            parts.swap(0, n - 1);
        }
        prop_assert_eq!(reassemble(&parts).unwrap(), payload);
    }
}

#[test]
fn partitions_round_trip_through_the_wire() {
    let payload: Vec<u8> = (0..10_000u32).map(|i| (i * 7) as u8).collect();
    let env = FrameEnvelope::new(1, 2, DataFormat::image(64, 52, 3), payload.clone());
    for chunk in [1, 2, 3, 7, 64, 999, 4096, 9_999, 10_000, 10_001] {
        let parts: Vec<FrameEnvelope> = partition(&env, chunk)
            .unwrap()
            .into_iter()
            .map(|p| match decode(&encode(&Message::Frame(p)).unwrap()).unwrap() {
                Message::Frame(f) => f,
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(reassemble(&parts).unwrap(), payload, "chunk {chunk}");
    }
}
