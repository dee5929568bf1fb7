use champ::cartridge::{Cartridge, CartridgeError, CartridgeState, Catalog};
use champ::payload;
use champ::protocol::{CapabilityId, DataFormat, FrameEnvelope};
use champ::SimTime;

#[derive(Debug, Clone, Copy)]
enum Op {
    Plug,
    Handshake,
    PollEarly,
    PollLate,
    Process,
    Complete,
    Remove,
}

const OPS: [Op; 7] = [
    Op::Plug,
    Op::Handshake,
    Op::PollEarly,
    Op::PollLate,
    Op::Process,
    Op::Complete,
    Op::Remove,
];

/// Reference lifecycle, written out as a table.
fn model(s: CartridgeState, op: Op) -> Option<CartridgeState> {
    use CartridgeState::*;
    match (op, s) {
        (Op::Plug, Unplugged | Removed) => Some(Handshaking),
        (Op::Handshake, Handshaking) => Some(LoadingModel),
        (Op::PollEarly, s) => Some(s),
        (Op::PollLate, LoadingModel) => Some(Ready),
        (Op::PollLate, s) => Some(s),
        (Op::Process, Ready) => Some(Busy),
        (Op::Complete, Busy) => Some(Ready),
        (Op::Remove, s) if s != Removed => Some(Removed),
        _ => None,
    }
}

fn frame(seq: u64) -> FrameEnvelope {
    FrameEnvelope::new(1, seq, DataFormat::image(640, 480, 3), vec![0; 16])
}

fn apply(c: &mut Cartridge, op: Op) -> Result<(), CartridgeError> {
    match op {
        Op::Plug => c.plug(4),
        Op::Handshake => c.handshake(SimTime::from_millis(100)).map(|_| ()),
        Op::PollEarly => {
            c.poll(SimTime::from_millis(101));
            Ok(())
        }
        Op::PollLate => {
            c.poll(SimTime::from_millis(100_000));
            Ok(())
        }
        Op::Process => c.process(&frame(1)).map(|_| ()),
        Op::Complete => c.complete(),
        Op::Remove => c.remove(),
    }
}

fn walk(c: &Cartridge, depth: usize, visited: &mut usize) {
    if depth == 0 {
        return;
    }
    for op in OPS {
        let mut next = c.clone();
        let before = c.state();
        let result = apply(&mut next, op);
        *visited += 1;
        match model(before, op) {
            Some(want) => {
                assert!(result.is_ok(), "{before:?} {op:?}: {result:?}");
                assert_eq!(next.state(), want, "{before:?} {op:?}");
                if want != before {
                    assert!(CartridgeState::is_legal_transition(before, want));
                }
            }
            None => {
                assert!(
                    matches!(result, Err(CartridgeError::WrongState { actual, .. }) if actual == before),
                    "{before:?} {op:?}: {result:?}"
                );
                assert_eq!(next.state(), before, "failed op must not change state");
            }
        }
        assert_eq!(
            next.slot().is_some(),
            !matches!(next.state(), CartridgeState::Unplugged | CartridgeState::Removed)
        );
        walk(&next, depth - 1, visited);
    }
}

#[test]
fn lifecycle_matches_reference_for_all_short_scripts() {
    let c = Catalog::builtin().instantiate("face-detect", 1, 9).unwrap();
    let mut visited = 0;
    walk(&c, 6, &mut visited);
    assert_eq!(visited, (1..=6).map(|k| 7usize.pow(k)).sum::<usize>());
}

#[test]
fn legal_transition_table() {
    use CartridgeState::*;
    let legal: Vec<(CartridgeState, CartridgeState)> = CartridgeState::ALL
        .iter()
        .flat_map(|&a| CartridgeState::ALL.iter().map(move |&b| (a, b)))
        .filter(|&(a, b)| CartridgeState::is_legal_transition(a, b))
        .collect();
    assert_eq!(
        legal,
        vec![
            (Unplugged, Handshaking),
            (Unplugged, Removed),
            (Handshaking, LoadingModel),
            (Handshaking, Removed),
            (LoadingModel, Ready),
            (LoadingModel, Removed),
            (Ready, Busy),
            (Ready, Removed),
            (Busy, Ready),
            (Busy, Removed),
            (Removed, Handshaking),
        ]
    );
}

fn ready(name: &str, seed: u64) -> Cartridge {
    let mut c = Catalog::builtin().instantiate(name, 1, seed).unwrap();
    c.plug(0).unwrap();
    c.handshake(SimTime::ZERO).unwrap();
    c.poll(SimTime::from_millis(10_000));
    c
}

#[test]
fn jittered_latency_mean_converges() {
    let c = ready("gait-embed", 17);
    let d = c.descriptor().per_frame_latency;
    let (lo, hi) = ((d.mean_ms - d.jitter_ms) as f64, (d.mean_ms + d.jitter_ms) as f64);
    let mut total = 0.0;
    let n = 10_000;
    for seq in 0..n {
        let (_, t) = c.evaluate(&frame(seq)).unwrap();
        let ms = t.as_millis_f64();
        assert!((lo..=hi).contains(&ms));
        total += ms;
    }
    let mean = total / n as f64;
    assert!((mean - d.mean_ms as f64).abs() <= 0.02 * d.mean_ms as f64, "mean {mean}");
}

#[test]
fn outputs_are_reproducible_per_seed() {
    let a = ready("face-detect", 5);
    let b = ready("face-detect", 5);
    let other = ready("face-detect", 6);
    let mut differs = false;
    for seq in 0..50 {
        let (x, tx) = a.evaluate(&frame(seq)).unwrap();
        let (y, ty) = b.evaluate(&frame(seq)).unwrap();
        assert_eq!((x.clone(), tx), (y, ty));
        differs |= other.evaluate(&frame(seq)).unwrap().0.payload != x.payload;
    }
    assert!(differs);
}

#[test]
fn face_chain_produces_matches() {
    let catalog = Catalog::builtin();
    let mut f = champ::scenario::CartridgeFactory::new(catalog, 3);
    let mut stages: Vec<Cartridge> = ["face-detect", "face-quality", "face-embed", "database"]
        .iter()
        .map(|p| {
            let mut c = f.make(p).unwrap();
            c.plug(0).unwrap();
            c.handshake(SimTime::ZERO).unwrap();
            c.poll(SimTime::from_millis(10_000));
            c
        })
        .collect();
    for seq in 0..20 {
        let mut env = frame(seq);
        for c in &mut stages {
            env = c.process(&env).unwrap().0;
            c.complete().unwrap();
        }
        assert_eq!(
            env.hop_trail,
            vec![
                CapabilityId::FaceDetection,
                CapabilityId::FaceQuality,
                CapabilityId::FaceRecognition,
                CapabilityId::DatabaseStorage
            ]
        );
        let matches = payload::decode_matches(&env.payload).unwrap();
        assert!(!matches.is_empty());
        for m in matches {
            // the synthetic gallery enrolls every subject the detector can emit
            assert_eq!(m.matched, Some(champ::gallery::subject_label(m.probe_subject)));
            assert!((m.score - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn wrong_input_format_is_refused() {
    let mut c = ready("face-embed", 1);
    assert!(matches!(
        c.process(&frame(0)),
        Err(CartridgeError::FormatMismatch { .. })
    ));
    assert_eq!(c.state(), CartridgeState::Ready);
}
