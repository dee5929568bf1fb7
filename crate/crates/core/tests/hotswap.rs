use champ::cartridge::{CartridgeState, Catalog};
use champ::experiments::{frames_lost, run_hotswap, run_latency};
use champ::kernel::{
    BufferPolicy, HotplugKind, Kernel, KernelCommand, KernelConfig, KernelEvent, Phase, StageRole, SwapCause, HANDOFF,
};
use champ::protocol::{CapabilityId, LatencySpec};
use champ::scenario::{self, CartridgeFactory, Scenario};
use champ::SimTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIDDLE: &str = include_str!("../fixtures/hotswap_middle.json");
const SAME_MS: &str = include_str!("../fixtures/swap_same_ms.json");
const DEGRADE: &str = include_str!("../fixtures/degrade_detect.json");

fn lost(k: &Kernel) -> u64 {
    let delivered: Vec<u64> = k.sink().iter().map(|r| r.sequence).collect();
    frames_lost(k.accepted(), &delivered, &k.held_sequences())
}

fn metric<'a>(report: &'a serde_json::Value, path: &[&str]) -> &'a serde_json::Value {
    path.iter().fold(report, |v, p| &v[*p])
}

#[test]
fn three_thirty_ms_stages_land_in_band() {
    let r = run_latency(&[30, 30, 30], 500, 1).unwrap();
    let mean = r.metrics["latency_ms"]["mean"].as_f64().unwrap();
    assert!((90.0..=100.0).contains(&mean), "mean {mean}");
    assert!((mean - 94.5).abs() < 1e-6);
    assert!(r.metrics["overhead_fraction"].as_f64().unwrap() <= 0.10);
    assert!(r.metrics["handoff_fraction"].as_f64().unwrap() <= 0.05);
    assert_eq!(r.metrics["frames_lost"], 0);
    assert!(r.passed, "{}", r.to_json());
}

#[test]
fn latency_analytic_cases() {
    let one = run_latency(&[30], 100, 1).unwrap();
    assert!((one.metrics["latency_ms"]["mean"].as_f64().unwrap() - 31.5).abs() < 1e-6);
    let none = run_latency(&[], 50, 1).unwrap();
    assert_eq!(
        none.metrics["latency_ms"]["mean"].as_f64().unwrap(),
        HANDOFF.as_millis_f64()
    );
    let mixed = run_latency(&[10, 45, 20, 5], 200, 3).unwrap();
    assert!((mixed.metrics["latency_ms"]["mean"].as_f64().unwrap() - (80.0 + 6.0)).abs() < 1e-6);
    assert!(mixed.passed);
}

#[test]
fn latency_reports_are_deterministic() {
    let a = run_latency(&[30, 30, 30], 200, 42).unwrap().to_json();
    let b = run_latency(&[30, 30, 30], 200, 42).unwrap().to_json();
    assert_eq!(a, b);
}

#[test]
fn slow_stage_backpressures_the_source() {
    let catalog = Catalog::builtin();
    let d = catalog.with_latency("face-detect", LatencySpec::fixed(300)).unwrap();
    let slow = champ::cartridge::Cartridge::new(1, d, 5).unwrap();
    let mut config = KernelConfig::default();
    config.source.period = SimTime::from_millis(10);
    config.source.max_frames = Some(100);
    let mut k = Kernel::boot(config, vec![(0, slow)]).unwrap();
    k.run_until(SimTime::from_millis(10_000));
    assert!(k.max_link_depths()[0] <= 8);
    assert_eq!(k.max_link_depths()[0], 8);
    assert!(k.source_stalls() > 0);
    assert_eq!(k.holdback_len(), 0);
    assert_eq!(lost(&k), 0);
    assert!(k.run_to_idle(SimTime::from_millis(120_000)));
    assert_eq!(k.sink().len(), 100);
    assert_eq!(k.order_violations(), 0);
}

#[test]
fn credits_bound_every_link() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let credits = rng.gen_range(1..=8);
        let mut config = KernelConfig::default();
        config.buffer_policy = BufferPolicy { capacity: 8, credits };
        config.source.period = SimTime::from_millis(rng.gen_range(1..40));
        config.source.max_frames = Some(80);
        let mut f = CartridgeFactory::new(Catalog::builtin(), rng.gen());
        let plugged = ["face-detect", "face-quality", "face-embed", "database"]
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u32, f.make(p).unwrap()))
            .collect();
        let mut k = Kernel::boot(config, plugged).unwrap();
        assert!(k.run_to_idle(SimTime::from_millis(600_000)));
        assert!(k.max_link_depths().iter().all(|&d| d <= credits));
        let seqs: Vec<u64> = k.sink().iter().map(|r| r.sequence).collect();
        assert_eq!(seqs, (0..80).collect::<Vec<_>>());
    }
}

#[test]
fn removing_bypassable_middle_stage() {
    let s = Scenario::from_json(MIDDLE).unwrap();
    let r = run_hotswap(&s, &Catalog::builtin(), 7).unwrap();
    assert!(r.passed, "{}", r.to_json());
    let pauses = metric(&r.metrics, &["pauses"]).as_array().unwrap();
    assert_eq!(pauses.len(), 2);
    assert_eq!(pauses[0]["cause"], "removal");
    assert!(pauses[0]["pause_ms"].as_f64().unwrap() <= 500.0);
    assert_eq!(pauses[1]["cause"], "insertion");
    assert!(pauses[1]["pause_ms"].as_f64().unwrap() <= 2000.0);
    assert_eq!(r.metrics["frames_lost"], 0);
    let trails = r.metrics["post_swap_trails"].as_object().unwrap();
    assert!(trails.contains_key("FaceDetection>FaceRecognition"));
    assert!(trails.contains_key("FaceDetection>FaceQuality>FaceRecognition"));
    let phases: Vec<&str> = r.metrics["phases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["phase"].as_str().unwrap())
        .collect();
    assert_eq!(phases, ["reconfiguring", "running", "reconfiguring", "running"]);
}

#[test]
fn bypassed_frames_keep_pass_through_hop() {
    let s = Scenario::from_json(MIDDLE).unwrap();
    let mut f = CartridgeFactory::new(Catalog::builtin(), 1);
    let k = scenario::play(&s, &mut f, KernelConfig::default(), SimTime::from_millis(60_000)).unwrap();
    let during: Vec<_> = k
        .sink()
        .iter()
        .filter(|r| r.accepted_at > SimTime::from_millis(6000) && r.accepted_at < SimTime::from_millis(14_000))
        .collect();
    assert!(!during.is_empty());
    for r in during {
        assert_eq!(
            r.hop_trail,
            vec![CapabilityId::FaceDetection, CapabilityId::PassThrough, CapabilityId::FaceRecognition]
        );
    }
}

#[test]
fn remove_and_insert_in_the_same_millisecond() {
    let s = Scenario::from_json(SAME_MS).unwrap();
    let mut f = CartridgeFactory::new(Catalog::builtin(), 1);
    let k = scenario::play(&s, &mut f, KernelConfig::default(), SimTime::from_millis(60_000)).unwrap();
    let pauses: Vec<(SwapCause, u64)> = k
        .pauses()
        .iter()
        .map(|p| (p.cause, p.duration().unwrap().as_micros() / 1000))
        .collect();
    assert_eq!(pauses, vec![(SwapCause::Removal, 500), (SwapCause::Insertion, 2000)]);
    // the insert waited for the removal to finish
    assert_eq!(k.pauses()[1].start, k.pauses()[0].end.unwrap());
    assert_eq!(lost(&k), 0);
    assert_eq!(k.order_violations(), 0);
}

#[test]
fn removing_detector_degrades_and_alerts() {
    let s = Scenario::from_json(DEGRADE).unwrap();
    let r = run_hotswap(&s, &Catalog::builtin(), 3).unwrap();
    assert!(r.passed, "{}", r.to_json());
    let mut f = CartridgeFactory::new(Catalog::builtin(), 3);
    let mut k = scenario::prepare(&s, &mut f, KernelConfig::default()).unwrap();
    k.run_until(SimTime::from_millis(5000));
    assert_eq!(
        k.phase(),
        &Phase::Degraded {
            missing: CapabilityId::FaceDetection
        }
    );
    assert_eq!(k.alerts().len(), 1);
    assert_eq!(k.alerts()[0].capability, Some(CapabilityId::FaceDetection));
    let past = k.sequences_past(0);
    let mark = k.sink().len();
    k.run_until(SimTime::from_millis(11_999));
    // only what was already downstream of the gap drains out
    assert!(k.sink()[mark..].iter().all(|r| past.contains(&r.sequence)));
    let stalled_at = k.sink().len();
    k.run_until(SimTime::from_millis(12_000 + 2000));
    assert_eq!(k.sink().len(), stalled_at, "nothing moves during reinsertion");
    k.run_until(SimTime::from_millis(20_000));
    assert_eq!(k.phase(), &Phase::Running);
    assert!(k.sink().len() > stalled_at);
    k.stop_source();
    k.run_to_idle(SimTime::from_millis(200_000));
    assert_eq!(lost(&k), 0);
    assert_eq!(k.held_sequences().len(), 0);
    assert_eq!(k.order_violations(), 0);
    for r in k.sink() {
        assert!(r.hop_trail.contains(&CapabilityId::FaceDetection));
    }
}

#[test]
fn observers_see_phase_sequence() {
    let s = Scenario::from_json(MIDDLE).unwrap();
    let mut f = CartridgeFactory::new(Catalog::builtin(), 1);
    let mut k = scenario::prepare(&s, &mut f, KernelConfig::default()).unwrap();
    k.run_until(SimTime::from_millis(6000));
    let phases: Vec<Phase> = k
        .take_events()
        .into_iter()
        .filter_map(|e| match e {
            KernelEvent::PhaseChanged { phase, .. } => Some(phase),
            _ => None,
        })
        .collect();
    assert_eq!(
        phases,
        vec![
            Phase::Reconfiguring {
                deadline: SimTime::from_millis(5500)
            },
            Phase::Running
        ]
    );
    let snap = k.snapshot();
    assert_eq!(snap.stages.len(), 3);
    assert_eq!(snap.stages[1].role, StageRole::Bypassed);
}

#[test]
fn empty_script_has_no_pauses() {
    let s = Scenario::from_json("[]").unwrap();
    let r = run_hotswap(&s, &Catalog::builtin(), 1).unwrap();
    assert!(r.passed);
    assert!(r.metrics["pauses"].as_array().unwrap().is_empty());
    assert_eq!(r.metrics["frames_lost"], 0);
}

#[test]
fn hotswap_reports_are_deterministic() {
    let s = Scenario::from_json(MIDDLE).unwrap();
    let a = run_hotswap(&s, &Catalog::builtin(), 9).unwrap().to_json();
    let b = run_hotswap(&s, &Catalog::builtin(), 9).unwrap().to_json();
    assert_eq!(a, b);
}

#[test]
fn reorder_through_command_queue() {
    let catalog = Catalog::builtin();
    let mut f = CartridgeFactory::new(catalog, 1);
    let plugged = vec![
        (0, f.make("face-detect").unwrap()),
        (1, f.make("face-quality").unwrap()),
        (2, f.make("object-detect").unwrap()),
    ];
    // object-detect wants frames, so it cannot follow the quality stage
    assert!(Kernel::boot(KernelConfig::default(), plugged).is_err());
    let plugged = vec![
        (0, f.make("face-detect").unwrap()),
        (1, f.make("face-quality").unwrap()),
        (2, f.make("face-quality").unwrap()),
    ];
    let mut config = KernelConfig::default();
    config.source.max_frames = Some(200);
    let mut k = Kernel::boot(config, plugged).unwrap();
    let tx = k.command_sender();
    k.run_until(SimTime::from_millis(1000));
    tx.send(KernelCommand::Reorder(vec![(0, 1), (1, 0)]));
    k.run_until(SimTime::from_millis(1000));
    let swaps: Vec<_> = k
        .take_events()
        .into_iter()
        .filter_map(|e| match e {
            KernelEvent::Swap { outcome, .. } => Some(outcome),
            _ => None,
        })
        .collect();
    assert!(
        matches!(&swaps[..], [champ::kernel::SwapOutcome::Rejected { .. }]),
        "{swaps:?}"
    );
    tx.send(KernelCommand::Reorder(vec![(1, 2), (2, 1)]));
    assert!(k.run_to_idle(SimTime::from_millis(100_000)));
    assert_eq!(k.pauses().len(), 1, "{:?}", k.take_events());
    assert!(k.pauses()[0].duration().unwrap() >= SimTime::from_millis(500));
    assert_eq!(lost(&k), 0);
    assert_eq!(k.sink().len(), 200);
    assert_eq!(k.order_violations(), 0);
}

#[derive(Debug, Clone, Copy)]
enum Act {
    Remove(u32),
    Insert(u32, &'static str),
}

const ACTS: [Act; 7] = [
    Act::Remove(0),
    Act::Remove(1),
    Act::Remove(2),
    Act::Insert(0, "face-detect"),
    Act::Insert(1, "face-quality"),
    Act::Insert(2, "face-embed"),
    Act::Insert(1, "face-embed"),
];

fn check_script(script: &[Act], seed: u64) {
    let mut f = CartridgeFactory::new(Catalog::builtin(), seed);
    let plugged = vec![
        (0, f.make("face-detect").unwrap()),
        (1, f.make("face-quality").unwrap()),
        (2, f.make("face-embed").unwrap()),
    ];
    let mut config = KernelConfig::default();
    config.source.period = SimTime::from_millis(20);
    let mut k = Kernel::boot(config, plugged).unwrap();
    for (i, a) in script.iter().enumerate() {
        let at = SimTime::from_millis(300 + 700 * i as u64);
        let cmd = match *a {
            Act::Remove(slot) => KernelCommand::Hotplug(HotplugKind::Remove { slot }),
            Act::Insert(slot, p) => KernelCommand::Hotplug(HotplugKind::Insert {
                slot,
                cartridge: Box::new(f.make(p).unwrap()),
            }),
        };
        k.schedule_command(at, cmd).unwrap();
    }
    let end = SimTime::from_millis(300 + 700 * script.len() as u64 + 3000);
    let mut t = SimTime::ZERO;
    while t < end {
        t += SimTime::from_millis(250);
        k.run_until(t);
        let snap = k.snapshot();
        // slot-order law
        assert!(snap.stages.windows(2).all(|w| w[0].slot < w[1].slot), "{script:?}");
        for s in &snap.stages {
            assert!(s.queue_depth <= 8);
            if s.role == StageRole::Active {
                assert!(matches!(s.cartridge_state, Some(CartridgeState::Ready | CartridgeState::Busy)));
            }
        }
        assert_eq!(lost(&k), 0, "{script:?}");
    }
    k.stop_source();
    k.run_to_idle(end + SimTime::from_millis(300_000));
    assert_eq!(lost(&k), 0, "{script:?}");
    assert_eq!(k.order_violations(), 0, "{script:?}");
    for p in k.pauses() {
        let limit = match p.cause {
            SwapCause::Removal => 500,
            SwapCause::Insertion => 2000,
            SwapCause::Reorder => u64::MAX,
        };
        assert!(p.duration().unwrap().as_micros() <= limit * 1000, "{script:?}");
    }
    // every delivered frame went through the detector
    assert!(k.sink().iter().all(|r| r.hop_trail.first() == Some(&CapabilityId::FaceDetection)));
    if matches!(k.phase(), Phase::Running) {
        assert!(k.held_sequences().is_empty(), "{script:?}");
    }
}

#[test]
fn every_short_hotplug_script_conserves_frames() {
    let mut scripts: Vec<Vec<Act>> = vec![vec![]];
    let mut frontier = scripts.clone();
    for _ in 0..3 {
        let next: Vec<Vec<Act>> = frontier
            .iter()
            .flat_map(|s| {
                ACTS.iter().map(move |a| {
                    let mut s = s.clone();
                    s.push(*a);
                    s
                })
            })
            .collect();
        scripts.extend(next.iter().cloned());
        frontier = next;
    }
    for (i, s) in scripts.iter().enumerate() {
        check_script(s, i as u64);
    }
}

#[test]
fn random_six_step_hotplug_scripts_conserve_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..150 {
        let script: Vec<Act> = (0..6).map(|_| ACTS[rng.gen_range(0..ACTS.len())]).collect();
        check_script(&script, i);
    }
}
