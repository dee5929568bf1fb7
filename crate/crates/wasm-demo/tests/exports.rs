use champ_wasm_demo::{hotswap_timeline_json, match_probe_json, scaling_curve_json};
use serde_json::Value;

#[test]
fn scaling_curve_tracks_reference() {
    let v: Value = serde_json::from_str(&scaling_curve_json("ncs2", 5, 50).unwrap()).unwrap();
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 5);
    for p in points {
        let sim = p["fps_simulated"].as_f64().unwrap();
        let reference = p["reference_fps"].as_f64().unwrap();
        assert!((sim - reference).abs() <= 1.0, "{p}");
    }
    let v: Value = serde_json::from_str(&scaling_curve_json("coral", 8, 10).unwrap()).unwrap();
    assert!(v["points"][7]["reference_fps"].is_null());
    assert!(scaling_curve_json("tpu", 3, 10).is_err());
    assert!(scaling_curve_json("coral", 0, 10).is_err());
}

#[test]
fn timeline_reports_pauses() {
    let scenario = r#"[{"at_ms": 1000, "kind": "remove", "slot": 1}, {"at_ms": 3000, "kind": "insert", "slot": 1, "preset": "face-quality"}]"#;
    let v: Value = serde_json::from_str(&hotswap_timeline_json(scenario, 1).unwrap()).unwrap();
    let pauses: Vec<f64> = v["metrics"]["pauses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["pause_ms"].as_f64().unwrap())
        .collect();
    assert_eq!(pauses, [500.0, 2000.0]);
    assert_eq!(v["metrics"]["frames_lost"], 0);
    assert!(hotswap_timeline_json("not json", 1).is_err());
    assert!(hotswap_timeline_json(r#"{"duration_ms": 600000, "events": []}"#, 1).is_err());
}

#[test]
fn clean_probe_ranks_its_subject_first() {
    let v: Value = serde_json::from_str(&match_probe_json(3, 0.0, 3, 0).unwrap()).unwrap();
    assert_eq!(v["matches"][0]["subject_id"], "subject-0003");
    assert!((v["matches"][0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(v["matches"].as_array().unwrap().len(), 3);
    // mild noise keeps the rank, lowers the score
    let v: Value = serde_json::from_str(&match_probe_json(3, 0.02, 1, 5).unwrap()).unwrap();
    assert_eq!(v["matches"][0]["subject_id"], "subject-0003");
    assert!(v["matches"][0]["score"].as_f64().unwrap() < 1.0);
    assert!(match_probe_json(3, -1.0, 1, 0).is_err());
}
