//! Three library operations exposed to the browser. Each returns a JSON
//! string; errors become JS exceptions carrying the message.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use champ::bus::{predict_fps, simulate_broadcast, BusConfig};
use champ::cartridge::{subject_embedding, Catalog};
use champ::experiments::{builtin_profiles, reference_table, run_hotswap};
use champ::gallery::{Gallery, Modality, Template};
use champ::scenario::Scenario;

pub const GALLERY_SUBJECTS: u32 = 16;
pub const GALLERY_DIM: usize = 128;
pub const MAX_DEVICES: u32 = 16;

/// Frame rate against device count for a built-in profile.
pub fn scaling_curve_json(profile: &str, max_n: u32, frames: u32) -> Result<String, String> {
    if !(1..=MAX_DEVICES).contains(&max_n) {
        return Err(format!("device count must be in 1..={MAX_DEVICES}"));
    }
    let profiles = builtin_profiles().map_err(|e| e.to_string())?;
    let cal = profiles.get(profile).ok_or_else(|| format!("unknown profile `{profile}`"))?;
    let config = BusConfig::default();
    let mut points = Vec::new();
    for n in 1..=max_n as usize {
        let model = predict_fps(&cal.profile, n, &config).map_err(|e| e.to_string())?;
        let sim = simulate_broadcast(&cal.profile, n, frames.max(1) as u64, &config).map_err(|e| e.to_string())?;
        let reference = reference_table(profile).and_then(|t| t.get(n - 1).copied());
        points.push(json!({"n": n, "fps_model": model, "fps_simulated": sim.fps, "reference_fps": reference}));
    }
    Ok(json!({"profile": cal.profile, "clamped": cal.clamped, "points": points}).to_string())
}

/// Plays a scenario (same JSON as the CLI) and returns its report.
pub fn hotswap_timeline_json(scenario: &str, seed: u32) -> Result<String, String> {
    let s = Scenario::from_json(scenario).map_err(|e| e.to_string())?;
    // keep the page responsive
    if s.duration_ms > 120_000 {
        return Err("scenario longer than 120 s".into());
    }
    let report = run_hotswap(&s, &Catalog::builtin(), seed as u64).map_err(|e| e.to_string())?;
    Ok(report.to_json())
}

/// Probes the synthetic gallery with subject `subject`'s embedding plus
/// uniform noise of amplitude `noise` per component.
pub fn match_probe_json(subject: u32, noise: f64, top_k: u32, seed: u32) -> Result<String, String> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err("noise must be >= 0".into());
    }
    let gallery = Gallery::synthetic(GALLERY_SUBJECTS, GALLERY_DIM).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let raw: Vec<f64> = subject_embedding(subject, GALLERY_DIM)
        .into_iter()
        .map(|x| if noise > 0.0 { x + rng.gen_range(-noise..=noise) } else { x })
        .collect();
    let probe = Template::from_raw("probe", Modality::Face, &raw).map_err(|e| e.to_string())?;
    let matches = gallery
        .match_probe(&probe, top_k.max(1) as usize, -1.0)
        .map_err(|e| e.to_string())?;
    Ok(json!({
        "subject": subject,
        "gallery_size": gallery.len(),
        "matches": matches.iter().map(|m| json!({"rank": m.rank, "subject_id": m.subject_id, "score": m.score})).collect::<Vec<_>>(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn scaling_curve(profile: &str, max_n: u32, frames: u32) -> Result<String, JsValue> {
    scaling_curve_json(profile, max_n, frames).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn hotswap_timeline(scenario: &str, seed: u32) -> Result<String, JsValue> {
    hotswap_timeline_json(scenario, seed).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn match_probe(subject: u32, noise: f64, top_k: u32, seed: u32) -> Result<String, JsValue> {
    match_probe_json(subject, noise, top_k, seed).map_err(|e| JsValue::from_str(&e))
}
