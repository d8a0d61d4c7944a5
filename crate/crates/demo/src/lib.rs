//! Interactive browser demo.
//!
//! Three operations from the diagnosis pipeline, exposed to JavaScript as
//! JSON so a static page can plot them: SNR-calibrated noise injection on
//! synthetic fault signatures, the coupled confidence/entropy pseudo-label
//! gate, and the subdomain attention weights.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use isgfan::attention::{AttentionConfig, AttentionState};
use isgfan::pseudo::{entropy_upper_bound, predictive_entropy};
use isgfan::seed;
use isgfan::signal::{inject_noise, NoiseSpec, NoiseType};
use isgfan::synthetic::{generate_condition, SyntheticSpec};

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("demo payloads serialize")
}

#[derive(Serialize)]
struct WaveformDemo {
    clean: Vec<f64>,
    noisy: Vec<f64>,
    signal_power: f64,
    target_noise_power: f64,
}

/// Synthesizes one segment of the requested fault class and condition, then
/// injects additive noise at the requested SNR. `noise_type` is one of
/// `gaussian`, `laplacian`, `mixed`; `condition` is `A` or `B`.
#[wasm_bindgen]
pub fn demo_waveform(
    class: usize,
    condition: &str,
    noise_type: &str,
    snr_db: f64,
    seed_value: u64,
) -> Result<String, JsError> {
    waveform_json(class, condition, noise_type, snr_db, seed_value).map_err(|e| JsError::new(&e))
}

pub fn waveform_json(
    class: usize,
    condition: &str,
    noise_type: &str,
    snr_db: f64,
    seed_value: u64,
) -> Result<String, String> {
    if class >= 4 {
        return Err("class must be 0..3".into());
    }
    let spec = SyntheticSpec {
        samples_per_class: 1,
        seed: seed::derive(seed_value, b"demo"),
        ..SyntheticSpec::default()
    };
    let records = generate_condition(&spec, condition).map_err(|e| e.to_string())?;
    let record = &records[class];
    let noise = NoiseSpec {
        noise_type: noise_type.parse::<NoiseType>().map_err(|e| e.to_string())?,
        snr_db,
        seed: seed::derive(seed_value, b"noise"),
    };
    let noisy = inject_noise(&record.waveform, &noise).map_err(|e| e.to_string())?;
    let p_signal = isgfan::signal::signal_power(&record.waveform).map_err(|e| e.to_string())?;
    Ok(to_json(&WaveformDemo {
        clean: record.waveform.clone(),
        noisy,
        signal_power: p_signal,
        target_noise_power: p_signal / 10f64.powf(snr_db / 10.0),
    }))
}

#[derive(Serialize)]
struct GatePoint {
    confidence: f64,
    entropy: f64,
    accepted: bool,
}

#[derive(Serialize)]
struct GateDemo {
    /// `(top probability, max attainable entropy)` pairs tracing the bound.
    bound_curve: Vec<(f64, f64)>,
    entropy_threshold: f64,
    xi: f64,
    max_entropy: f64,
    samples: Vec<GatePoint>,
}

/// The pseudo-label acceptance region for `classes` classes at thresholds
/// `(xi, kappa)`, plus random predictions classified by the gate.
#[wasm_bindgen]
pub fn demo_entropy_gate(
    xi: f64,
    kappa: f64,
    classes: usize,
    samples: usize,
    seed_value: u64,
) -> Result<String, JsError> {
    entropy_gate_json(xi, kappa, classes, samples, seed_value).map_err(|e| JsError::new(&e))
}

pub fn entropy_gate_json(
    xi: f64,
    kappa: f64,
    classes: usize,
    samples: usize,
    seed_value: u64,
) -> Result<String, String> {
    if !(xi > 0.0 && xi < 1.0 && kappa > 0.0 && kappa < 1.0) {
        return Err("xi and kappa must lie strictly inside (0, 1)".into());
    }
    if !(2..=64).contains(&classes) {
        return Err("classes must be in 2..=64".into());
    }
    let threshold = kappa * entropy_upper_bound(xi, classes).map_err(|e| e.to_string())?;
    let lo = 1.0 / classes as f64;
    let bound_curve: Vec<(f64, f64)> = (0..=200)
        .map(|i| {
            let m = lo + (1.0 - 1e-9 - lo) * i as f64 / 200.0;
            (m, entropy_upper_bound(m, classes).unwrap())
        })
        .collect();

    use rand::Rng;
    let mut rng = seed::rng(seed_value);
    let mut points = Vec::with_capacity(samples.min(5000));
    for _ in 0..samples.min(5000) {
        // Dirichlet draw via normalized exponentials, sharpened at random so
        // the scatter spans the confidence axis.
        let sharpen = 1.0 + 7.0 * rng.random::<f64>();
        let mut p: Vec<f64> = (0..classes)
            .map(|_| -(rng.random::<f64>().max(1e-12)).ln())
            .map(|e| e.powf(sharpen))
            .collect();
        let total: f64 = p.iter().sum();
        for v in &mut p {
            *v /= total;
        }
        let confidence = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let entropy = predictive_entropy(&p, 1e-12);
        points.push(GatePoint {
            confidence,
            entropy,
            accepted: confidence > xi && entropy < threshold,
        });
    }
    Ok(to_json(&GateDemo {
        bound_curve,
        entropy_threshold: threshold,
        xi,
        max_entropy: (classes as f64).ln(),
        samples: points,
    }))
}

#[derive(Serialize)]
struct AttentionDemo {
    weights: Vec<f64>,
    ema: Vec<f64>,
    difficulty: Vec<f64>,
    anchor: f64,
}

/// Subdomain attention weights for one batch of per-class losses and counts,
/// after `history` identical batches have shaped the EMA.
#[wasm_bindgen]
pub fn demo_attention(
    losses: Vec<f64>,
    counts: Vec<u32>,
    history: u32,
    alpha: f64,
    tau: f64,
    momentum: f64,
    beta: f64,
) -> Result<String, JsError> {
    attention_json(losses, counts, history, alpha, tau, momentum, beta)
        .map_err(|e| JsError::new(&e))
}

#[allow(clippy::too_many_arguments)]
pub fn attention_json(
    losses: Vec<f64>,
    counts: Vec<u32>,
    history: u32,
    alpha: f64,
    tau: f64,
    momentum: f64,
    beta: f64,
) -> Result<String, String> {
    if losses.len() != counts.len() || losses.is_empty() {
        return Err("losses and counts must have equal nonzero length".into());
    }
    let config = AttentionConfig {
        alpha,
        tau,
        momentum,
        beta,
        ..AttentionConfig::default()
    };
    let mut state = AttentionState::new(losses.len(), config);
    let counts: Vec<usize> = counts.into_iter().map(|c| c as usize).collect();
    let mut weights = vec![1.0 / losses.len() as f64; losses.len()];
    for _ in 0..=history.min(500) {
        weights = state
            .compute_weights_and_update(&losses, &counts)
            .map_err(|e| e.to_string())?;
    }
    let difficulty = state
        .l_ema
        .iter()
        .map(|&l| (state.theta - l).max(0.0))
        .collect();
    Ok(to_json(&AttentionDemo {
        weights,
        ema: state.l_ema.clone(),
        difficulty,
        anchor: state.theta,
    }))
}
