//! Browser bindings for three small explorers. Each export takes plain
//! values and returns a JSON string; the native `*_json` functions hold the
//! logic so they can be tested without a JS host.

use qmoe::audio::{hz_to_mel, mel_centers, mel_filter_matrix};
use qmoe::moe::{curiosity_probs, top_k};
use qmoe::nn::TERNARY_INIT_RATIO;
use qmoe::quant::{quantize_bitlinear, quantize_sign, quantize_ternary, QuantScheme};
use qmoe::tensor::{softmax_temp_f64, Matrix};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    let vals: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<Result<_, _>>()?;
    if vals.is_empty() {
        return Err("no values".into());
    }
    Ok(vals)
}

/// Gate probabilities before and after the curiosity bonus, with the top-k
/// pick from each.
pub fn route_json(logits: &str, kl: &str, alpha: f64, temperature: f64, k: usize) -> Result<Value, String> {
    let logits = parse_list(logits)?;
    let kl = parse_list(kl)?;
    if kl.len() != logits.len() {
        return Err(format!("{} logits but {} KL terms", logits.len(), kl.len()));
    }
    if k == 0 || k > logits.len() {
        return Err(format!("k must be in 1..={}", logits.len()));
    }
    if kl.iter().any(|&d| d < 0.0) {
        return Err("KL terms are non-negative".into());
    }
    let base = softmax_temp_f64(&logits, temperature).map_err(|e| e.to_string())?;
    let curious = curiosity_probs(&base, &kl, alpha).map_err(|e| e.to_string())?;
    Ok(json!({
        "base": base.as_slice(),
        "curious": curious.as_slice(),
        "base_top_k": top_k(base.as_slice(), k),
        "curious_top_k": top_k(curious.as_slice(), k),
    }))
}

/// Codes and reconstruction of one weight row under a scheme name such as
/// `q4`, `q1`, `ternary` or `bitwise`.
pub fn quantize_json(values: &str, scheme: &str) -> Result<Value, String> {
    let vals = parse_list(values)?;
    let w: Vec<f32> = vals.iter().map(|&v| v as f32).collect();
    let m = Matrix::from_vec(1, w.len(), w.clone()).map_err(|e| e.to_string())?;
    let scheme: QuantScheme = scheme.parse().map_err(|e: qmoe::Error| e.to_string())?;
    let (codes, recon, extra): (Vec<i32>, Vec<f32>, Value) = match scheme {
        QuantScheme::Float32 => (Vec::new(), w.clone(), json!({})),
        QuantScheme::BitLinear(k) if k.get() > 1 => {
            let q = quantize_bitlinear(&m, k).map_err(|e| e.to_string())?;
            let recon = q.codes.iter().map(|&c| c as f32 * q.scale + q.mean).collect();
            (q.codes, recon, json!({"scale": q.scale, "mean": q.mean}))
        }
        QuantScheme::BitLinear(_) | QuantScheme::BitwiseBinary => {
            let (codes, scale) = quantize_sign(&m).map_err(|e| e.to_string())?;
            let recon = codes.iter().map(|&c| c as f32 * scale).collect();
            (codes, recon, json!({"scale": scale}))
        }
        QuantScheme::Ternary => {
            let mean_abs = w.iter().map(|v| v.abs()).sum::<f32>() / w.len() as f32;
            let tau = TERNARY_INIT_RATIO * mean_abs;
            let t = quantize_ternary(&m, tau).map_err(|e| e.to_string())?;
            let active: Vec<f32> = w.iter().map(|v| v.abs()).filter(|&a| a > tau).collect();
            let alpha = if active.is_empty() { tau.max(1e-8) } else { active.iter().sum::<f32>() / active.len() as f32 };
            let codes: Vec<i32> = t.iter().map(|&c| c as i32).collect();
            let recon = codes.iter().map(|&c| c as f32 * alpha).collect();
            (codes, recon, json!({"tau": tau, "alpha": alpha}))
        }
    };
    let mse = w.iter().zip(&recon).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / w.len() as f64;
    Ok(json!({
        "scheme": scheme.to_string(),
        "bits": scheme.code_bits(),
        "codes": codes,
        "reconstruction": recon,
        "mse": mse,
        "params": extra,
    }))
}

/// Triangle filters as sparse rows plus their centre frequencies.
pub fn mel_json(window: usize, mel_bins: usize, sample_rate: u32) -> Result<Value, String> {
    if window > 1 << 14 {
        return Err("window too large for the demo".into());
    }
    let fm = mel_filter_matrix(window, mel_bins, sample_rate).map_err(|e| e.to_string())?;
    let centers = mel_centers(mel_bins, sample_rate).map_err(|e| e.to_string())?;
    let bin_hz = sample_rate as f64 / window as f64;
    let filters: Vec<Value> = (0..fm.rows())
        .map(|r| {
            let row = fm.row(r);
            let start = row.iter().position(|&v| v > 0.0).unwrap_or(0);
            let end = row.iter().rposition(|&v| v > 0.0).map_or(start, |e| e + 1);
            json!({"start_bin": start, "weights": &row[start..end]})
        })
        .collect();
    Ok(json!({
        "fft_bins": fm.cols(),
        "bin_hz": bin_hz,
        "nyquist_mel": hz_to_mel(sample_rate as f64 / 2.0).map_err(|e| e.to_string())?,
        "centers_hz": centers,
        "filters": filters,
    }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn route(logits: &str, kl: &str, alpha: f64, temperature: f64, k: usize) -> Result<String, JsValue> {
    to_js(route_json(logits, kl, alpha, temperature, k))
}

#[wasm_bindgen]
pub fn quantize(values: &str, scheme: &str) -> Result<String, JsValue> {
    to_js(quantize_json(values, scheme))
}

#[wasm_bindgen]
pub fn mel(window: usize, mel_bins: usize, sample_rate: u32) -> Result<String, JsValue> {
    to_js(mel_json(window, mel_bins, sample_rate))
}
