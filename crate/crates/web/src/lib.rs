//! Browser bindings. Every export returns a JSON string; errors come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use deepqc_core::eval::{confusion, rule_predictions, ConfusionMatrix};
use deepqc_core::rules::{run_rules, sg_kernel, RuleConfig};
use deepqc_core::synth::{generate_corpus, SynthConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn error(msg: impl ToString) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

fn synth_flag_value(seed: u64, days: u32, anomaly_fraction: f64) -> Result<Value, String> {
    let cfg = SynthConfig {
        n_sites: 1,
        days_per_site: days as usize,
        seed,
        depths: vec![5],
        anomaly_fraction,
        ..SynthConfig::default()
    };
    let (series, reports) = generate_corpus(&cfg).map_err(|e| e.to_string())?;
    let s = &series[0];
    let flags = run_rules(s, &RuleConfig::default()).map_err(|e| e.to_string())?;
    let predicted = rule_predictions(&flags);
    let scored = confusion(&s.labels(), &predicted).map_err(|e| e.to_string())?;
    Ok(json!({
        "values": s.values(),
        "labels": s.labels(),
        "flags": flags.iter().map(|f| f.to_string()).collect::<Vec<_>>(),
        "injected": reports[0].anomalous(),
        "matrix": matrix_value(&scored.matrix),
    }))
}

/// Generates one synthetic 5 cm series, runs the rule engine on it and
/// scores the flags against the injected labels.
#[wasm_bindgen]
pub fn synth_and_flag(seed: u32, days: u32, anomaly_fraction: f64) -> String {
    match synth_flag_value(seed as u64, days, anomaly_fraction) {
        Ok(v) => v.to_string(),
        Err(e) => error(e),
    }
}

/// Savitzky–Golay weights for the center sample.
#[wasm_bindgen]
pub fn sg_weights(window: usize, order: usize, derivative: usize) -> String {
    match sg_kernel(window, order, derivative) {
        Ok(k) => json!({ "window": k.window, "order": k.order, "derivative": k.derivative, "weights": k.weights }).to_string(),
        Err(e) => error(e),
    }
}

fn matrix_value(m: &ConfusionMatrix) -> Value {
    json!({
        "tn": m.tn, "fp": m.fp, "fn": m.fn_, "tp": m.tp,
        "correct_class_pct": m.correct_class_pct(),
        "correct_misflagged_pct": m.correct_misflagged_pct(),
        "anomaly_class_pct": m.anomaly_class_pct(),
        "anomaly_missed_pct": m.anomaly_missed_pct(),
        "overall_pct": m.overall_pct(),
        "overall_error_pct": m.overall_error_pct(),
        "precision_pct": m.precision_pct(),
    })
}

/// Percentage breakdown of a confusion matrix given as counts.
#[wasm_bindgen]
pub fn confusion_breakdown(tn: f64, fp: f64, fn_: f64, tp: f64) -> String {
    let counts = [tn, fp, fn_, tp];
    if counts.iter().any(|c| !c.is_finite() || *c < 0.0 || c.fract() != 0.0) {
        return error("counts must be non-negative integers");
    }
    let m = ConfusionMatrix::new(tn as u64, fp as u64, fn_ as u64, tp as u64);
    matrix_value(&m).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn breakdown_json() {
        let v: Value = serde_json::from_str(&confusion_breakdown(90.0, 10.0, 5.0, 5.0)).unwrap();
        assert_eq!(v["tp"], 5);
        assert!((v["anomaly_class_pct"].as_f64().unwrap() - 50.0).abs() < 1e-12);
        let bad: Value = serde_json::from_str(&confusion_breakdown(-1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(bad["error"].is_string());
    }

    #[test]
    fn sg_json() {
        let v: Value = serde_json::from_str(&sg_weights(5, 2, 0)).unwrap();
        let w: Vec<f64> = serde_json::from_value(v["weights"].clone()).unwrap();
        assert!((w[2] - 17.0 / 35.0).abs() < 1e-12);
        let bad: Value = serde_json::from_str(&sg_weights(4, 2, 0)).unwrap();
        assert!(bad["error"].is_string());
    }

    #[test]
    fn synth_flag_json() {
        let v: Value = serde_json::from_str(&synth_and_flag(3, 20, 0.05)).unwrap();
        assert_eq!(v["values"].as_array().unwrap().len(), 20 * 96);
        assert_eq!(v["flags"].as_array().unwrap().len(), 20 * 96);
        assert!(v["matrix"]["tp"].as_u64().unwrap() > 0);
    }
}
