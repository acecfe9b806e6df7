//! Pointwise geophysical range and ancillary-consistency checks.

use chrono::Duration;

use super::RuleConfig;
use crate::flags::{FlagSet, QcFlag};
use crate::series::{step, SensorSeries};

/// Raw threshold codes (no `G`/`M` resolution).
pub(crate) fn threshold_codes(series: &SensorSeries, cfg: &RuleConfig) -> Vec<FlagSet> {
    let readings = series.readings();
    let lookback = Duration::minutes((cfg.precip_lookback * 60.0).round() as i64);
    let mut out = vec![FlagSet::empty(); readings.len()];

    // sliding window over (t - lookback, t]
    let mut lo = 0;
    let mut precip_sum = 0.0;
    let mut precip_n = 0usize;

    for (i, r) in readings.iter().enumerate() {
        if let Some(p) = r.precip {
            precip_sum += p;
            precip_n += 1;
        }
        while readings[lo].timestamp <= r.timestamp - lookback {
            if let Some(p) = readings[lo].precip {
                precip_sum -= p;
                precip_n -= 1;
            }
            lo += 1;
        }

        let Some(v) = r.value else { continue };
        let flags = &mut out[i];
        if v < cfg.lower_bound {
            flags.insert(QcFlag::C01);
        }
        if v > cfg.upper_bound {
            flags.insert(QcFlag::C02);
        }
        if series.saturation.is_some_and(|sat| v > sat) {
            flags.insert(QcFlag::C03);
        }
        if r.soil_temp.is_some_and(|t| t < cfg.freeze_temp) {
            flags.insert(QcFlag::D01);
        }
        if r.air_temp.is_some_and(|t| t < cfg.freeze_temp) {
            flags.insert(QcFlag::D02);
        }
        if i > 0 && precip_n > 0 {
            let prev = &readings[i - 1];
            if let (Some(pv), true) = (prev.value, r.timestamp - prev.timestamp == step()) {
                // the running sum is never negative in exact arithmetic
                if v - pv > cfg.rise_threshold && precip_sum <= 1e-12 {
                    flags.insert(QcFlag::D04);
                }
            }
        }
    }
    out
}

/// Per-reading threshold flags with `G`/`M` resolved.
pub fn flag_thresholds(series: &SensorSeries, cfg: &RuleConfig) -> Vec<FlagSet> {
    threshold_codes(series, cfg)
        .into_iter()
        .zip(series.readings())
        .map(|(f, r)| f.finalize(r.value.is_some()))
        .collect()
}
