//! Spike, break and constant-value detection on Savitzky–Golay residuals and
//! derivatives.
//!
//! * Spike: the residual `value - smoothed` exceeds `spike_z` robust sigmas,
//!   is a local extremum, the first derivative flips sign across it in the
//!   direction of the excursion, and the series comes back to the pre-event
//!   level within two samples.
//! * Break: the first derivative exceeds `break_z` robust sigmas near its
//!   local peak and the second derivative crosses zero there (positive then
//!   negative for a rise). Rises are excused by precipitation in the lookback
//!   window. Candidates inside the derivative footprint of a spike are
//!   dropped.
//! * Constant: a run of at least `constant_run_len` bit-identical values.
//!
//! Robust sigmas are `1.4826 * MAD` over a centered window, floored at
//! `sigma_floor`. A sample whose filter window touches a missing value gets
//! no spike or break flag.

use chrono::Duration;

use super::sg::SgFilter;
use super::RuleConfig;
use crate::flags::{FlagSet, QcFlag};
use crate::series::SensorSeries;

const MAD_SCALE: f64 = 1.4826;
/// Fewest samples for a usable robust sigma.
const MIN_SIGMA_SAMPLES: usize = 12;

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// `1.4826 * MAD` of the present values in a centered window of `window`
/// samples around every index, floored at `floor`.
pub(crate) fn rolling_robust_sigma(x: &[Option<f64>], window: usize, floor: f64) -> Vec<Option<f64>> {
    let n = x.len();
    let half = window / 2;
    let mut buf = Vec::with_capacity(window + 1);
    (0..n)
        .map(|t| {
            x[t]?;
            buf.clear();
            buf.extend(x[t.saturating_sub(half)..(t + half + 1).min(n)].iter().flatten());
            if buf.len() < MIN_SIGMA_SAMPLES {
                return None;
            }
            let med = median_in_place(&mut buf);
            for v in buf.iter_mut() {
                *v = (*v - med).abs();
            }
            Some((MAD_SCALE * median_in_place(&mut buf)).max(floor))
        })
        .collect()
}

/// Whether any precipitation fell in `(t - lookback, t]`, per reading.
fn rained(series: &SensorSeries, lookback_hours: f64) -> Vec<bool> {
    let readings = series.readings();
    let lookback = Duration::minutes((lookback_hours * 60.0).round() as i64);
    let mut lo = 0;
    let mut wet = 0usize;
    readings
        .iter()
        .map(|r| {
            if r.precip.is_some_and(|p| p > 0.0) {
                wet += 1;
            }
            while readings[lo].timestamp <= r.timestamp - lookback {
                if readings[lo].precip.is_some_and(|p| p > 0.0) {
                    wet -= 1;
                }
                lo += 1;
            }
            wet > 0
        })
        .collect()
}

fn mark_constant_runs(values: &[Option<f64>], min_len: usize, out: &mut [FlagSet]) {
    let mut start = 0;
    while start < values.len() {
        let Some(v) = values[start] else {
            start += 1;
            continue;
        };
        let mut end = start + 1;
        while end < values.len() && values[end].is_some_and(|w| w.to_bits() == v.to_bits()) {
            end += 1;
        }
        if end - start >= min_len {
            for f in &mut out[start..end] {
                f.insert(QcFlag::Cst);
            }
        }
        start = end;
    }
}

/// Raw spectral codes (no `G`/`M` resolution).
pub(crate) fn spectral_codes(series: &SensorSeries, cfg: &RuleConfig, filter: &SgFilter) -> Vec<FlagSet> {
    let values = series.values();
    let n = values.len();
    let mut out = vec![FlagSet::empty(); n];
    mark_constant_runs(&values, cfg.constant_run_len, &mut out);
    if n < cfg.sg_window + 2 {
        return out;
    }

    let smooth = filter.smooth.apply(&values);
    let d1 = filter.d1.apply(&values);
    let d2 = filter.d2.apply(&values);
    let resid: Vec<Option<f64>> = values
        .iter()
        .zip(&smooth)
        .map(|(v, s)| Some((*v)? - (*s)?))
        .collect();
    let sigma_r = rolling_robust_sigma(&resid, cfg.sigma_window, cfg.sigma_floor);
    let sigma_d = rolling_robust_sigma(&d1, cfg.sigma_window, cfg.sigma_floor);

    // spikes
    let mut spike = vec![false; n];
    for t in 1..n - 1 {
        let (Some(r), Some(sr)) = (resid[t], sigma_r[t]) else { continue };
        let tol = cfg.spike_z * sr;
        if r.abs() <= tol {
            continue;
        }
        if resid[t - 1].is_some_and(|q| q.abs() > r.abs()) || resid[t + 1].is_some_and(|q| q.abs() > r.abs()) {
            continue;
        }
        let (Some(before), Some(after)) = (d1[t - 1], d1[t + 1]) else { continue };
        let flips = if r > 0.0 { before > 0.0 && after < 0.0 } else { before < 0.0 && after > 0.0 };
        if !flips {
            continue;
        }
        let x = values[t].unwrap();
        // last sample before the excursion
        let mut pre = None;
        for k in 1..=2 {
            let Some(j) = t.checked_sub(k) else { break };
            let Some(v) = values[j] else { break };
            if (v - x).abs() > tol {
                pre = Some((j, v));
                break;
            }
        }
        let Some((pre_idx, level)) = pre else { continue };
        let back = (1..=2)
            .map(|k| t + k)
            .take_while(|&j| j < n)
            .find(|&j| values[j].is_some_and(|v| (v - level).abs() <= tol));
        if let Some(ret_idx) = back {
            for j in pre_idx + 1..ret_idx {
                if values[j].is_some_and(|v| (v - level).abs() > tol) {
                    spike[j] = true;
                }
            }
        }
    }

    // footprint of spikes in the derivative series
    let half = cfg.sg_window / 2;
    let mut near_spike = vec![false; n];
    for t in (0..n).filter(|&t| spike[t]) {
        for f in &mut near_spike[t.saturating_sub(half)..(t + half + 1).min(n)] {
            *f = true;
        }
    }

    let wet = rained(series, cfg.precip_lookback);
    for t in 1..n - 1 {
        if near_spike[t] {
            continue;
        }
        let (Some(d), Some(sd)) = (d1[t], sigma_d[t]) else { continue };
        if d.abs() <= cfg.break_z * sd {
            continue;
        }
        let peak = d1[t.saturating_sub(half)..(t + half + 1).min(n)]
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if d.abs() < 0.5 * peak {
            continue;
        }
        let (Some(p), Some(q)) = (d2[t - 1], d2[t]) else { continue };
        let crossing = if d > 0.0 { p > 0.0 && q <= 0.0 } else { p < 0.0 && q >= 0.0 };
        if !crossing || (d > 0.0 && wet[t]) {
            continue;
        }
        out[t].insert(QcFlag::Brk);
    }

    for t in 0..n {
        if spike[t] {
            out[t].insert(QcFlag::Spk);
        }
    }
    out
}

/// Per-reading spectral flags with `G`/`M` resolved. Expects a
/// gap-materialized series.
pub fn flag_spectral(series: &SensorSeries, cfg: &RuleConfig) -> Result<Vec<FlagSet>, super::RuleError> {
    cfg.validate()?;
    let filter = SgFilter::new(cfg.sg_window, cfg.sg_order)?;
    Ok(spectral_codes(series, cfg, &filter)
        .into_iter()
        .zip(series.readings())
        .map(|(f, r)| f.finalize(r.value.is_some()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{step, Reading};
    use chrono::{TimeZone, Utc};

    fn series(values: &[Option<f64>]) -> SensorSeries {
        let t0 = Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap();
        let readings = values
            .iter()
            .enumerate()
            .map(|(i, v)| Reading::new(t0 + step() * i as i32, *v))
            .collect();
        SensorSeries::new("A", 5, readings).unwrap()
    }

    fn flagged(flags: &[FlagSet], code: QcFlag) -> Vec<usize> {
        (0..flags.len()).filter(|&i| flags[i].contains(code)).collect()
    }

    #[test]
    fn single_spike_on_flat_series() {
        let mut v = vec![Some(0.30); 200];
        v[100] = Some(0.55);
        let f = flag_spectral(&series(&v), &RuleConfig::default()).unwrap();
        assert_eq!(flagged(&f, QcFlag::Spk), vec![100]);
        assert!(flagged(&f, QcFlag::Brk).is_empty());
    }

    #[test]
    fn two_sample_spike() {
        let mut v = vec![Some(0.30); 200];
        v[100] = Some(0.10);
        v[101] = Some(0.12);
        let f = flag_spectral(&series(&v), &RuleConfig::default()).unwrap();
        assert_eq!(flagged(&f, QcFlag::Spk), vec![100, 101]);
        assert!(flagged(&f, QcFlag::Brk).is_empty());
    }

    #[test]
    fn step_is_a_break_at_the_step_sample() {
        let v: Vec<_> = (0..200).map(|i| Some(if i < 100 { 0.30 } else { 0.45 })).collect();
        let f = flag_spectral(&series(&v), &RuleConfig::default()).unwrap();
        assert_eq!(flagged(&f, QcFlag::Brk), vec![100]);
        assert!(flagged(&f, QcFlag::Spk).is_empty());

        let v: Vec<_> = (0..200).map(|i| Some(if i < 100 { 0.30 } else { 0.22 })).collect();
        let f = flag_spectral(&series(&v), &RuleConfig::default()).unwrap();
        assert_eq!(flagged(&f, QcFlag::Brk), vec![100]);
    }

    #[test]
    fn rain_excuses_a_rise_but_not_a_drop() {
        let t0 = Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap();
        let mk = |up: bool| {
            let readings = (0..200)
                .map(|i| {
                    let level = if i < 100 { 0.30 } else if up { 0.45 } else { 0.15 };
                    let mut r = Reading::new(t0 + step() * i, Some(level));
                    r.precip = Some(if i == 98 { 4.0 } else { 0.0 });
                    r
                })
                .collect();
            SensorSeries::new("A", 5, readings).unwrap()
        };
        let cfg = RuleConfig::default();
        assert!(flagged(&flag_spectral(&mk(true), &cfg).unwrap(), QcFlag::Brk).is_empty());
        assert_eq!(flagged(&flag_spectral(&mk(false), &cfg).unwrap(), QcFlag::Brk), vec![100]);
    }

    #[test]
    fn constant_run_threshold() {
        let cfg = RuleConfig::default();
        let run = |len: usize| {
            let mut v: Vec<Option<f64>> = (0..len + 20).map(|i| Some(0.2 + 1e-4 * i as f64)).collect();
            for x in &mut v[10..10 + len] {
                *x = Some(0.25);
            }
            flagged(&flag_spectral(&series(&v), &cfg).unwrap(), QcFlag::Cst)
        };
        assert_eq!(run(960), (10..970).collect::<Vec<_>>());
        assert!(run(959).is_empty());
    }

    #[test]
    fn missing_window_suppresses() {
        let mut v = vec![Some(0.30); 200];
        v[100] = Some(0.55);
        v[104] = None;
        let f = flag_spectral(&series(&v), &RuleConfig::default()).unwrap();
        assert!(flagged(&f, QcFlag::Spk).is_empty());
        assert_eq!(f[104], FlagSet::only(QcFlag::M));
    }

    #[test]
    fn robust_sigma_of_gaussian_like_data() {
        // repeating -1, 0, 1 has median 0 and MAD 1
        let x: Vec<Option<f64>> = (0..200).map(|i| Some((i % 3) as f64 - 1.0)).collect();
        let s = rolling_robust_sigma(&x, 96, 0.0);
        assert!((s[100].unwrap() - MAD_SCALE).abs() < 1e-12);
        let floored = rolling_robust_sigma(&vec![Some(0.0); 50], 96, 0.001);
        assert_eq!(floored[10], Some(0.001));
    }
}
