//! Synthetic soil-moisture corpora: wetting/drying dynamics with paired
//! precipitation and air temperature, then sparse injected anomalies with
//! exact per-sample ground truth.

use std::io::Write;

use chrono::{NaiveDate, TimeZone, Utc};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{derived, stream_id};
use crate::series::{step, Reading, SensorSeries, STEPS_PER_DAY};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("series {site_id}: cannot place {what} ({target} anomalous samples requested of {present})")]
    Infeasible { site_id: String, what: &'static str, target: usize, present: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Spike,
    Break,
    Constant,
    OutOfRange,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [AnomalyKind::Spike, AnomalyKind::Break, AnomalyKind::Constant, AnomalyKind::OutOfRange];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::Break => "break",
            AnomalyKind::Constant => "constant",
            AnomalyKind::OutOfRange => "out_of_range",
        }
    }
}

/// Shares of the anomalous-sample budget per kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyMix {
    pub spike: f64,
    #[serde(rename = "break")]
    pub brk: f64,
    pub constant: f64,
    pub out_of_range: f64,
}

impl Default for AnomalyMix {
    fn default() -> Self {
        AnomalyMix { spike: 0.4, brk: 0.3, constant: 0.2, out_of_range: 0.1 }
    }
}

impl AnomalyMix {
    fn share(&self, k: AnomalyKind) -> f64 {
        match k {
            AnomalyKind::Spike => self.spike,
            AnomalyKind::Break => self.brk,
            AnomalyKind::Constant => self.constant,
            AnomalyKind::OutOfRange => self.out_of_range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_sites: usize,
    pub days_per_site: usize,
    pub seed: u64,
    pub site_prefix: String,
    /// First day of every series, `YYYY-MM-DD`.
    pub start_date: String,
    /// Sensor depths, assigned to sites in turn.
    pub depths: Vec<u32>,
    /// Range of the per-site dry baseline, m³/m³.
    pub base_moisture: [f64; 2],
    /// Wetting events per day.
    pub event_rate: f64,
    /// Rise of one wetting event, m³/m³.
    pub event_rise: [f64; 2],
    /// Wetting never pushes the level above this.
    pub moisture_cap: f64,
    pub decay_halflife: f64,
    pub noise_sd: f64,
    pub air_temp_mean: f64,
    pub air_temp_seasonal: f64,
    pub air_temp_diurnal: f64,
    pub anomaly_fraction: f64,
    pub anomaly_mix: AnomalyMix,
    pub gap_fraction: f64,
    pub spike_magnitude: [f64; 2],
    pub break_offset: [f64; 2],
    /// Break duration range, hours.
    pub break_hours: [f64; 2],
    pub out_of_range_len: [usize; 2],
    pub constant_run_len: usize,
    /// Preferred count of unaltered samples between anomaly episodes.
    pub min_separation: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sites: 10,
            days_per_site: 60,
            seed: 0,
            site_prefix: "site".into(),
            start_date: "2021-04-01".into(),
            depths: vec![5, 30, 60, 100],
            base_moisture: [0.15, 0.35],
            event_rate: 0.3,
            event_rise: [0.03, 0.2],
            moisture_cap: 0.55,
            decay_halflife: 72.0,
            noise_sd: 0.003,
            air_temp_mean: 15.0,
            air_temp_seasonal: 7.0,
            air_temp_diurnal: 4.0,
            anomaly_fraction: 0.05,
            anomaly_mix: AnomalyMix::default(),
            gap_fraction: 0.01,
            spike_magnitude: [0.1, 0.3],
            break_offset: [0.05, 0.2],
            break_hours: [4.0, 120.0],
            out_of_range_len: [1, 8],
            constant_run_len: 960,
            min_separation: 8,
        }
    }
}

fn range_ok(r: [f64; 2], lo: f64, hi: f64) -> bool {
    r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        let m = &self.anomaly_mix;
        let shares = [m.spike, m.brk, m.constant, m.out_of_range];
        if shares.iter().any(|s| !(0.0..=1.0).contains(s)) || (shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("anomaly_mix shares must lie in [0, 1] and sum to 1");
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) || !(0.0..=1.0).contains(&self.gap_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(self.event_rate >= 0.0 && self.event_rate.is_finite()) {
            return bad("event_rate must be non-negative");
        }
        if !(self.decay_halflife > 0.0 && self.decay_halflife.is_finite()) {
            return bad("decay_halflife must be positive");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd must be non-negative");
        }
        if !range_ok(self.base_moisture, 0.0, self.moisture_cap) || !(self.moisture_cap <= 0.6) {
            return bad("base_moisture must lie within [0, moisture_cap] and moisture_cap ≤ 0.6");
        }
        if !range_ok(self.event_rise, 0.0, 1.0)
            || !range_ok(self.spike_magnitude, 0.0, 1.0)
            || !range_ok(self.break_offset, 0.0, 1.0)
            || !range_ok(self.break_hours, 0.25, 1e6)
        {
            return bad("magnitude and duration ranges must be ordered and non-negative");
        }
        if self.out_of_range_len[0] == 0 || self.out_of_range_len[0] > self.out_of_range_len[1] {
            return bad("out_of_range_len must be an ordered range starting at 1 or more");
        }
        if self.constant_run_len < 2 {
            return bad("constant_run_len must be at least 2");
        }
        if self.depths.is_empty() || self.depths.contains(&0) {
            return bad("depths must be non-empty and positive");
        }
        if self.days_per_site == 0 {
            return bad("days_per_site must be at least 1");
        }
        self.start()?;
        Ok(())
    }

    fn start(&self) -> Result<NaiveDate, SynthError> {
        NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| SynthError::Config(format!("start_date {:?}: {e}", self.start_date)))
    }

    pub fn site_id(&self, index: usize) -> String {
        format!("{}{:03}", self.site_prefix, index)
    }
}

/// Anomaly-free series, one sensor per site.
pub fn generate_clean(cfg: &SynthConfig) -> Result<Vec<SensorSeries>, SynthError> {
    cfg.validate()?;
    (0..cfg.n_sites).map(|i| clean_site(cfg, i)).collect()
}

fn clean_site(cfg: &SynthConfig, index: usize) -> Result<SensorSeries, SynthError> {
    let mut rng = derived(cfg.seed, index as u64);
    let n = cfg.days_per_site * STEPS_PER_DAY;
    let t0 = Utc.from_utc_datetime(&cfg.start()?.and_hms_opt(0, 0, 0).expect("midnight"));
    let base = rng.random_range(cfg.base_moisture[0]..=cfg.base_moisture[1]);
    let depth = cfg.depths[index % cfg.depths.len()];
    let decay = (-std::f64::consts::LN_2 * 0.25 / cfg.decay_halflife).exp();
    let noise = Normal::new(0.0, cfg.noise_sd).expect("validated sd");
    let gap_time = if cfg.event_rate > 0.0 { Some(Exp::new(cfg.event_rate / STEPS_PER_DAY as f64).expect("positive rate")) } else { None };

    let mut next_event = gap_time.map(|d| d.sample(&mut rng)).unwrap_or(f64::INFINITY);
    let mut level = base;
    let mut pending: Vec<f64> = Vec::new();
    let mut readings = Vec::with_capacity(n);
    let doy0 = cfg.start()?.and_hms_opt(0, 0, 0).expect("midnight");
    for k in 0..n {
        let mut precip = 0.0;
        if pending.is_empty() && (k as f64) >= next_event {
            let rise = rng.random_range(cfg.event_rise[0]..=cfg.event_rise[1]);
            let parts = rng.random_range(1..=3usize);
            pending = vec![rise / parts as f64; parts];
            next_event = k as f64 + gap_time.map(|d| d.sample(&mut rng)).unwrap_or(f64::INFINITY);
        }
        if let Some(r) = pending.pop() {
            level = (level + r).min(cfg.moisture_cap);
            precip = (r * 1e4).round() / 100.0;
        } else {
            level = base + (level - base) * decay;
        }
        let value = (level + noise.sample(&mut rng)).clamp(0.0, 0.6);
        let ts = t0 + step() * k as i32;
        let hours = k as f64 * 0.25;
        let day = (doy0 + step() * k as i32).and_utc().date_naive();
        let doy = chrono::Datelike::ordinal(&day) as f64;
        let air = cfg.air_temp_mean
            + cfg.air_temp_seasonal * (2.0 * std::f64::consts::PI * (doy - 110.0) / 365.0).sin()
            + cfg.air_temp_diurnal * (2.0 * std::f64::consts::PI * (hours % 24.0 - 9.0) / 24.0).sin();
        let mut r = Reading::new(ts, Some(value));
        r.precip = Some(precip);
        r.air_temp = Some((air * 100.0).round() / 100.0);
        r.manual_flag = Some(false);
        readings.push(r);
    }

    // Contiguous outages.
    let mut missing = (cfg.gap_fraction * n as f64).round() as usize;
    while missing > 0 {
        let len = rng.random_range(4..=48usize).min(missing).min(n);
        let start = rng.random_range(0..=n - len);
        let fresh = readings[start..start + len].iter().filter(|r| r.value.is_some()).count();
        for r in &mut readings[start..start + len] {
            r.value = None;
        }
        missing = missing.saturating_sub(fresh.max(1));
    }
    Ok(SensorSeries::new(cfg.site_id(index), depth, readings).expect("grid-aligned by construction"))
}

/// Per-sample record of what was injected.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InjectionReport {
    pub site_id: String,
    pub depth_cm: u32,
    pub kinds: Vec<Option<AnomalyKind>>,
    pub present: usize,
}

impl InjectionReport {
    pub fn count(&self, k: AnomalyKind) -> usize {
        self.kinds.iter().filter(|x| **x == Some(k)).count()
    }

    pub fn anomalous(&self) -> usize {
        self.kinds.iter().filter(|x| x.is_some()).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.present == 0 {
            0.0
        } else {
            self.anomalous() as f64 / self.present as f64
        }
    }
}

struct Placer<'a> {
    free: Vec<bool>,
    sep: usize,
    site: &'a str,
    target: usize,
    present: usize,
}

impl Placer<'_> {
    /// Uniformly random start for an episode of `len` samples with `sep`
    /// free samples on both sides. The separation shrinks towards one sample
    /// when the series is too crowded for the preferred spacing.
    fn place(&mut self, rng: &mut ChaCha8Rng, len: usize, what: &'static str) -> Result<usize, SynthError> {
        let n = self.free.len();
        let mut starts = Vec::new();
        let mut sep = self.sep.max(1);
        loop {
            let mut run = 0usize;
            for i in 0..n {
                run = if self.free[i] { run + 1 } else { 0 };
                if run >= len + 2 * sep {
                    starts.push(i + 1 - len - sep);
                }
            }
            if !starts.is_empty() || sep == 1 {
                break;
            }
            sep /= 2;
        }
        if starts.is_empty() {
            return Err(SynthError::Infeasible { site_id: self.site.to_string(), what, target: self.target, present: self.present });
        }
        let s = starts[rng.random_range(0..starts.len())];
        for f in &mut self.free[s..s + len] {
            *f = false;
        }
        Ok(s)
    }
}

/// Injects spikes, breaks, constant runs and out-of-range values into a
/// clean series and labels every altered sample.
pub fn inject_anomalies(series: &SensorSeries, cfg: &SynthConfig) -> Result<(SensorSeries, InjectionReport), SynthError> {
    cfg.validate()?;
    let mut rng = derived(cfg.seed ^ 0xA5A5_0000, stream_id(&series.site_id) ^ series.depth_cm as u64);
    let clean = series.values();
    let n = clean.len();
    let present = clean.iter().filter(|v| v.is_some()).count();
    let target = (cfg.anomaly_fraction * present as f64).round() as usize;
    let mut values = clean.clone();
    let mut kinds: Vec<Option<AnomalyKind>> = vec![None; n];
    let report = |kinds| InjectionReport { site_id: series.site_id.clone(), depth_cm: series.depth_cm, kinds, present };
    if target == 0 {
        let mut out = series.clone();
        out.set_values_and_labels(&values, &vec![false; n]);
        return Ok((out, report(kinds)));
    }
    if target as f64 > 0.7 * present as f64 {
        return Err(SynthError::Infeasible { site_id: series.site_id.clone(), what: "anomaly budget", target, present });
    }

    let mut placer = Placer { free: clean.iter().map(|v| v.is_some()).collect(), sep: cfg.min_separation, site: &series.site_id, target, present };
    let mix = cfg.anomaly_mix;
    let mut budget: Vec<(AnomalyKind, f64)> = AnomalyKind::ALL.iter().map(|k| (*k, mix.share(*k) * target as f64)).collect();

    // Constant runs come in whole multiples of the run length; any remainder
    // is shared among the other kinds in proportion to their mix.
    let runs = (budget[2].1 / cfg.constant_run_len as f64).round() as usize;
    let used = (runs * cfg.constant_run_len) as f64;
    let spare = budget[2].1 - used;
    budget[2].1 = used;
    let others: f64 = [0, 1, 3].iter().map(|&i| budget[i].1).sum();
    for &i in &[0usize, 1, 3] {
        budget[i].1 += if others > 0.0 { spare * budget[i].1 / others } else { spare / 3.0 };
    }
    let mut remaining: Vec<usize> = budget.iter().map(|b| b.1.round().max(0.0) as usize).collect();
    // Keep the overall total exact after rounding.
    let total: usize = remaining.iter().sum();
    if total > target {
        remaining[0] = remaining[0].saturating_sub(total - target);
    } else {
        remaining[0] += target - total;
    }

    let set = |values: &mut Vec<Option<f64>>, kinds: &mut Vec<Option<AnomalyKind>>, i: usize, v: f64, k: AnomalyKind| {
        values[i] = Some(v);
        kinds[i] = Some(k);
    };
    let clean_at = |i: usize| clean[i].expect("placed on present samples");

    for _ in 0..runs {
        let s = placer.place(&mut rng, cfg.constant_run_len, "constant run")?;
        let frozen = (clean_at(s) * 1000.0).round() / 1000.0;
        for i in s..s + cfg.constant_run_len {
            set(&mut values, &mut kinds, i, frozen, AnomalyKind::Constant);
        }
    }

    let min_break = ((cfg.break_hours[0] * 4.0).round() as usize).max(1);
    let max_break = ((cfg.break_hours[1] * 4.0).round() as usize).max(min_break);
    while remaining[1] >= min_break {
        let (lo, hi) = ((min_break as f64).ln(), (max_break as f64).ln());
        let len = (rng.random_range(lo..=hi).exp().round() as usize).clamp(min_break, max_break).min(remaining[1]);
        let s = placer.place(&mut rng, len, "break")?;
        let mag = rng.random_range(cfg.break_offset[0]..=cfg.break_offset[1]);
        let preferred = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let stays = |sign: f64| (s..s + len).all(|i| (0.0..=0.6).contains(&(clean_at(i) + sign * mag)));
        let sign = if stays(preferred) || !stays(-preferred) { preferred } else { -preferred };
        for i in s..s + len {
            set(&mut values, &mut kinds, i, clean_at(i) + sign * mag, AnomalyKind::Break);
        }
        remaining[1] -= len;
    }
    remaining[0] += remaining[1];

    while remaining[3] > 0 {
        let len = rng.random_range(cfg.out_of_range_len[0]..=cfg.out_of_range_len[1]).min(remaining[3]);
        let s = placer.place(&mut rng, len, "out-of-range episode")?;
        let high = rng.random_bool(0.5);
        for i in s..s + len {
            let d = rng.random_range(0.01..=0.1);
            set(&mut values, &mut kinds, i, if high { 0.6 + d } else { -d }, AnomalyKind::OutOfRange);
        }
        remaining[3] -= len;
    }

    while remaining[0] > 0 {
        let len = rng.random_range(1..=2usize).min(remaining[0]);
        let s = placer.place(&mut rng, len, "spike")?;
        let mag = rng.random_range(cfg.spike_magnitude[0]..=cfg.spike_magnitude[1]);
        let c = clean_at(s);
        let sign = match (c + mag <= 0.6, c - mag >= 0.0, rng.random_bool(0.5)) {
            (true, false, _) => 1.0,
            (false, true, _) => -1.0,
            (_, _, true) => 1.0,
            _ => -1.0,
        };
        for i in s..s + len {
            let jitter = rng.random_range(0.9..=1.0);
            set(&mut values, &mut kinds, i, clean_at(i) + sign * mag * jitter, AnomalyKind::Spike);
        }
        remaining[0] -= len;
    }

    // Labels follow the values: a sample is anomalous exactly when it differs
    // from the clean series.
    let labels: Vec<bool> = values.iter().zip(&clean).map(|(a, b)| a != b).collect();
    for (k, l) in kinds.iter_mut().zip(&labels) {
        if !l {
            *k = None;
        }
    }
    let mut out = series.clone();
    out.set_values_and_labels(&values, &labels);
    Ok((out, report(kinds)))
}

/// Clean generation followed by injection on every series.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<(Vec<SensorSeries>, Vec<InjectionReport>), SynthError> {
    let clean = generate_clean(cfg)?;
    let mut series = Vec::with_capacity(clean.len());
    let mut reports = Vec::with_capacity(clean.len());
    for s in &clean {
        let (a, r) = inject_anomalies(s, cfg)?;
        series.push(a);
        reports.push(r);
    }
    Ok((series, reports))
}

/// Sidecar CSV with per-series anomaly sample counts by kind.
pub fn write_ground_truth<W: Write>(w: W, reports: &[InjectionReport]) -> Result<(), SynthError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["site_id", "depth_cm", "present", "anomalous", "anomaly_fraction"];
    header.extend(AnomalyKind::ALL.iter().map(|k| k.name()));
    wtr.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.site_id.clone(),
            r.depth_cm.to_string(),
            r.present.to_string(),
            r.anomalous().to_string(),
            format!("{:.6}", r.fraction()),
        ];
        row.extend(AnomalyKind::ALL.iter().map(|k| r.count(*k).to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
