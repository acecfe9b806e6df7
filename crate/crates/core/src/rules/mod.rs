//! Threshold and spectral quality-control rules.

mod sg;
mod spectral;
mod threshold;

use serde::{Deserialize, Serialize};

pub use sg::{sg_kernel, SgFilter, SgKernel};
pub use spectral::flag_spectral;
pub use threshold::flag_thresholds;

use crate::flags::FlagSet;
use crate::series::SensorSeries;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuleError {
    #[error("invalid Savitzky-Golay parameters: window {window}, order {order}, derivative {derivative}")]
    BadSgParams { window: usize, order: usize, derivative: usize },
    #[error("invalid rule config: {0}")]
    Invalid(String),
}

/// Thresholds for the threshold and spectral checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    /// m³/m³
    pub lower_bound: f64,
    /// m³/m³
    pub upper_bound: f64,
    /// °C
    pub freeze_temp: f64,
    /// m³/m³ per 15-minute step
    pub rise_threshold: f64,
    /// hours
    pub precip_lookback: f64,
    /// samples; 960 is ten days at 15 minutes
    pub constant_run_len: usize,
    pub sg_window: usize,
    pub sg_order: usize,
    pub spike_z: f64,
    pub break_z: f64,
    /// Width of the centered window for the robust sigmas, in samples.
    pub sigma_window: usize,
    /// Lower bound on the robust sigmas, m³/m³ (sensor resolution).
    pub sigma_floor: f64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            lower_bound: 0.0,
            upper_bound: 0.6,
            freeze_temp: 0.0,
            rise_threshold: 0.01,
            precip_lookback: 24.0,
            constant_run_len: 960,
            sg_window: 13,
            sg_order: 3,
            spike_z: 6.0,
            break_z: 6.0,
            sigma_window: 96,
            sigma_floor: 0.001,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<(), RuleError> {
        let bad = |m: &str| Err(RuleError::Invalid(m.to_string()));
        let finite = [
            self.lower_bound,
            self.upper_bound,
            self.freeze_temp,
            self.rise_threshold,
            self.precip_lookback,
            self.spike_z,
            self.break_z,
            self.sigma_floor,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            return bad("thresholds must be finite");
        }
        if self.lower_bound >= self.upper_bound {
            return bad("lower_bound must be below upper_bound");
        }
        if self.sg_window % 2 == 0 || self.sg_window <= self.sg_order {
            return bad("sg_window must be odd and larger than sg_order");
        }
        if self.sg_order < 2 {
            return bad("sg_order must be at least 2 for second derivatives");
        }
        if self.constant_run_len < 2 {
            return bad("constant_run_len must be at least 2");
        }
        if self.spike_z <= 0.0 || self.break_z <= 0.0 || self.sigma_floor < 0.0 || self.precip_lookback < 0.0 {
            return bad("z thresholds must be positive, sigma_floor and precip_lookback non-negative");
        }
        if self.sigma_window < 2 {
            return bad("sigma_window must be at least 2");
        }
        Ok(())
    }
}

/// Union of threshold and spectral codes per reading; `G` when nothing
/// fired on a present value, `M` for missing values.
pub fn run_rules(series: &SensorSeries, cfg: &RuleConfig) -> Result<Vec<FlagSet>, RuleError> {
    cfg.validate()?;
    let filter = SgFilter::new(cfg.sg_window, cfg.sg_order)?;
    let thr = threshold::threshold_codes(series, cfg);
    let spec = spectral::spectral_codes(series, cfg, &filter);
    Ok(thr
        .into_iter()
        .zip(spec)
        .zip(series.readings())
        .map(|((a, b), r)| a.union(b).finalize(r.value.is_some()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flags::QcFlag;
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

    #[test]
    fn negative_spike_gets_range_and_spike_codes() {
        let mut v = vec![Some(0.12); 200];
        v[80] = Some(-0.1);
        let f = run_rules(&series(&v), &RuleConfig::default()).unwrap();
        let expected: FlagSet = [QcFlag::C01, QcFlag::Spk].into_iter().collect();
        assert_eq!(f[80], expected);
    }

    #[test]
    fn all_good_and_all_missing() {
        let v: Vec<_> = (0..300).map(|i| Some(0.25 + 0.001 * ((i * 7919) % 13) as f64)).collect();
        let f = run_rules(&series(&v), &RuleConfig::default()).unwrap();
        assert!(f.iter().all(|s| *s == FlagSet::only(QcFlag::G)));

        let f = run_rules(&series(&vec![None; 50]), &RuleConfig::default()).unwrap();
        assert!(f.iter().all(|s| *s == FlagSet::only(QcFlag::M)));
    }

    #[test]
    fn config_validation() {
        let mut c = RuleConfig::default();
        assert!(c.validate().is_ok());
        c.sg_window = 12;
        assert!(c.validate().is_err());
        let c = RuleConfig { lower_bound: 0.7, ..RuleConfig::default() };
        assert!(c.validate().is_err());
        let c = RuleConfig { constant_run_len: 1, ..RuleConfig::default() };
        assert!(c.validate().is_err());
        let c = RuleConfig { spike_z: f64::NAN, ..RuleConfig::default() };
        assert!(c.validate().is_err());
    }
}
