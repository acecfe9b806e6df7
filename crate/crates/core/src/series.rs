//! Sensor series data model, CSV ingestion, gap materialization, hourly
//! ancillary alignment and site-level splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, SecondsFormat, Timelike, Utc};
use rand::seq::SliceRandom;

use crate::flags::FlagSet;

/// Sampling interval of the sensor grid.
pub const STEP_MINUTES: i64 = 15;
/// Readings per calendar day on the 15-minute grid.
pub const STEPS_PER_DAY: usize = 96;

pub fn step() -> Duration {
    Duration::minutes(STEP_MINUTES)
}

pub fn is_on_grid(ts: &DateTime<Utc>) -> bool {
    ts.minute() % STEP_MINUTES as u32 == 0 && ts.second() == 0 && ts.nanosecond() == 0
}

#[derive(Debug, thiserror::Error)]
pub enum SeriesError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("header is missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("duplicate reading for site {site_id} depth {depth_cm} at {timestamp}")]
    DuplicateTimestamp {
        site_id: String,
        depth_cm: u32,
        timestamp: DateTime<Utc>,
    },
    #[error("timestamp {0} is not on the 15-minute grid")]
    OffGrid(DateTime<Utc>),
    #[error("hourly record {0} is not on a whole hour")]
    OffHour(DateTime<Utc>),
    #[error("readings must be strictly increasing in time (index {0})")]
    NotIncreasing(usize),
    #[error("depth must be positive")]
    BadDepth,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("{sites} site(s) cannot fill {partitions} non-empty partition(s)")]
    TooFewSites { sites: usize, partitions: usize },
}

/// One 15-minute observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub timestamp: DateTime<Utc>,
    /// Volumetric water content, m³/m³; `None` when missing.
    pub value: Option<f64>,
    /// °C
    pub soil_temp: Option<f64>,
    /// °C
    pub air_temp: Option<f64>,
    /// mm over the preceding interval.
    pub precip: Option<f64>,
    /// Reference label, `Some(true)` for an anomaly.
    pub manual_flag: Option<bool>,
}

impl Reading {
    pub fn new(timestamp: DateTime<Utc>, value: Option<f64>) -> Self {
        Reading {
            timestamp,
            value,
            soil_temp: None,
            air_temp: None,
            precip: None,
            manual_flag: None,
        }
    }

    pub fn missing(timestamp: DateTime<Utc>) -> Self {
        Reading::new(timestamp, None)
    }
}

/// Where the ancillary temperature/precipitation channels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AncillarySource {
    #[default]
    InSitu,
    /// Gridded reanalysis aligned with [`align_hourly_ancillary`].
    Gridded,
}

/// Readings of one sensor, identified by site and center depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    pub site_id: String,
    pub depth_cm: u32,
    readings: Vec<Reading>,
    /// Per-site saturation point, m³/m³; enables the C03 check.
    pub saturation: Option<f64>,
    pub ancillary_source: AncillarySource,
}

impl SensorSeries {
    /// Validates grid alignment, ordering and finiteness.
    pub fn new(
        site_id: impl Into<String>,
        depth_cm: u32,
        readings: Vec<Reading>,
    ) -> Result<Self, SeriesError> {
        if depth_cm == 0 {
            return Err(SeriesError::BadDepth);
        }
        for (i, r) in readings.iter().enumerate() {
            if !is_on_grid(&r.timestamp) {
                return Err(SeriesError::OffGrid(r.timestamp));
            }
            if r.value.is_some_and(|v| !v.is_finite()) {
                return Err(SeriesError::NonFinite(i));
            }
            if i > 0 && readings[i - 1].timestamp >= r.timestamp {
                return Err(SeriesError::NotIncreasing(i));
            }
        }
        Ok(SensorSeries {
            site_id: site_id.into(),
            depth_cm,
            readings,
            saturation: None,
            ancillary_source: AncillarySource::InSitu,
        })
    }

    pub fn with_saturation(mut self, saturation: Option<f64>) -> Self {
        self.saturation = saturation;
        self
    }

    pub fn readings(&self) -> &[Reading] {
        &self.readings
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    pub fn values(&self) -> Vec<Option<f64>> {
        self.readings.iter().map(|r| r.value).collect()
    }

    pub fn labels(&self) -> Vec<Option<bool>> {
        self.readings.iter().map(|r| r.manual_flag).collect()
    }

    pub fn present_count(&self) -> usize {
        self.readings.iter().filter(|r| r.value.is_some()).count()
    }

    /// Replace values and labels in place; lengths must match.
    pub(crate) fn set_values_and_labels(&mut self, values: &[Option<f64>], labels: &[bool]) {
        debug_assert_eq!(values.len(), self.readings.len());
        for ((r, v), l) in self.readings.iter_mut().zip(values).zip(labels) {
            r.value = *v;
            r.manual_flag = Some(*l);
        }
    }

    /// Insert missing-value readings so that consecutive timestamps are
    /// exactly one grid step apart.
    pub fn fill_gaps(&mut self) {
        if self.readings.len() < 2 {
            return;
        }
        let first = self.readings[0].timestamp;
        let last = self.readings[self.readings.len() - 1].timestamp;
        let n = ((last - first).num_minutes() / STEP_MINUTES) as usize + 1;
        if n == self.readings.len() {
            return;
        }
        let mut filled = Vec::with_capacity(n);
        let mut existing = std::mem::take(&mut self.readings).into_iter().peekable();
        for k in 0..n {
            let ts = first + step() * k as i32;
            match existing.peek() {
                Some(r) if r.timestamp == ts => filled.push(existing.next().unwrap()),
                _ => filled.push(Reading::missing(ts)),
            }
        }
        self.readings = filled;
    }

    pub fn is_gap_free(&self) -> bool {
        self.readings
            .windows(2)
            .all(|w| w[1].timestamp - w[0].timestamp == step())
    }
}

/// Column names for the standard reading schema.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub timestamp: String,
    pub site_id: String,
    pub depth_cm: String,
    pub value: String,
    pub soil_temp: String,
    pub air_temp: String,
    pub precip: String,
    pub manual_flag: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            timestamp: "timestamp".into(),
            site_id: "site_id".into(),
            depth_cm: "depth_cm".into(),
            value: "value".into(),
            soil_temp: "soil_temp".into(),
            air_temp: "air_temp".into(),
            precip: "precip".into(),
            manual_flag: "manual_flag".into(),
        }
    }
}

/// The standard header, in column order.
pub const HEADER: [&str; 8] = [
    "timestamp",
    "site_id",
    "depth_cm",
    "value",
    "soil_temp",
    "air_temp",
    "precip",
    "manual_flag",
];

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| format!("bad timestamp `{s}`: {e}"))
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn parse_opt_f64(s: &str, col: &str) -> Result<Option<f64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Err(format!("non-finite {col} `{s}`")),
        Err(_) => Err(format!("bad {col} `{s}`")),
    }
}

pub fn parse_manual_flag(s: &str) -> Result<Option<bool>, String> {
    match s.trim() {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(format!("manual_flag must be empty, 0 or 1, got `{other}`")),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_manual_flag(f: Option<bool>) -> &'static str {
    match f {
        None => "",
        Some(false) => "0",
        Some(true) => "1",
    }
}

struct Indices {
    timestamp: usize,
    site_id: usize,
    depth_cm: usize,
    value: usize,
    soil_temp: usize,
    air_temp: usize,
    precip: usize,
    manual_flag: usize,
}

impl Indices {
    fn resolve(headers: &csv::StringRecord, schema: &ColumnMap) -> Result<Self, SeriesError> {
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| SeriesError::MissingColumn(name.to_string()))
        };
        Ok(Indices {
            timestamp: find(&schema.timestamp)?,
            site_id: find(&schema.site_id)?,
            depth_cm: find(&schema.depth_cm)?,
            value: find(&schema.value)?,
            soil_temp: find(&schema.soil_temp)?,
            air_temp: find(&schema.air_temp)?,
            precip: find(&schema.precip)?,
            manual_flag: find(&schema.manual_flag)?,
        })
    }
}

/// Read series from CSV: one [`SensorSeries`] per (site, depth), sorted by
/// time and gap-filled. Rows may arrive in any order; a repeated
/// (site, depth, timestamp) is an error. Row numbers in errors are 1-based
/// data rows (the header is row 0).
pub fn read_csv<R: Read>(reader: R, schema: &ColumnMap) -> Result<Vec<SensorSeries>, SeriesError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let idx = Indices::resolve(rdr.headers()?, schema)?;
    let mut groups: BTreeMap<(String, u32), Vec<Reading>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let bad = |reason: String| SeriesError::MalformedRow { row, reason };
        let get = |k: usize| rec.get(k).unwrap_or("");
        let timestamp = parse_timestamp(get(idx.timestamp)).map_err(bad)?;
        if !is_on_grid(&timestamp) {
            return Err(bad(format!("timestamp {} is off the 15-minute grid", get(idx.timestamp))));
        }
        let site_id = get(idx.site_id).trim().to_string();
        if site_id.is_empty() {
            return Err(bad("empty site_id".into()));
        }
        let depth_cm: u32 = get(idx.depth_cm)
            .trim()
            .parse()
            .ok()
            .filter(|d| *d > 0)
            .ok_or_else(|| bad(format!("bad depth_cm `{}`", get(idx.depth_cm))))?;
        let reading = Reading {
            timestamp,
            value: parse_opt_f64(get(idx.value), "value").map_err(bad)?,
            soil_temp: parse_opt_f64(get(idx.soil_temp), "soil_temp").map_err(bad)?,
            air_temp: parse_opt_f64(get(idx.air_temp), "air_temp").map_err(bad)?,
            precip: parse_opt_f64(get(idx.precip), "precip").map_err(bad)?,
            manual_flag: parse_manual_flag(get(idx.manual_flag)).map_err(bad)?,
        };
        groups.entry((site_id, depth_cm)).or_default().push(reading);
    }

    let mut out = Vec::with_capacity(groups.len());
    for ((site_id, depth_cm), mut readings) in groups {
        readings.sort_by_key(|r| r.timestamp);
        if let Some(w) = readings.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
            return Err(SeriesError::DuplicateTimestamp {
                site_id,
                depth_cm,
                timestamp: w[0].timestamp,
            });
        }
        let mut s = SensorSeries::new(site_id, depth_cm, readings)?;
        s.fill_gaps();
        out.push(s);
    }
    Ok(out)
}

/// [`read_csv`] from a file path.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &ColumnMap) -> Result<Vec<SensorSeries>, SeriesError> {
    read_csv(File::open(path)?, schema)
}

/// Write series in the standard schema, followed by `extra_headers` whose
/// cells come from `extra(series_index, reading_index)`.
pub fn write_csv_with<W, F>(
    writer: W,
    series: &[SensorSeries],
    extra_headers: &[&str],
    mut extra: F,
) -> Result<(), SeriesError>
where
    W: Write,
    F: FnMut(usize, usize) -> Vec<String>,
{
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = HEADER.to_vec();
    header.extend_from_slice(extra_headers);
    wtr.write_record(&header)?;
    for (si, s) in series.iter().enumerate() {
        let depth = s.depth_cm.to_string();
        for (ri, r) in s.readings.iter().enumerate() {
            let mut row = vec![
                format_timestamp(&r.timestamp),
                s.site_id.clone(),
                depth.clone(),
                fmt_opt(r.value),
                fmt_opt(r.soil_temp),
                fmt_opt(r.air_temp),
                fmt_opt(r.precip),
                format_manual_flag(r.manual_flag).to_string(),
            ];
            let cells = extra(si, ri);
            debug_assert_eq!(cells.len(), extra_headers.len());
            row.extend(cells);
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv<W: Write>(writer: W, series: &[SensorSeries]) -> Result<(), SeriesError> {
    write_csv_with(writer, series, &[], |_, _| Vec::new())
}

/// Standard columns plus `qflag` holding semicolon-joined codes.
pub fn write_flagged_csv<W: Write>(
    writer: W,
    series: &[SensorSeries],
    flags: &[Vec<FlagSet>],
) -> Result<(), SeriesError> {
    write_csv_with(writer, series, &["qflag"], |si, ri| vec![flags[si][ri].to_string()])
}

/// One hourly ancillary record (e.g. from a gridded reanalysis).
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyRecord {
    pub time: DateTime<Utc>,
    pub precip: Option<f64>,
    pub air_temp: Option<f64>,
}

/// Assign to every reading the hourly record of the hour containing it,
/// using the left-closed window `[H, H + 1h)`. Readings without a covering
/// hour are left untouched.
pub fn align_hourly_ancillary(
    series: &SensorSeries,
    hourly: &[HourlyRecord],
) -> Result<SensorSeries, SeriesError> {
    let mut by_hour = HashMap::with_capacity(hourly.len());
    for h in hourly {
        if h.time.minute() != 0 || h.time.second() != 0 || h.time.nanosecond() != 0 {
            return Err(SeriesError::OffHour(h.time));
        }
        by_hour.insert(h.time, h);
    }
    let mut out = series.clone();
    for r in &mut out.readings {
        let hour = r.timestamp
            - Duration::minutes(r.timestamp.minute() as i64)
            - Duration::seconds(r.timestamp.second() as i64);
        if let Some(h) = by_hour.get(&hour) {
            r.precip = h.precip;
            r.air_temp = h.air_temp;
        }
    }
    out.ancillary_source = AncillarySource::Gridded;
    Ok(out)
}

/// Train/validation/test partition of a set of series.
#[derive(Debug, Clone, Default)]
pub struct SitePartition {
    pub train: Vec<SensorSeries>,
    pub val: Vec<SensorSeries>,
    pub test: Vec<SensorSeries>,
}

/// Split series by site so that every depth of a site lands in the same
/// partition. Site counts follow the ratios by largest remainder, so each
/// partition is within one site of its exact share.
pub fn split_sites(
    all: &[SensorSeries],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SitePartition, SeriesError> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SeriesError::BadRatios(r));
    }
    let sites: Vec<&str> = all
        .iter()
        .map(|s| s.site_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = sites.len();
    let partitions = r.iter().filter(|x| **x > 0.0).count();
    if n < partitions {
        return Err(SeriesError::TooFewSites { sites: n, partitions });
    }

    let exact: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if r[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }

    let mut shuffled = sites;
    shuffled.shuffle(&mut crate::rng::derived(seed, 0x5917));
    let mut assignment: HashMap<&str, usize> = HashMap::new();
    let mut cursor = 0;
    for (part, &c) in counts.iter().enumerate() {
        for site in &shuffled[cursor..cursor + c] {
            assignment.insert(site, part);
        }
        cursor += c;
    }

    let mut out = SitePartition::default();
    for s in all {
        match assignment[s.site_id.as_str()] {
            0 => out.train.push(s.clone()),
            1 => out.val.push(s.clone()),
            _ => out.test.push(s.clone()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts(h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 6, 1, h, m, 0).unwrap()
    }

    const HEAD: &str = "timestamp,site_id,depth_cm,value,soil_temp,air_temp,precip,manual_flag\n";

    #[test]
    fn groups_by_site_and_depth() {
        let mut csv = HEAD.to_string();
        for site in ["A", "B"] {
            for depth in [5, 30, 60, 100] {
                csv += &format!("2021-06-01T00:00:00Z,{site},{depth},0.3,,,,\n");
            }
        }
        let series = read_csv(csv.as_bytes(), &ColumnMap::default()).unwrap();
        assert_eq!(series.len(), 8);
    }

    #[test]
    fn parses_value() {
        let csv = format!("{HEAD}2021-06-01T00:15:00Z,siteA,5,0.35,,,,1\n");
        let s = read_csv(csv.as_bytes(), &ColumnMap::default()).unwrap();
        let r = &s[0].readings()[0];
        assert_eq!(r.timestamp, ts(0, 15));
        assert_eq!(r.value, Some(0.35));
        assert_eq!(r.manual_flag, Some(true));
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let csv = format!(
            "{HEAD}2021-06-01T00:00:00Z,siteA,5,0.3,,,,\n2021-06-01T00:00:00Z,siteA,5,0.31,,,,\n"
        );
        let err = read_csv(csv.as_bytes(), &ColumnMap::default()).unwrap_err();
        assert!(matches!(err, SeriesError::DuplicateTimestamp { .. }), "{err}");
    }

    #[test]
    fn unsorted_rows_are_sorted_and_gaps_filled() {
        let csv = format!(
            "{HEAD}2021-06-01T01:00:00Z,siteA,5,0.3,,,,\n2021-06-01T00:00:00Z,siteA,5,0.2,,,,\n"
        );
        let s = &read_csv(csv.as_bytes(), &ColumnMap::default()).unwrap()[0];
        assert_eq!(s.len(), 5);
        assert!(s.is_gap_free());
        assert_eq!(s.readings()[0].value, Some(0.2));
        assert_eq!(s.readings()[2].value, None);
        assert_eq!(s.readings()[4].value, Some(0.3));
    }

    #[test]
    fn malformed_row_reports_index() {
        let csv = format!(
            "{HEAD}2021-06-01T00:00:00Z,siteA,5,0.3,,,,\n2021-06-01T00:15:00Z,siteA,5,abc,,,,\n"
        );
        match read_csv(csv.as_bytes(), &ColumnMap::default()).unwrap_err() {
            SeriesError::MalformedRow { row, .. } => assert_eq!(row, 2),
            e => panic!("unexpected {e}"),
        }
        let off = format!("{HEAD}2021-06-01T00:07:00Z,siteA,5,0.3,,,,\n");
        assert!(matches!(
            read_csv(off.as_bytes(), &ColumnMap::default()).unwrap_err(),
            SeriesError::MalformedRow { row: 1, .. }
        ));
        let flag = format!("{HEAD}2021-06-01T00:00:00Z,siteA,5,0.3,,,,yes\n");
        assert!(read_csv(flag.as_bytes(), &ColumnMap::default()).is_err());
    }

    #[test]
    fn missing_column() {
        let csv = "timestamp,site_id,value\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &ColumnMap::default()).unwrap_err(),
            SeriesError::MissingColumn(_)
        ));
    }

    #[test]
    fn custom_schema() {
        let schema = ColumnMap {
            value: "vwc".into(),
            ..ColumnMap::default()
        };
        let csv = "timestamp,site_id,depth_cm,vwc,soil_temp,air_temp,precip,manual_flag\n\
                   2021-06-01T00:00:00Z,A,5,0.25,,,,\n";
        let s = read_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(s[0].readings()[0].value, Some(0.25));
    }

    fn series_at(times: &[(u32, u32)]) -> SensorSeries {
        let readings = times.iter().map(|&(h, m)| Reading::new(ts(h, m), Some(0.3))).collect();
        SensorSeries::new("A", 5, readings).unwrap()
    }

    #[test]
    fn hourly_alignment_is_left_closed() {
        let s = series_at(&[(2, 45), (3, 0), (3, 45), (4, 0)]);
        let hourly = vec![
            HourlyRecord { time: ts(3, 0), precip: Some(2.0), air_temp: Some(11.0) },
            HourlyRecord { time: ts(4, 0), precip: Some(0.0), air_temp: Some(12.0) },
        ];
        let out = align_hourly_ancillary(&s, &hourly).unwrap();
        let r = out.readings();
        assert_eq!(r[0].precip, None);
        assert_eq!(r[1].precip, Some(2.0));
        assert_eq!(r[2].precip, Some(2.0));
        assert_eq!(r[2].air_temp, Some(11.0));
        assert_eq!(r[3].precip, Some(0.0));
        assert_eq!(out.ancillary_source, AncillarySource::Gridded);
    }

    #[test]
    fn hourly_alignment_without_coverage() {
        let s = series_at(&[(3, 45)]);
        let hourly = vec![HourlyRecord { time: ts(5, 0), precip: Some(1.0), air_temp: None }];
        let out = align_hourly_ancillary(&s, &hourly).unwrap();
        assert_eq!(out.readings()[0].precip, None);
        let bad = vec![HourlyRecord { time: ts(5, 30), precip: None, air_temp: None }];
        assert!(matches!(align_hourly_ancillary(&s, &bad), Err(SeriesError::OffHour(_))));
    }

    fn sites(n: usize) -> Vec<SensorSeries> {
        (0..n)
            .flat_map(|i| {
                [5u32, 30].map(|d| SensorSeries::new(format!("s{i:02}"), d, vec![]).unwrap())
            })
            .collect()
    }

    fn site_ids(v: &[SensorSeries]) -> BTreeSet<String> {
        v.iter().map(|s| s.site_id.clone()).collect()
    }

    #[test]
    fn split_eighty_ten_ten() {
        let all = sites(10);
        let p = split_sites(&all, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(site_ids(&p.train).len(), 8);
        assert_eq!(site_ids(&p.val).len(), 1);
        assert_eq!(site_ids(&p.test).len(), 1);
        // depths stay together
        assert_eq!(p.train.len(), 16);
        let again = split_sites(&all, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(site_ids(&p.test), site_ids(&again.test));
        assert_eq!(site_ids(&p.val), site_ids(&again.val));
    }

    #[test]
    fn split_degenerate_and_errors() {
        let all = sites(4);
        let p = split_sites(&all, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!(p.train.len(), all.len());
        assert!(p.val.is_empty() && p.test.is_empty());
        assert!(split_sites(&all, (0.5, 0.5, 0.5), 1).is_err());
        assert!(matches!(
            split_sites(&sites(2), (0.8, 0.1, 0.1), 1),
            Err(SeriesError::TooFewSites { .. })
        ));
    }

    #[test]
    fn constructor_invariants() {
        assert!(SensorSeries::new("A", 0, vec![]).is_err());
        let r = vec![Reading::new(ts(0, 15), Some(0.1)), Reading::new(ts(0, 0), Some(0.1))];
        assert!(SensorSeries::new("A", 5, r).is_err());
        let r = vec![Reading::new(ts(0, 0), Some(f64::NAN))];
        assert!(SensorSeries::new("A", 5, r).is_err());
    }
}
