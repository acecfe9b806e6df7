//! Pipelines behind the `deepqc` binary. Each `cmd_*` function reads its
//! inputs, does the work and writes its outputs atomically.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use deepqc_core::eval::{
    benchmark, confusion, rule_predictions, stratify_by_anomaly_fraction, write_site_csv, write_site_plot_csv, write_table,
    write_table_csv, ConfusionMatrix, EvalError, SiteReport, DEFAULT_CUTOFF,
};
use deepqc_core::model::{check_threshold, featurize, predict_series, ModelDims, ModelError, ModelParams, WindowSample};
use deepqc_core::rules::{run_rules, RuleConfig, RuleError};
use deepqc_core::series::{format_timestamp, ingest_csv, split_sites, write_csv_with, write_flagged_csv, ColumnMap, SeriesError};
use deepqc_core::synth::{generate_corpus, write_ground_truth, SynthConfig, SynthError};
use deepqc_core::train::{train_with, write_history, TrainConfig, TrainError};
use deepqc_core::flags::FlagSet;
use deepqc_core::series::SensorSeries;
use serde::{Deserialize, Serialize};

/// Error class printed on stderr and mapped to an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Config,
    Io,
    Data,
    Version,
    Numeric,
}

impl ErrorClass {
    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Config => "config",
            ErrorClass::Io => "io",
            ErrorClass::Data => "data",
            ErrorClass::Version => "version",
            ErrorClass::Numeric => "numeric",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Usage | ErrorClass::Config => 2,
            ErrorClass::Io | ErrorClass::Data | ErrorClass::Version => 3,
            ErrorClass::Numeric => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CliError::Usage(_) => ErrorClass::Usage,
            CliError::Config { .. } | CliError::Rules(RuleError::Invalid(_) | RuleError::BadSgParams { .. }) => ErrorClass::Config,
            CliError::Synth(SynthError::Config(_)) | CliError::Train(TrainError::Config(_)) => ErrorClass::Config,
            CliError::Model(ModelError::BadThreshold(_)) => ErrorClass::Usage,
            CliError::Io { .. } | CliError::Series(SeriesError::Io(_)) | CliError::Model(ModelError::Io(_)) => ErrorClass::Io,
            CliError::Synth(SynthError::Io(_)) | CliError::Eval(EvalError::Io(_)) => ErrorClass::Io,
            CliError::Model(ModelError::Version(_) | ModelError::Format(_) | ModelError::Parse(_) | ModelError::Weights(_)) => {
                ErrorClass::Version
            }
            CliError::Model(ModelError::Nn(_)) | CliError::Train(TrainError::Diverged { .. }) => ErrorClass::Numeric,
            CliError::Train(TrainError::Model(ModelError::Nn(_))) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    /// `error: <class>: <message>` on a single line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error: {}: {}", self.class().name(), msg)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// Settings of the `[model]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub threshold: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::default();
        ModelSection { embed_dim: d.embed_dim, hidden_dim: d.hidden_dim, threshold: 0.5 }
    }
}

impl ModelSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims { embed_dim: self.embed_dim, hidden_dim: self.hidden_dim, ..ModelDims::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub rules: RuleConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub model: ModelSection,
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config { path: origin.to_string(), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Config::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                Config::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.rules.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        check_threshold(self.model.threshold)?;
        if self.model.embed_dim == 0 || self.model.hidden_dim == 0 {
            return Err(CliError::Config { path: "[model]".into(), msg: "embed_dim and hidden_dim must be positive".into() });
        }
        Ok(())
    }

    /// Applies command-line overrides, which win over the file.
    pub fn with_overrides(mut self, seed: Option<u64>, threshold: Option<f64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.synth.seed = s;
            self.train.seed = s;
        }
        if let Some(t) = threshold {
            self.model.threshold = check_threshold(t)?;
        }
        Ok(self)
    }
}

/// Writes through a temporary file in the destination directory and renames
/// it into place.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> Result<(), CliError>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.persist(path).map_err(|e| CliError::Io { path: path.display().to_string(), source: e.error })?;
    Ok(())
}

pub fn load_series(path: &Path) -> Result<Vec<SensorSeries>, CliError> {
    if !path.exists() {
        return Err(CliError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    Ok(ingest_csv(path, &ColumnMap::default())?)
}

pub fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(ModelParams::load(std::io::BufReader::new(f))?)
}

/// Reference labels of present readings; `None` for missing values.
pub fn reference_labels(s: &SensorSeries) -> Vec<Option<bool>> {
    s.readings().iter().map(|r| r.value.and(r.manual_flag)).collect()
}

/// Writes `corpus.csv` and `ground_truth.csv` into `out_dir`.
pub fn cmd_synth(cfg: &Config, out_dir: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    let (series, reports) = generate_corpus(&cfg.synth)?;
    let corpus = out_dir.join("corpus.csv");
    let truth = out_dir.join("ground_truth.csv");
    write_atomic(&corpus, |w| Ok(deepqc_core::series::write_csv(w, &series)?))?;
    write_atomic(&truth, |w| Ok(write_ground_truth(w, &reports)?))?;
    Ok((corpus, truth))
}

pub fn cmd_flag(in_csv: &Path, cfg: &Config, out_csv: &Path) -> Result<(), CliError> {
    let series = load_series(in_csv)?;
    let flags: Vec<Vec<FlagSet>> = series.iter().map(|s| run_rules(s, &cfg.rules)).collect::<Result<_, _>>()?;
    write_atomic(out_csv, |w| Ok(write_flagged_csv(w, &series, &flags)?))
}

/// Path of the history CSV written next to a model file.
pub fn history_path(model_out: &Path) -> PathBuf {
    let mut name = model_out.file_stem().unwrap_or_default().to_os_string();
    name.push(".history.csv");
    model_out.with_file_name(name)
}

pub fn cmd_train(in_csv: &Path, cfg: &Config, model_out: &Path) -> Result<PathBuf, CliError> {
    let series = load_series(in_csv)?;
    let vf = cfg.train.val_fraction;
    let (train_s, val_s) = if vf > 0.0 {
        let p = split_sites(&series, (1.0 - vf, vf, 0.0), cfg.train.seed)?;
        (p.train, p.val)
    } else {
        (series, Vec::new())
    };
    let train: Vec<WindowSample> = train_s.iter().flat_map(featurize).collect();
    let val: Vec<WindowSample> = val_s.iter().flat_map(featurize).collect();
    let init = ModelParams::init(cfg.model.dims(), cfg.train.seed);
    let outcome = train_with(init, &train, &val, &cfg.train, |r| {
        eprintln!(
            "epoch {:>4}  train {:.6}  val {}",
            r.epoch,
            r.train_loss,
            r.val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
        );
    })?;
    write_atomic(model_out, |w| Ok(outcome.params.save(w)?))?;
    let hist = history_path(model_out);
    write_atomic(&hist, |w| Ok(write_history(w, &outcome.history)?))?;
    Ok(hist)
}

fn fmt_prob(p: Option<f64>) -> String {
    p.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn cmd_predict(in_csv: &Path, model_in: &Path, out_csv: &Path, threshold: f64) -> Result<(), CliError> {
    let threshold = check_threshold(threshold)?;
    let model = load_model(model_in)?;
    let series = load_series(in_csv)?;
    let probs: Vec<Vec<Option<f64>>> = series.iter().map(|s| predict_series(&model, s)).collect::<Result<_, _>>()?;
    write_atomic(out_csv, |w| {
        Ok(write_csv_with(w, &series, &["probability", "anomaly"], |si, ri| {
            let p = probs[si][ri];
            let flag = match p {
                Some(v) if v >= threshold => "1",
                Some(_) => "0",
                None => "",
            };
            vec![fmt_prob(p), flag.to_string()]
        })?)
    })
}

type Key = (String, u32, String);

/// Binary predictions keyed by `(site, depth, timestamp)`, taken from an
/// `anomaly` column when present and otherwise from `qflag`.
pub fn read_predictions(path: &Path) -> Result<HashMap<Key, Option<bool>>, CliError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(f);
    let headers = rdr.headers().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (ts, site, depth) = match (col("timestamp"), col("site_id"), col("depth_cm")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(CliError::Data(format!("{}: missing timestamp/site_id/depth_cm columns", path.display()))),
    };
    let anomaly = col("anomaly");
    let qflag = col("qflag");
    if anomaly.is_none() && qflag.is_none() {
        return Err(CliError::Data(format!("{}: needs an `anomaly` or `qflag` column", path.display())));
    }
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CliError::Data(format!("{}: row {row}: {e}", path.display())))?;
        let bad = |what: &str| CliError::Data(format!("{}: row {row}: {what}", path.display()));
        let d: u32 = rec[depth].trim().parse().map_err(|_| bad("bad depth"))?;
        let t = deepqc_core::series::parse_timestamp(&rec[ts]).map_err(|e| bad(&e))?;
        let value = match (anomaly, qflag) {
            (Some(a), _) => match rec[a].trim() {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => return Err(bad(&format!("anomaly value {other:?}"))),
            },
            (None, Some(q)) => {
                let f: FlagSet = rec[q].parse().map_err(|e| bad(&format!("{e}")))?;
                f.as_anomaly()
            }
            _ => unreachable!(),
        };
        out.insert((rec[site].to_string(), d, format_timestamp(&t)), value);
    }
    Ok(out)
}

fn site_reports(series: &[SensorSeries], predictions: &[Vec<Option<bool>>]) -> Result<Vec<SiteReport>, CliError> {
    // one report per site, pooling its depths
    let mut by_site: Vec<(String, ConfusionMatrix, u64)> = Vec::new();
    for (s, p) in series.iter().zip(predictions) {
        let sc = confusion(&reference_labels(s), p)?;
        match by_site.iter_mut().find(|e| e.0 == s.site_id) {
            Some(e) => {
                e.1 = e.1.merge(&sc.matrix);
                e.2 += sc.excluded;
            }
            None => by_site.push((s.site_id.clone(), sc.matrix, sc.excluded)),
        }
    }
    Ok(by_site.into_iter().map(|(id, m, x)| SiteReport::from_matrix(id, m, x)).collect())
}

fn strata_rows(label: &str, reports: &[SiteReport]) -> Result<Vec<(String, ConfusionMatrix)>, CliError> {
    let st = stratify_by_anomaly_fraction(reports, DEFAULT_CUTOFF)?;
    let total: ConfusionMatrix = reports.iter().map(|r| r.matrix).sum();
    Ok(vec![
        (format!("{label} all"), total),
        (format!("{label} <=30% sites ({})", st.low.len()), st.low_total),
        (format!("{label} >30% sites ({})", st.high.len()), st.high_total),
    ])
}

/// Scores `predicted_csv` against the manual flags of `reference_csv` and
/// writes `report.txt`, `summary.csv` and `sites.csv` into `out_dir`.
pub fn cmd_evaluate(reference_csv: &Path, predicted_csv: &Path, out_dir: &Path) -> Result<ConfusionMatrix, CliError> {
    let series = load_series(reference_csv)?;
    let pred = read_predictions(predicted_csv)?;
    let predictions: Vec<Vec<Option<bool>>> = series
        .iter()
        .map(|s| {
            s.readings()
                .iter()
                .map(|r| pred.get(&(s.site_id.clone(), s.depth_cm, format_timestamp(&r.timestamp))).copied().flatten())
                .collect()
        })
        .collect();
    let reports = site_reports(&series, &predictions)?;
    let rows = strata_rows("prediction", &reports)?;
    let excluded: u64 = reports.iter().map(|r| r.excluded).sum();
    write_atomic(&out_dir.join("report.txt"), |w| {
        write_table(&mut *w, &rows)?;
        writeln!(w, "unscored readings: {excluded}").map_err(io_err(out_dir))?;
        Ok(())
    })?;
    write_atomic(&out_dir.join("summary.csv"), |w| Ok(write_table_csv(w, &rows)?))?;
    write_atomic(&out_dir.join("sites.csv"), |w| Ok(write_site_csv(w, &reports)?))?;
    Ok(rows[0].1)
}

/// Side-by-side rule engine and model evaluation plus a throughput
/// benchmark. Timings go to `benchmark.csv`; all other files depend only on
/// the inputs.
pub fn cmd_compare(in_csv: &Path, cfg: &Config, model_in: &Path, out_dir: &Path) -> Result<(ConfusionMatrix, ConfusionMatrix), CliError> {
    let model = load_model(model_in)?;
    let series = load_series(in_csv)?;
    let threshold = cfg.model.threshold;
    let rule_pred: Vec<Vec<Option<bool>>> = series
        .iter()
        .map(|s| run_rules(s, &cfg.rules).map(|f| rule_predictions(&f)))
        .collect::<Result<_, _>>()?;
    let model_pred: Vec<Vec<Option<bool>>> = series
        .iter()
        .map(|s| predict_series(&model, s).map(|p| p.iter().map(|x| x.map(|v| v >= threshold)).collect()))
        .collect::<Result<_, _>>()?;
    let rule_reports = site_reports(&series, &rule_pred)?;
    let model_reports = site_reports(&series, &model_pred)?;
    let mut rows = strata_rows("rules", &rule_reports)?;
    rows.extend(strata_rows("model", &model_reports)?);

    let observations: usize = series.iter().map(|s| s.len()).sum();
    let rb = benchmark(observations, observations, || {
        for s in &series {
            std::hint::black_box(run_rules(s, &cfg.rules).ok());
        }
    })?;
    let mb = benchmark(observations, observations, || {
        for s in &series {
            std::hint::black_box(predict_series(&model, s).ok());
        }
    })?;

    write_atomic(&out_dir.join("report.txt"), |w| {
        write_table(&mut *w, &rows)?;
        Ok(())
    })?;
    write_atomic(&out_dir.join("summary.csv"), |w| Ok(write_table_csv(w, &rows)?))?;
    write_atomic(&out_dir.join("sites_rules.csv"), |w| Ok(write_site_csv(w, &rule_reports)?))?;
    write_atomic(&out_dir.join("sites_model.csv"), |w| Ok(write_site_csv(w, &model_reports)?))?;
    write_atomic(&out_dir.join("plot.csv"), |w| Ok(write_site_plot_csv(w, &rule_reports, &model_reports)?))?;
    write_atomic(&out_dir.join("benchmark.csv"), |w| {
        let mut wtr = csv::Writer::from_writer(w);
        let e = |e: csv::Error| CliError::Data(e.to_string());
        wtr.write_record(["flagger", "observations", "median_seconds", "observations_per_second"]).map_err(e)?;
        for (name, b) in [("rules", rb), ("model", mb)] {
            wtr.write_record([
                name.to_string(),
                b.observations.to_string(),
                format!("{:.6}", b.wall.as_secs_f64()),
                format!("{:.1}", b.per_second),
            ])
            .map_err(e)?;
        }
        wtr.flush().map_err(io_err(out_dir))?;
        Ok(())
    })?;
    Ok((rows[0].1, rows[3].1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(Config::parse("", "x").unwrap(), Config::default());
    }

    #[test]
    fn sections_override_module_defaults() {
        let c = Config::parse("[rules]\nspike_z = 4.5\n[synth]\nn_sites = 2\n[model]\nthreshold = 0.3\n", "x").unwrap();
        assert_eq!(c.rules.spike_z, 4.5);
        assert_eq!(c.synth.n_sites, 2);
        assert_eq!(c.model.threshold, 0.3);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in ["[rules]\nnope = 1\n", "[nope]\n", "[synth.anomaly_mix]\nspikes = 0.5\n"] {
            let e = Config::parse(text, "cfg.toml").unwrap_err();
            assert_eq!(e.class(), ErrorClass::Config, "{text}");
            assert!(e.line().starts_with("error: config: cfg.toml"));
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = Config::parse("[synth]\nanomaly_fraction = 2.0\n", "x").unwrap_err();
        assert_eq!(e.class().exit_code(), 2);
        let e = Config::parse("[model]\nthreshold = 1.0\n", "x").unwrap_err();
        assert_eq!(e.class().exit_code(), 2);
    }

    #[test]
    fn flags_win_over_file() {
        let c = Config::parse("[synth]\nseed = 1\n[train]\nseed = 2\n", "x").unwrap();
        let c = c.with_overrides(Some(9), Some(0.7)).unwrap();
        assert_eq!((c.synth.seed, c.train.seed, c.model.threshold), (9, 9, 0.7));
        assert!(Config::default().with_overrides(None, Some(0.0)).is_err());
    }

    #[test]
    fn history_sits_next_to_model() {
        assert_eq!(history_path(Path::new("out/m.json")), PathBuf::from("out/m.history.csv"));
    }

    #[test]
    fn atomic_write_leaves_no_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("f.txt");
        let r = write_atomic(&target, |w| {
            w.write_all(b"half").unwrap();
            Err(CliError::Data("boom".into()))
        });
        assert!(r.is_err());
        assert!(!target.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        write_atomic(&target, |w| w.write_all(b"ok").map_err(io_err(Path::new("f")))).unwrap();
        assert_eq!(fs::read_to_string(&target).unwrap(), "ok");
    }

    #[test]
    fn error_lines_are_single_line() {
        let e = CliError::Data("a\nb".into());
        assert_eq!(e.line(), "error: data: a b");
        assert_eq!(e.class().exit_code(), 3);
    }
}
