//! The sequence classifier: per-step and per-window embeddings summed into a
//! shared space, a bidirectional LSTM, and a sigmoid head per timestep.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Datelike, NaiveDate, Timelike, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{bilstm_tape, LstmCellParams, LstmLeaves, NnError, Tape, Tensor, Var};
use crate::series::{SensorSeries, STEPS_PER_DAY, STEP_MINUTES};

pub const FORMAT_TAG: &str = "deepqc-model";
pub const FORMAT_VERSION: u32 = 1;
/// Values are divided by this before entering the network.
pub const VALUE_SCALE: f64 = 0.6;
pub const FEATURE_DIM: usize = 2;
pub const CONTEXT_DIM: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
const INFER_CHUNK: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not a model file (format tag {0:?})")]
    Format(String),
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error("model file: {0}")]
    Weights(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("inputs in one batch must share length ({0} vs {1})")]
    RaggedBatch(usize, usize),
    #[error("threshold {0} outside (0, 1)")]
    BadThreshold(f64),
}

/// `y = W·x + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { w: Tensor::zeros(&[output, input]), b: Tensor::zeros(&[output]) }
    }

    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(input, output);
        let bound = 1.0 / (input as f64).sqrt();
        for v in l.w.data_mut().iter_mut().chain(l.b.data_mut()) {
            *v = rng.random_range(-bound..bound);
        }
        l
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        crate::nn::linear(&self.w, &self.b, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub context_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { feature_dim: FEATURE_DIM, context_dim: CONTEXT_DIM, embed_dim: 32, hidden_dim: 64 }
    }
}

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub embed_value: Linear,
    pub embed_context: Linear,
    pub fwd: LstmCellParams,
    pub bwd: LstmCellParams,
    pub head: Linear,
    pub meta: Option<TrainingMeta>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        ModelParams {
            dims,
            embed_value: Linear::zeros(dims.feature_dim, dims.embed_dim),
            embed_context: Linear::zeros(dims.context_dim, dims.embed_dim),
            fwd: LstmCellParams::zeros(dims.embed_dim, dims.hidden_dim),
            bwd: LstmCellParams::zeros(dims.embed_dim, dims.hidden_dim),
            head: Linear::zeros(2 * dims.hidden_dim, 1),
            meta: None,
        }
    }

    /// Uniform `±1/√fan_in` weights from a generator seeded with `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = crate::rng::derived(seed, 0x1417);
        ModelParams {
            dims,
            embed_value: Linear::init(dims.feature_dim, dims.embed_dim, &mut rng),
            embed_context: Linear::init(dims.context_dim, dims.embed_dim, &mut rng),
            fwd: LstmCellParams::init(dims.embed_dim, dims.hidden_dim, &mut rng),
            bwd: LstmCellParams::init(dims.embed_dim, dims.hidden_dim, &mut rng),
            head: Linear::init(2 * dims.hidden_dim, 1, &mut rng),
            meta: None,
        }
    }

    pub fn names() -> Vec<String> {
        let mut n = vec!["embed_value.w".to_string(), "embed_value.b".into(), "embed_context.w".into(), "embed_context.b".into()];
        for dir in ["fwd", "bwd"] {
            n.extend(crate::nn::LSTM_PARAM_NAMES.iter().map(|p| format!("bilstm.{dir}.{p}")));
        }
        n.push("head.w".into());
        n.push("head.b".into());
        n
    }

    /// Every tensor in [`ModelParams::names`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.embed_value.w, &self.embed_value.b, &self.embed_context.w, &self.embed_context.b];
        v.extend(self.fwd.tensors());
        v.extend(self.bwd.tensors());
        v.push(&self.head.w);
        v.push(&self.head.b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.embed_value.w,
            &mut self.embed_value.b,
            &mut self.embed_context.w,
            &mut self.embed_context.b,
        ];
        v.extend(self.fwd.tensors_mut());
        v.extend(self.bwd.tensors_mut());
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks every tensor shape against `dims`.
    pub fn validate(&self) -> Result<(), ModelError> {
        let reference = ModelParams::zeros(self.dims);
        for ((name, a), b) in Self::names().iter().zip(self.tensors()).zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Weights(format!("{name}: shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
            if !a.is_finite() {
                return Err(ModelError::Weights(format!("{name}: non-finite weight")));
            }
        }
        Ok(())
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let file = ModelFile {
            format: FORMAT_TAG.into(),
            format_version: FORMAT_VERSION,
            dims: self.dims,
            weights: Self::names()
                .into_iter()
                .zip(self.tensors())
                .map(|(name, t)| NamedWeight { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
                .collect(),
            training: self.meta.clone(),
        };
        serde_json::to_writer(&mut w, &file)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let header: FileHeader = serde_json::from_str(&text)?;
        if header.format != FORMAT_TAG {
            return Err(ModelError::Format(header.format));
        }
        if header.format_version != FORMAT_VERSION {
            return Err(ModelError::Version(header.format_version));
        }
        let file: ModelFile = serde_json::from_str(&text)?;
        let mut by_name: BTreeMap<String, NamedWeight> = BTreeMap::new();
        for w in file.weights {
            if by_name.insert(w.name.clone(), w).is_some() {
                return Err(ModelError::Weights("duplicate weight name".into()));
            }
        }
        let mut params = ModelParams::zeros(file.dims);
        let names = Self::names();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let w = by_name.remove(name).ok_or_else(|| ModelError::Weights(format!("missing weight {name}")))?;
            if w.shape != t.shape() {
                return Err(ModelError::Weights(format!("{name}: shape {:?}, expected {:?}", w.shape, t.shape())));
            }
            *t = Tensor::new(w.shape, w.data)?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Weights(format!("unknown weight {extra}")));
        }
        params.meta = file.training;
        params.validate()?;
        Ok(params)
    }
}

#[derive(Deserialize)]
struct FileHeader {
    format: String,
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedWeight {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    format_version: u32,
    dims: ModelDims,
    weights: Vec<NamedWeight>,
    training: Option<TrainingMeta>,
}

/// Network input for one sequence: `[steps, feature_dim]` features plus a
/// context vector shared by all steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub features: Tensor,
    pub context: Vec<f64>,
}

impl SequenceInput {
    pub fn steps(&self) -> usize {
        self.features.rows()
    }
}

/// One UTC calendar day of a sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub site_id: String,
    pub depth_cm: u32,
    pub date: NaiveDate,
    pub day_of_year: u32,
    /// Readings by 15-minute slot; `None` for missing or absent slots.
    pub values: Vec<Option<f64>>,
    pub missing_mask: Vec<bool>,
    /// Reference labels, when every present reading carries one.
    pub labels: Option<Vec<bool>>,
    pub weight: f64,
    /// Index into the source series for each slot that has a reading.
    pub reading_index: Vec<Option<usize>>,
}

impl WindowSample {
    pub fn has_anomaly(&self) -> bool {
        self.labels.as_ref().is_some_and(|l| l.iter().any(|x| *x))
    }

    pub fn features(&self) -> Vec<[f64; FEATURE_DIM]> {
        self.values
            .iter()
            .map(|v| match v {
                Some(v) => [v / VALUE_SCALE, 0.0],
                None => [0.0, 1.0],
            })
            .collect()
    }

    pub fn context(&self) -> [f64; CONTEXT_DIM] {
        context_vector(self.depth_cm, self.day_of_year)
    }

    pub fn input(&self) -> SequenceInput {
        let data: Vec<f64> = self.features().into_iter().flatten().collect();
        SequenceInput {
            features: Tensor::new(vec![self.values.len(), FEATURE_DIM], data).expect("fixed width"),
            context: self.context().to_vec(),
        }
    }
}

pub fn context_vector(depth_cm: u32, day_of_year: u32) -> [f64; CONTEXT_DIM] {
    let angle = 2.0 * std::f64::consts::PI * day_of_year as f64 / 366.0;
    [depth_cm as f64 / 100.0, angle.sin(), angle.cos()]
}

fn slot_of(ts: &DateTime<Utc>) -> usize {
    ((ts.hour() as i64 * 60 + ts.minute() as i64) / STEP_MINUTES) as usize
}

/// One window per UTC day holding at least one present value.
pub fn featurize(series: &SensorSeries) -> Vec<WindowSample> {
    let mut days: BTreeMap<NaiveDate, WindowSample> = BTreeMap::new();
    for (idx, r) in series.readings().iter().enumerate() {
        let date = r.timestamp.date_naive();
        let w = days.entry(date).or_insert_with(|| WindowSample {
            site_id: series.site_id.clone(),
            depth_cm: series.depth_cm,
            date,
            day_of_year: date.ordinal(),
            values: vec![None; STEPS_PER_DAY],
            missing_mask: vec![true; STEPS_PER_DAY],
            labels: Some(vec![false; STEPS_PER_DAY]),
            weight: 1.0,
            reading_index: vec![None; STEPS_PER_DAY],
        });
        let slot = slot_of(&r.timestamp);
        w.reading_index[slot] = Some(idx);
        if let Some(v) = r.value {
            w.values[slot] = Some(v);
            w.missing_mask[slot] = false;
            match (r.manual_flag, w.labels.as_mut()) {
                (Some(flag), Some(labels)) => labels[slot] = flag,
                (None, _) => w.labels = None,
                _ => {}
            }
        }
    }
    days.into_values().filter(|w| w.missing_mask.iter().any(|m| !m)).collect()
}

/// `p ≥ threshold` per element.
pub fn classify(probabilities: &[f64], threshold: f64) -> Vec<bool> {
    probabilities.iter().map(|p| *p >= threshold).collect()
}

pub fn check_threshold(threshold: f64) -> Result<f64, ModelError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(threshold)
    } else {
        Err(ModelError::BadThreshold(threshold))
    }
}

/// Parameters recorded as tape leaves, in [`ModelParams::names`] order.
pub struct ModelLeaves {
    pub vars: Vec<Var>,
    fwd: LstmLeaves,
    bwd: LstmLeaves,
}

impl ModelLeaves {
    pub fn record(tape: &mut Tape, p: &ModelParams) -> Self {
        let vars: Vec<Var> = p.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect();
        let mut f = [vars[0]; 16];
        let mut b = [vars[0]; 16];
        f.copy_from_slice(&vars[4..20]);
        b.copy_from_slice(&vars[20..36]);
        ModelLeaves { vars, fwd: LstmLeaves { vars: f }, bwd: LstmLeaves { vars: b } }
    }
}

/// Records the forward pass for a batch of equal-length inputs and returns
/// the `[steps · batch, 1]` probabilities, row `t · batch + b`.
pub fn forward_tape(tape: &mut Tape, leaves: &ModelLeaves, inputs: &[SequenceInput]) -> Result<Var, ModelError> {
    let batch = inputs.len();
    let steps = inputs.first().map(|i| i.steps()).unwrap_or(0);
    for i in inputs {
        if i.steps() != steps {
            return Err(ModelError::RaggedBatch(steps, i.steps()));
        }
    }
    let fdim = inputs.first().map(|i| i.features.cols()).unwrap_or(0);
    let mut x = Vec::with_capacity(steps * batch * fdim);
    for t in 0..steps {
        for i in inputs {
            x.extend_from_slice(i.features.row(t));
        }
    }
    let cdim = inputs.first().map(|i| i.context.len()).unwrap_or(0);
    let ctx: Vec<f64> = inputs.iter().flat_map(|i| i.context.iter().copied()).collect();
    let x = tape.leaf(Tensor::matrix(steps * batch, fdim, x)?);
    let ctx = tape.leaf(Tensor::matrix(batch, cdim, ctx)?);
    let v = &leaves.vars;

    let ev = tape.matmul_nt(x, v[0])?;
    let ev = tape.add_bias(ev, v[1])?;
    let ec = tape.matmul_nt(ctx, v[2])?;
    let ec = tape.add_bias(ec, v[3])?;
    let ec = tape.tile_rows(ec, steps)?;
    let emb = tape.add(ev, ec)?;
    let h = bilstm_tape(tape, &leaves.fwd, &leaves.bwd, emb, steps, batch)?;
    let logits = tape.matmul_nt(h, v[36])?;
    let logits = tape.add_bias(logits, v[37])?;
    Ok(tape.sigmoid(logits)?)
}

/// Per-step probabilities for one input.
pub fn forward(params: &ModelParams, input: &SequenceInput) -> Result<Vec<f64>, ModelError> {
    Ok(forward_batch(params, std::slice::from_ref(input))?.pop().unwrap_or_default())
}

/// Per-step probabilities for each input; inputs may differ in length.
pub fn forward_batch(params: &ModelParams, inputs: &[SequenceInput]) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = vec![Vec::new(); inputs.len()];
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, x) in inputs.iter().enumerate() {
        by_len.entry(x.steps()).or_default().push(i);
    }
    for idx in by_len.values() {
        for chunk in idx.chunks(INFER_CHUNK) {
            let batch: Vec<SequenceInput> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let mut tape = Tape::new();
            let leaves = ModelLeaves::record(&mut tape, params);
            let p = forward_tape(&mut tape, &leaves, &batch)?;
            let p = tape.value(p).data();
            let b = chunk.len();
            for (k, &i) in chunk.iter().enumerate() {
                out[i] = (0..batch[k].steps()).map(|t| p[t * b + k]).collect();
            }
        }
    }
    Ok(out)
}

/// Anomaly probability per reading; `None` where the value is missing.
pub fn predict_series(params: &ModelParams, series: &SensorSeries) -> Result<Vec<Option<f64>>, ModelError> {
    let windows = featurize(series);
    let inputs: Vec<SequenceInput> = windows.iter().map(|w| w.input()).collect();
    let probs = forward_batch(params, &inputs)?;
    let mut out = vec![None; series.len()];
    for (w, p) in windows.iter().zip(probs) {
        for (slot, idx) in w.reading_index.iter().enumerate() {
            if let (Some(idx), false) = (idx, w.missing_mask[slot]) {
                out[*idx] = Some(p[slot]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::Reading;
    use chrono::TimeZone;

    fn series(days: usize) -> SensorSeries {
        let t0 = Utc.with_ymd_and_hms(2021, 6, 1, 0, 0, 0).unwrap();
        let readings = (0..days * 96)
            .map(|k| Reading::new(t0 + crate::series::step() * k as i32, Some(0.2 + 0.001 * (k % 7) as f64)))
            .collect();
        SensorSeries::new("s", 30, readings).unwrap()
    }

    #[test]
    fn featurize_partitions_by_day() {
        let s = series(3);
        let w = featurize(&s);
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|w| w.values.len() == 96));
        assert_eq!(w[1].reading_index[0], Some(96));
    }

    #[test]
    fn all_missing_day_excluded() {
        let s = series(2);
        let mut r = s.readings().to_vec();
        for x in &mut r[96..] {
            x.value = None;
        }
        let s = SensorSeries::new("s", 30, r).unwrap();
        assert_eq!(featurize(&s).len(), 1);
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut p = ModelParams::init(ModelDims { embed_dim: 4, hidden_dim: 3, ..Default::default() }, 1);
        p.head = Linear::zeros(6, 1);
        let w = &featurize(&series(1))[0];
        let out = forward(&p, &w.input()).unwrap();
        assert_eq!(out, vec![0.5; 96]);
    }

    #[test]
    fn save_load_round_trip() {
        let p = ModelParams::init(ModelDims { embed_dim: 3, hidden_dim: 2, ..Default::default() }, 9);
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        let q = ModelParams::load(&buf[..]).unwrap();
        assert_eq!(p, q);
        let text = String::from_utf8(buf).unwrap().replace("\"format_version\":1", "\"format_version\":7");
        assert!(matches!(ModelParams::load(text.as_bytes()), Err(ModelError::Version(7))));
        assert!(ModelParams::load(&b"{not json"[..]).is_err());
    }

    #[test]
    fn classify_boundary() {
        assert_eq!(classify(&[0.5, 0.49], 0.5), vec![true, false]);
        assert!(check_threshold(1.0).is_err());
    }
}
