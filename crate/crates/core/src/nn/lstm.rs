use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{sigmoid, Tensor};
use super::NnError;

/// Weights of one LSTM cell, one matrix and two biases per gate.
///
/// Input matrices are `hidden × input`, recurrent matrices `hidden × hidden`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub w_xf: Tensor,
    pub w_xi: Tensor,
    pub w_xc: Tensor,
    pub w_xo: Tensor,
    pub w_hf: Tensor,
    pub w_hi: Tensor,
    pub w_hc: Tensor,
    pub w_ho: Tensor,
    pub b_xf: Tensor,
    pub b_xi: Tensor,
    pub b_xc: Tensor,
    pub b_xo: Tensor,
    pub b_hf: Tensor,
    pub b_hi: Tensor,
    pub b_hc: Tensor,
    pub b_ho: Tensor,
}

pub const LSTM_PARAM_NAMES: [&str; 16] = [
    "w_xf", "w_xi", "w_xc", "w_xo", "w_hf", "w_hi", "w_hc", "w_ho",
    "b_xf", "b_xi", "b_xc", "b_xo", "b_hf", "b_hi", "b_hc", "b_ho",
];

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let wx = || Tensor::zeros(&[hidden, input]);
        let wh = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        LstmCellParams {
            w_xf: wx(), w_xi: wx(), w_xc: wx(), w_xo: wx(),
            w_hf: wh(), w_hi: wh(), w_hc: wh(), w_ho: wh(),
            b_xf: b(), b_xi: b(), b_xc: b(), b_xo: b(),
            b_hf: b(), b_hi: b(), b_hc: b(), b_ho: b(),
        }
    }

    /// Uniform `±1/√fan_in` initialisation; biases use the fan-in of the
    /// matrix they pair with.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        let bx = 1.0 / (input as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        for (i, t) in p.tensors_mut().into_iter().enumerate() {
            let bound = if matches!(i, 0..=3 | 8..=11) { bx } else { bh };
            for v in t.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_xf.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_xf.rows()
    }

    /// Tensors in [`LSTM_PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.w_xf, &self.w_xi, &self.w_xc, &self.w_xo,
            &self.w_hf, &self.w_hi, &self.w_hc, &self.w_ho,
            &self.b_xf, &self.b_xi, &self.b_xc, &self.b_xo,
            &self.b_hf, &self.b_hi, &self.b_hc, &self.b_ho,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.w_xf, &mut self.w_xi, &mut self.w_xc, &mut self.w_xo,
            &mut self.w_hf, &mut self.w_hi, &mut self.w_hc, &mut self.w_ho,
            &mut self.b_xf, &mut self.b_xi, &mut self.b_xc, &mut self.b_xo,
            &mut self.b_hf, &mut self.b_hi, &mut self.b_hc, &mut self.b_ho,
        ]
    }

    /// Checks that every tensor agrees with `(input, hidden)`.
    pub fn validate(&self) -> Result<(), NnError> {
        let (input, hidden) = (self.input_dim(), self.hidden_dim());
        for (i, t) in self.tensors().into_iter().enumerate() {
            let want: Vec<usize> = match i {
                0..=3 => vec![hidden, input],
                4..=7 => vec![hidden, hidden],
                _ => vec![hidden],
            };
            if t.shape() != want.as_slice() {
                return Err(NnError::Shape { op: "lstm params", left: t.shape().to_vec(), right: want });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

/// Gate activations of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmGates {
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub c_tilde: Vec<f64>,
    pub o: Vec<f64>,
}

/// `W·x + b`.
pub fn linear(w: &Tensor, b: &Tensor, x: &[f64]) -> Result<Vec<f64>, NnError> {
    let (rows, cols) = (w.rows(), w.cols());
    if cols != x.len() || b.len() != rows {
        return Err(NnError::Shape { op: "linear", left: w.shape().to_vec(), right: vec![x.len()] });
    }
    Ok((0..rows)
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b.data()[r])
        .collect())
}

fn gate(
    wx: &Tensor, bx: &Tensor, wh: &Tensor, bh: &Tensor, x: &[f64], h: &[f64], act: fn(f64) -> f64,
) -> Result<Vec<f64>, NnError> {
    let a = linear(wx, bx, x)?;
    let b = linear(wh, bh, h)?;
    Ok(a.iter().zip(&b).map(|(a, b)| act(a + b)).collect())
}

/// One LSTM step with its gate activations.
pub fn lstm_step_traced(p: &LstmCellParams, x: &[f64], prev: &LstmState) -> Result<(LstmState, LstmGates), NnError> {
    let hidden = p.hidden_dim();
    if prev.h.len() != hidden || prev.c.len() != hidden {
        return Err(NnError::Shape { op: "lstm_step", left: vec![hidden], right: vec![prev.h.len(), prev.c.len()] });
    }
    let f = gate(&p.w_xf, &p.b_xf, &p.w_hf, &p.b_hf, x, &prev.h, sigmoid)?;
    let i = gate(&p.w_xi, &p.b_xi, &p.w_hi, &p.b_hi, x, &prev.h, sigmoid)?;
    let c_tilde = gate(&p.w_xc, &p.b_xc, &p.w_hc, &p.b_hc, x, &prev.h, f64::tanh)?;
    let c: Vec<f64> = (0..hidden).map(|j| f[j] * prev.c[j] + i[j] * c_tilde[j]).collect();
    let o = gate(&p.w_xo, &p.b_xo, &p.w_ho, &p.b_ho, x, &prev.h, sigmoid)?;
    let h: Vec<f64> = (0..hidden).map(|j| o[j] * c[j].tanh()).collect();
    if !h.iter().chain(&c).all(|v| v.is_finite()) {
        return Err(NnError::NonFinite("lstm_step"));
    }
    Ok((LstmState { h, c }, LstmGates { f, i, c_tilde, o }))
}

pub fn lstm_step(p: &LstmCellParams, x: &[f64], prev: &LstmState) -> Result<LstmState, NnError> {
    lstm_step_traced(p, x, prev).map(|(s, _)| s)
}

/// Runs `fwd` left to right and `bwd` right to left from zero states and
/// returns `[h_fwd ‖ h_bwd]` per step.
pub fn bilstm_forward(fwd: &LstmCellParams, bwd: &LstmCellParams, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, NnError> {
    if xs.is_empty() {
        return Err(NnError::BadData { shape: vec![0], len: 0 });
    }
    if fwd.input_dim() != bwd.input_dim() || fwd.hidden_dim() != bwd.hidden_dim() {
        return Err(NnError::Shape {
            op: "bilstm",
            left: fwd.w_xf.shape().to_vec(),
            right: bwd.w_xf.shape().to_vec(),
        });
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(xs.len());
    let mut s = LstmState::zeros(fwd.hidden_dim());
    for x in xs {
        s = lstm_step(fwd, x, &s)?;
        out.push(s.h.clone());
    }
    let mut s = LstmState::zeros(bwd.hidden_dim());
    for (t, x) in xs.iter().enumerate().rev() {
        s = lstm_step(bwd, x, &s)?;
        out[t].extend_from_slice(&s.h);
    }
    Ok(out)
}

/// Parameters of one cell recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmLeaves {
    pub vars: [Var; 16],
}

impl LstmLeaves {
    pub fn record(tape: &mut Tape, p: &LstmCellParams) -> Self {
        let vars = p.tensors().map(|t| tape.leaf(t.clone()));
        LstmLeaves { vars }
    }

    /// Runs the cell over `xs`, a `[steps · batch, input]` matrix whose row
    /// `t · batch + b` is step `t` of sequence `b`. Returns hidden states in
    /// the same layout.
    pub fn run(&self, tape: &mut Tape, xs: Var, steps: usize, batch: usize, reverse: bool) -> Result<Var, NnError> {
        let v = &self.vars;
        let hidden = tape.value(v[4]).rows();
        let wx = tape.concat_rows(&v[0..4])?;
        let wh = tape.concat_rows(&v[4..8])?;
        let bx = tape.concat_cols(&v[8..12])?;
        let bh = tape.concat_cols(&v[12..16])?;
        let b = tape.add(bx, bh)?;
        let xp = tape.matmul_nt(xs, wx)?;
        let xp = tape.add_bias(xp, b)?;

        let mut hs: Vec<Option<Var>> = vec![None; steps];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
        for t in order {
            let mut z = tape.slice_rows(xp, t * batch, batch)?;
            if let Some((h, _)) = state {
                let r = tape.matmul_nt(h, wh)?;
                z = tape.add(z, r)?;
            }
            let zf = tape.slice_cols(z, 0, hidden)?;
            let zi = tape.slice_cols(z, hidden, hidden)?;
            let zc = tape.slice_cols(z, 2 * hidden, hidden)?;
            let zo = tape.slice_cols(z, 3 * hidden, hidden)?;
            let i = tape.sigmoid(zi)?;
            let c_tilde = tape.tanh(zc)?;
            let mut c = tape.mul(i, c_tilde)?;
            if let Some((_, c_prev)) = state {
                let f = tape.sigmoid(zf)?;
                let keep = tape.mul(f, c_prev)?;
                c = tape.add(keep, c)?;
            }
            let o = tape.sigmoid(zo)?;
            let tc = tape.tanh(c)?;
            let h = tape.mul(o, tc)?;
            hs[t] = Some(h);
            state = Some((h, c));
        }
        let hs: Vec<Var> = hs.into_iter().map(|h| h.expect("every step visited")).collect();
        tape.concat_rows(&hs)
    }
}

/// Bidirectional pass on the tape: `[steps · batch, 2 · hidden]`.
pub fn bilstm_tape(
    tape: &mut Tape, fwd: &LstmLeaves, bwd: &LstmLeaves, xs: Var, steps: usize, batch: usize,
) -> Result<Var, NnError> {
    let f = fwd.run(tape, xs, steps, batch, false)?;
    let b = bwd.run(tape, xs, steps, batch, true)?;
    tape.concat_cols(&[f, b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights() {
        let p = LstmCellParams::zeros(2, 3);
        let (s, g) = lstm_step_traced(&p, &[0.7, -0.2], &LstmState::zeros(3)).unwrap();
        assert_eq!(g.f, vec![0.5; 3]);
        assert_eq!(g.i, vec![0.5; 3]);
        assert_eq!(g.o, vec![0.5; 3]);
        assert_eq!(s.h, vec![0.0; 3]);
        assert_eq!(s.c, vec![0.0; 3]);
        let prev = LstmState { h: vec![0.0; 3], c: vec![0.8; 3] };
        let s = lstm_step(&p, &[0.1, 0.1], &prev).unwrap();
        for j in 0..3 {
            assert_eq!(s.c[j], 0.4);
            assert_eq!(s.h[j], 0.5 * 0.4f64.tanh());
        }
    }

    #[test]
    fn tape_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (input, hidden, steps, batch) = (3, 4, 5, 2);
        let fwd = LstmCellParams::init(input, hidden, &mut rng);
        let bwd = LstmCellParams::init(input, hidden, &mut rng);
        let seqs: Vec<Vec<Vec<f64>>> = (0..batch)
            .map(|_| (0..steps).map(|_| (0..input).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let mut data = Vec::new();
        for t in 0..steps {
            for s in &seqs {
                data.extend_from_slice(&s[t]);
            }
        }
        let mut tape = Tape::new();
        let xs = tape.leaf(Tensor::matrix(steps * batch, input, data).unwrap());
        let lf = LstmLeaves::record(&mut tape, &fwd);
        let lb = LstmLeaves::record(&mut tape, &bwd);
        let out = bilstm_tape(&mut tape, &lf, &lb, xs, steps, batch).unwrap();
        let out = tape.value(out);
        for (b, s) in seqs.iter().enumerate() {
            let plain = bilstm_forward(&fwd, &bwd, s).unwrap();
            for t in 0..steps {
                for (x, y) in out.row(t * batch + b).iter().zip(&plain[t]) {
                    assert!((x - y).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn mismatched_dims_rejected() {
        let p = LstmCellParams::zeros(2, 3);
        assert!(lstm_step(&p, &[1.0], &LstmState::zeros(3)).is_err());
        assert!(lstm_step(&p, &[1.0, 2.0], &LstmState::zeros(2)).is_err());
        let q = LstmCellParams::zeros(2, 4);
        assert!(bilstm_forward(&p, &q, &[vec![0.0, 0.0]]).is_err());
        assert!(bilstm_forward(&p, &p, &[]).is_err());
    }
}
