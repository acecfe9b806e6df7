//! Checks against independent reference computations written out in full.

use chrono::NaiveDate;
use deepqc_core::eval::ConfusionMatrix;
use deepqc_core::model::{forward, ModelDims, ModelParams, WindowSample};
use deepqc_core::nn::{bilstm_forward, lstm_step_traced, LstmCellParams, LstmState, Tensor};
use deepqc_core::rules::sg_kernel;
use deepqc_core::train::{batch_loss, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Center-sample weights of the least-squares polynomial fit, from the
/// normal equations `(VᵀV) c = Vᵀ e_j` for each unit impulse `e_j`.
fn sg_normal_equations(window: usize, order: usize, derivative: usize) -> Vec<f64> {
    let m = (window / 2) as i64;
    let v: Vec<Vec<f64>> = (-m..=m).map(|x| (0..=order).map(|p| (x as f64).powi(p as i32)).collect()).collect();
    let vtv: Vec<Vec<f64>> = (0..=order)
        .map(|i| (0..=order).map(|j| v.iter().map(|row| row[i] * row[j]).sum()).collect())
        .collect();
    let fact: f64 = (1..=derivative).map(|k| k as f64).product();
    (0..window)
        .map(|j| {
            let rhs: Vec<f64> = (0..=order).map(|p| v[j][p]).collect();
            solve(vtv.clone(), rhs)[derivative] * fact
        })
        .collect()
}

#[test]
fn sg_5_2_smoothing_weights() {
    let k = sg_kernel(5, 2, 0).unwrap();
    let expected = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|x| x / 35.0);
    let oracle = sg_normal_equations(5, 2, 0);
    for j in 0..5 {
        assert!((k.weights[j] - expected[j]).abs() < 1e-12);
        assert!((oracle[j] - expected[j]).abs() < 1e-12);
    }
}

#[test]
fn sg_weights_match_normal_equations() {
    for window in [5, 7, 9, 13, 21] {
        for order in 2..=4.min(window - 1) {
            for d in 0..=2 {
                let k = sg_kernel(window, order, d).unwrap();
                let o = sg_normal_equations(window, order, d);
                for (a, b) in k.weights.iter().zip(&o) {
                    assert!((a - b).abs() < 1e-10, "w{window} o{order} d{d}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn sg_reproduces_polynomials() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (window, order) in [(5, 2), (13, 3), (21, 4)] {
        let k = sg_kernel(window, order, 0).unwrap();
        let d1 = sg_kernel(window, order, 1).unwrap();
        for deg in 0..=order {
            let c: Vec<f64> = (0..=deg).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = |x: f64| c.iter().enumerate().map(|(i, a)| a * (x / 10.0).powi(i as i32)).sum::<f64>();
            let dp = |x: f64| c.iter().enumerate().skip(1).map(|(i, a)| a * i as f64 * (x / 10.0).powi(i as i32 - 1) / 10.0).sum::<f64>();
            let xs: Vec<Option<f64>> = (0..60).map(|t| Some(p(t as f64))).collect();
            let smooth = k.apply(&xs);
            let slope = d1.apply(&xs);
            for t in window / 2..60 - window / 2 {
                assert!((smooth[t].unwrap() - p(t as f64)).abs() < 1e-9);
                assert!((slope[t].unwrap() - dp(t as f64)).abs() < 1e-9);
            }
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_cell(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> LstmCellParams {
    let mut p = LstmCellParams::zeros(input, hidden);
    for t in p.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = random_tensor(rng, &shape, 0.8);
    }
    p
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn mv(w: &Tensor, x: &[f64], j: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..x.len() {
        s += w.get(j, k) * x[k];
    }
    s
}

/// The cell equations written out one unit at a time.
fn naive_step(p: &LstmCellParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>, [Vec<f64>; 4]) {
    let n = h.len();
    let (mut f, mut i, mut ct, mut o, mut c2, mut h2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for j in 0..n {
        f[j] = sig(mv(&p.w_xf, x, j) + p.b_xf.data()[j] + mv(&p.w_hf, h, j) + p.b_hf.data()[j]);
        i[j] = sig(mv(&p.w_xi, x, j) + p.b_xi.data()[j] + mv(&p.w_hi, h, j) + p.b_hi.data()[j]);
        ct[j] = (mv(&p.w_xc, x, j) + p.b_xc.data()[j] + mv(&p.w_hc, h, j) + p.b_hc.data()[j]).tanh();
        c2[j] = f[j] * c[j] + i[j] * ct[j];
        o[j] = sig(mv(&p.w_xo, x, j) + p.b_xo.data()[j] + mv(&p.w_ho, h, j) + p.b_ho.data()[j]);
        h2[j] = o[j] * c2[j].tanh();
    }
    (h2, c2, [f, i, ct, o])
}

#[test]
fn lstm_step_matches_naive_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let input = rng.random_range(1..7);
        let hidden = rng.random_range(1..9);
        let p = random_cell(&mut rng, input, hidden);
        let x: Vec<f64> = (0..input).map(|_| rng.random_range(-2.0..2.0)).collect();
        let prev = LstmState {
            h: (0..hidden).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..hidden).map(|_| rng.random_range(-2.0..2.0)).collect(),
        };
        let (s, g) = lstm_step_traced(&p, &x, &prev).unwrap();
        let (h, c, [f, i, ct, o]) = naive_step(&p, &x, &prev.h, &prev.c);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(a, b)| (a - b).abs() <= 1e-12);
        assert!(close(&s.h, &h) && close(&s.c, &c), "case {case}");
        assert!(close(&g.f, &f) && close(&g.i, &i) && close(&g.c_tilde, &ct) && close(&g.o, &o), "case {case}");
    }
}

#[test]
fn zero_weight_cell() {
    let p = LstmCellParams::zeros(3, 5);
    let (s, g) = lstm_step_traced(&p, &[0.3, -1.0, 2.0], &LstmState::zeros(5)).unwrap();
    assert!(g.f.iter().chain(&g.i).chain(&g.o).all(|&v| v == 0.5));
    assert!(s.h.iter().all(|&v| v == 0.0));
}

#[test]
fn bilstm_matches_two_naive_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (input, hidden, steps) = (3, 4, 9);
    let fwd = random_cell(&mut rng, input, hidden);
    let bwd = random_cell(&mut rng, input, hidden);
    let xs: Vec<Vec<f64>> = (0..steps).map(|_| (0..input).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let out = bilstm_forward(&fwd, &bwd, &xs).unwrap();

    let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
    for t in 0..steps {
        (h, c, _) = naive_step(&fwd, &xs[t], &h, &c);
        for j in 0..hidden {
            assert!((out[t][j] - h[j]).abs() < 1e-12);
        }
    }
    let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
    for t in (0..steps).rev() {
        (h, c, _) = naive_step(&bwd, &xs[t], &h, &c);
        for j in 0..hidden {
            assert!((out[t][hidden + j] - h[j]).abs() < 1e-12);
        }
    }

    // swapping the cells and reversing time mirrors the halves
    let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let mirrored = bilstm_forward(&bwd, &fwd, &rev).unwrap();
    for t in 0..steps {
        let a = &out[t];
        let b = &mirrored[steps - 1 - t];
        for j in 0..hidden {
            assert!((a[j] - b[hidden + j]).abs() < 1e-12);
            assert!((a[hidden + j] - b[j]).abs() < 1e-12);
        }
    }
}

fn tiny_dims() -> ModelDims {
    ModelDims { embed_dim: 4, hidden_dim: 8, ..ModelDims::default() }
}

fn tiny_sample(rng: &mut ChaCha8Rng, steps: usize, doy: u32) -> WindowSample {
    let values: Vec<Option<f64>> =
        (0..steps).map(|t| if t == 4 { None } else { Some(rng.random_range(0.05..0.55)) }).collect();
    let labels: Vec<bool> = (0..steps).map(|t| t % 5 == 2).collect();
    WindowSample {
        site_id: "s".into(),
        depth_cm: 30,
        date: NaiveDate::from_yo_opt(2021, doy).unwrap(),
        day_of_year: doy,
        missing_mask: values.iter().map(|v| v.is_none()).collect(),
        values,
        labels: Some(labels),
        weight: 1.0,
        reading_index: (0..steps).map(Some).collect(),
    }
}

#[test]
fn tiny_model_forward_matches_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = ModelParams::init(tiny_dims(), 17);
    let s = tiny_sample(&mut rng, 12, 200);
    let got = forward(&p, &s.input()).unwrap();

    let two_pi = 2.0 * std::f64::consts::PI;
    let ctx = [0.30, (two_pi * 200.0 / 366.0).sin(), (two_pi * 200.0 / 366.0).cos()];
    let ec = p.embed_context.apply(&ctx).unwrap();
    let xs: Vec<Vec<f64>> = s
        .values
        .iter()
        .map(|v| {
            let feat = match v {
                Some(v) => [v / 0.6, 0.0],
                None => [0.0, 1.0],
            };
            let ev = p.embed_value.apply(&feat).unwrap();
            ev.iter().zip(&ec).map(|(a, b)| a + b).collect()
        })
        .collect();
    let hs = bilstm_forward(&p.fwd, &p.bwd, &xs).unwrap();
    for (t, h) in hs.iter().enumerate() {
        let z = p.head.apply(h).unwrap()[0];
        assert!((got[t] - sig(z)).abs() < 1e-12, "step {t}");
    }
}

#[test]
fn tiny_model_gradients_match_finite_differences() {
    const STEP: f64 = 1e-5;
    const REL_TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = ModelParams::init(tiny_dims(), 3);
    let samples = [tiny_sample(&mut rng, 12, 40), tiny_sample(&mut rng, 12, 300)];
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let cfg = TrainConfig::default();
    let weights = [cfg.anomaly_day_weight, 1.0];

    let (_, grads) = batch_loss(&p, &refs, &weights, true).unwrap();
    let grads = grads.unwrap();
    let names = ModelParams::names();
    let mut worst: f64 = 0.0;
    for ti in 0..grads.len() {
        for k in 0..grads[ti].len() {
            let orig = p.tensors()[ti].data()[k];
            p.tensors_mut()[ti].data_mut()[k] = orig + STEP;
            let up = batch_loss(&p, &refs, &weights, false).unwrap().0;
            p.tensors_mut()[ti].data_mut()[k] = orig - STEP;
            let down = batch_loss(&p, &refs, &weights, false).unwrap().0;
            p.tensors_mut()[ti].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads[ti].data()[k];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < REL_TOL, "{}[{k}]: analytic {analytic} numeric {numeric}", names[ti]);
            worst = worst.max(rel);
        }
    }
    assert!(worst < REL_TOL);
}

#[test]
fn flagit_summary_percentages() {
    let m = ConfusionMatrix::new(816_764, 35_363, 20_047, 20_272);
    let (tn, fp, fn_, tp) = (816_764.0, 35_363.0, 20_047.0, 20_272.0);
    let pct = |a: f64, b: f64| 100.0 * a / b;
    let expected = [
        (m.correct_class_pct(), pct(tn, tn + fp)),
        (m.correct_misflagged_pct(), pct(fp, tn + fp)),
        (m.anomaly_class_pct(), pct(tp, tp + fn_)),
        (m.anomaly_missed_pct(), pct(fn_, tp + fn_)),
        (m.overall_pct(), pct(tn + tp, tn + fp + fn_ + tp)),
        (m.overall_error_pct(), pct(fp + fn_, tn + fp + fn_ + tp)),
    ];
    for (got, want) in expected {
        assert!((got.unwrap() - want).abs() < 1e-9);
    }
    let published = [95.85, 4.15, 50.28, 49.72, 93.79, 6.21];
    for ((got, _), p) in expected.iter().zip(published) {
        assert!((got.unwrap() - p).abs() <= 0.01, "{got:?} vs {p}");
    }
}
