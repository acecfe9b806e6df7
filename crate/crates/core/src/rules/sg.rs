//! Savitzky–Golay convolution weights.
//!
//! Weights are built from Gram (discrete orthogonal) polynomials on the
//! symmetric window `-m..=m`, which avoids forming and inverting the normal
//! equations of the polynomial fit.

use super::RuleError;

/// Convolution weights for one derivative order, evaluated at the window
/// center. `weights[j]` multiplies the sample at offset `j - half`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgKernel {
    pub window: usize,
    pub order: usize,
    pub derivative: usize,
    pub weights: Vec<f64>,
}

/// Generalized factorial `a (a-1) ... (a-b+1)`.
fn gen_fact(a: i64, b: i64) -> f64 {
    ((a - b + 1)..=a).fold(1.0, |acc, j| acc * j as f64)
}

/// `s`-th derivative of the Gram polynomial of degree `k` over `2m+1`
/// points, evaluated at `i`.
fn gram(i: f64, m: i64, k: i64, s: i64) -> f64 {
    if k > 0 {
        let kf = k as f64;
        let mf = m as f64;
        let a = (4.0 * kf - 2.0) / (kf * (2.0 * mf - kf + 1.0));
        let b = ((kf - 1.0) * (2.0 * mf + kf)) / (kf * (2.0 * mf - kf + 1.0));
        let deriv_term = if s > 0 { s as f64 * gram(i, m, k - 1, s - 1) } else { 0.0 };
        a * (i * gram(i, m, k - 1, s) + deriv_term) - b * gram(i, m, k - 2, s)
    } else if k == 0 && s == 0 {
        1.0
    } else {
        0.0
    }
}

/// Least-squares polynomial convolution weights for the center sample of an
/// odd `window`, fitting degree `order` and returning derivative
/// `derivative` (0, 1 or 2) per unit sample spacing.
pub fn sg_kernel(window: usize, order: usize, derivative: usize) -> Result<SgKernel, RuleError> {
    if window % 2 == 0 || window <= order || derivative > order || derivative > 2 {
        return Err(RuleError::BadSgParams { window, order, derivative });
    }
    let m = (window / 2) as i64;
    let n = order as i64;
    let s = derivative as i64;
    let weights = (-m..=m)
        .map(|i| {
            (0..=n)
                .map(|k| {
                    (2 * k + 1) as f64 * gen_fact(2 * m, k) / gen_fact(2 * m + k + 1, k + 1)
                        * gram(i as f64, m, k, 0)
                        * gram(0.0, m, k, s)
                })
                .sum()
        })
        .collect();
    Ok(SgKernel { window, order, derivative, weights })
}

impl SgKernel {
    pub fn half(&self) -> usize {
        self.window / 2
    }

    /// Convolve at every index whose full window is present. Positions near
    /// the edges or whose window touches a missing sample yield `None`.
    pub fn apply(&self, values: &[Option<f64>]) -> Vec<Option<f64>> {
        let h = self.half();
        let n = values.len();
        let mut out = vec![None; n];
        if n < self.window {
            return out;
        }
        // count of missing samples in the current window
        let mut missing = values[..self.window].iter().filter(|v| v.is_none()).count();
        for t in h..n - h {
            if t > h {
                if values[t - h - 1].is_none() {
                    missing -= 1;
                }
                if values[t + h].is_none() {
                    missing += 1;
                }
            }
            if missing == 0 {
                let acc = self
                    .weights
                    .iter()
                    .zip(&values[t - h..=t + h])
                    .map(|(w, v)| w * v.unwrap())
                    .sum();
                out[t] = Some(acc);
            }
        }
        out
    }
}

/// Smoothing, first- and second-derivative kernels for one window/order.
#[derive(Debug, Clone)]
pub struct SgFilter {
    pub smooth: SgKernel,
    pub d1: SgKernel,
    pub d2: SgKernel,
}

impl SgFilter {
    pub fn new(window: usize, order: usize) -> Result<Self, RuleError> {
        if order < 2 {
            return Err(RuleError::BadSgParams { window, order, derivative: 2 });
        }
        Ok(SgFilter {
            smooth: sg_kernel(window, order, 0)?,
            d1: sg_kernel(window, order, 1)?,
            d2: sg_kernel(window, order, 2)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(sg_kernel(4, 2, 0).is_err());
        assert!(sg_kernel(5, 5, 0).is_err());
        assert!(sg_kernel(5, 1, 2).is_err());
    }

    #[test]
    fn weight_sums() {
        for (w, o) in [(5, 2), (7, 3), (13, 3), (21, 4)] {
            let s = sg_kernel(w, o, 0).unwrap();
            let d1 = sg_kernel(w, o, 1).unwrap();
            let d2 = sg_kernel(w, o, 2).unwrap();
            assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d1.weights.iter().sum::<f64>().abs() < 1e-12);
            assert!(d2.weights.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn missing_values_blank_the_window() {
        let k = sg_kernel(5, 2, 0).unwrap();
        let mut v: Vec<Option<f64>> = (0..12).map(|i| Some(i as f64)).collect();
        v[6] = None;
        let out = k.apply(&v);
        assert!(out[0].is_none() && out[1].is_none());
        assert!(out[2].is_some() && out[3].is_some());
        for t in 4..=8 {
            assert!(out[t].is_none(), "t={t}");
        }
        assert!(out[9].is_some());
        assert!(out[10].is_none());
    }
}
