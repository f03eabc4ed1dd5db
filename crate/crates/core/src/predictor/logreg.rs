//! Weighted L2-regularized logistic regression.
//!
//! Objective over parameters `(w, b)`:
//! `L = sum_i s_i * (softplus(z_i) - y_i * z_i) + lambda/2 * |w|^2`, with
//! `z_i = w . x_i + b` and per-sample weights `s_i`. The bias is not
//! regularized. Minimized by damped Newton steps with Armijo backtracking,
//! falling back to the steepest-descent direction when the Hessian is not
//! positive definite.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub lambda: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lambda: 1.0,
            tolerance: 1e-6,
            max_iterations: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Objective before the first step and after every accepted step.
    pub objective_trace: Vec<f64>,
}

/// Borrowed training problem; rows of `x` share one length.
pub struct Problem<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [bool],
    pub sample_weights: &'a [f64],
    pub lambda: f64,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    fn margin(row: &[f64], w: &[f64], b: f64) -> f64 {
        row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b
    }

    pub fn objective(&self, w: &[f64], b: f64) -> f64 {
        let mut total = 0.0;
        for ((row, &y), &s) in self.x.iter().zip(self.y).zip(self.sample_weights) {
            let z = Self::margin(row, w, b);
            total += s * (softplus(z) - if y { z } else { 0.0 });
        }
        total + 0.5 * self.lambda * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Gradient with respect to `w` and `b`.
    pub fn gradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let mut gw: Vec<f64> = w.iter().map(|v| self.lambda * v).collect();
        let mut gb = 0.0;
        for ((row, &y), &s) in self.x.iter().zip(self.y).zip(self.sample_weights) {
            let r = s * (sigmoid(Self::margin(row, w, b)) - f64::from(u8::from(y)));
            for (g, a) in gw.iter_mut().zip(row) {
                *g += r * a;
            }
            gb += r;
        }
        (gw, gb)
    }

    fn hessian(&self, w: &[f64], b: f64) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
        let mut ext = vec![1.0; d + 1];
        for (row, &s) in self.x.iter().zip(self.sample_weights) {
            let p = sigmoid(Self::margin(row, w, b));
            let c = s * p * (1.0 - p);
            if c == 0.0 {
                continue;
            }
            ext[..d].copy_from_slice(row);
            for i in 0..=d {
                let ci = c * ext[i];
                for j in i..=d {
                    h[(i, j)] += ci * ext[j];
                }
            }
        }
        for i in 0..=d {
            for j in 0..i {
                h[(i, j)] = h[(j, i)];
            }
        }
        for i in 0..d {
            h[(i, i)] += self.lambda;
        }
        h
    }

    pub fn fit(&self, opts: &FitOptions) -> Fit {
        let d = self.dim();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut obj = self.objective(&w, b);
        let mut trace = vec![obj];
        let mut iterations = 0;
        let norm = |gw: &[f64], gb: f64| (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        let (mut gw, mut gb) = self.gradient(&w, b);
        while norm(&gw, gb) > opts.tolerance && iterations < opts.max_iterations {
            let g = DVector::from_iterator(d + 1, gw.iter().copied().chain([gb]));
            let newton = self.hessian(&w, b).cholesky().map(|c| -c.solve(&g));
            let mut accepted = false;
            for dir in newton.into_iter().chain([-g.clone()]) {
                let slope = g.dot(&dir);
                if slope >= 0.0 {
                    continue;
                }
                let mut t = 1.0;
                for _ in 0..MAX_HALVINGS {
                    let w2: Vec<f64> = w.iter().zip(dir.iter()).map(|(a, s)| a + t * s).collect();
                    let b2 = b + t * dir[d];
                    let o2 = self.objective(&w2, b2);
                    // Near the optimum the objective change drops below
                    // rounding noise; then a shrinking gradient decides.
                    let unresolved = (o2 - obj).abs() <= 64.0 * f64::EPSILON * obj.abs().max(1.0);
                    let accept = o2 <= obj + ARMIJO_C * t * slope
                        || (unresolved && {
                            let (g2w, g2b) = self.gradient(&w2, b2);
                            norm(&g2w, g2b) < norm(&gw, gb)
                        });
                    if accept {
                        w = w2;
                        b = b2;
                        obj = o2;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if accepted {
                    break;
                }
            }
            if !accepted {
                // No representable decrease left in either direction.
                break;
            }
            iterations += 1;
            trace.push(obj);
            (gw, gb) = self.gradient(&w, b);
        }
        let gradient_norm = norm(&gw, gb);
        Fit {
            weights: w,
            bias: b,
            iterations,
            gradient_norm,
            converged: gradient_norm <= opts.tolerance,
            objective_trace: trace,
        }
    }
}

/// Balanced class weights `N / (2 N_c)` as `(negative, positive)`.
pub fn balanced_weights(y: &[bool]) -> Option<(f64, f64)> {
    let n = y.len() as f64;
    let pos = y.iter().filter(|&&v| v).count() as f64;
    let neg = n - pos;
    (pos > 0.0 && neg > 0.0).then(|| (n / (2.0 * neg), n / (2.0 * pos)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn problem<'a>(x: &'a [Vec<f64>], y: &'a [bool], s: &'a [f64], lambda: f64) -> Problem<'a> {
        Problem { x, y, sample_weights: s, lambda }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut r = crate::rng::seeded(17);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let n = r.random_range(5..30);
            let d = r.random_range(1..5);
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
            let y: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            let s: Vec<f64> = (0..n).map(|_| r.random_range(0.5..2.0)).collect();
            let w: Vec<f64> = (0..d).map(|_| r.random_range(-1.5..1.5)).collect();
            let b = r.random_range(-1.0..1.0);
            let p = problem(&x, &y, &s, r.random_range(0.0..2.0));
            let (gw, gb) = p.gradient(&w, b);
            let h = 1e-5;
            let mut fd = Vec::new();
            for k in 0..d {
                let (mut a, mut c) = (w.clone(), w.clone());
                a[k] += h;
                c[k] -= h;
                fd.push((p.objective(&a, b) - p.objective(&c, b)) / (2.0 * h));
            }
            fd.push((p.objective(&w, b + h) - p.objective(&w, b - h)) / (2.0 * h));
            let an: Vec<f64> = gw.iter().copied().chain([gb]).collect();
            let diff = an.iter().zip(&fd).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
            let scale = an.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
            worst = worst.max(diff / scale);
        }
        assert!(worst <= 1e-5, "relative error {worst}");
    }

    #[test]
    fn separable_one_d() {
        let x: Vec<Vec<f64>> = vec![vec![-1.0], vec![-1.0], vec![1.0], vec![1.0]];
        let y = vec![false, false, true, true];
        let s = vec![1.0; 4];
        let fit = problem(&x, &y, &s, 1.0).fit(&FitOptions::default());
        assert!(fit.converged);
        assert!(fit.weights[0] > 0.0);
        for (row, &label) in x.iter().zip(&y) {
            assert_eq!(sigmoid(fit.weights[0] * row[0] + fit.bias) > 0.5, label);
        }
    }

    #[test]
    fn objective_never_increases() {
        let mut r = crate::rng::seeded(3);
        let x: Vec<Vec<f64>> = (0..300).map(|_| vec![r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]).collect();
        let y: Vec<bool> = x.iter().map(|v| r.random_bool(sigmoid(2.0 * v[0] - v[1]))).collect();
        let s = vec![1.0; 300];
        let fit = problem(&x, &y, &s, 0.1).fit(&FitOptions::default());
        assert!(fit.converged);
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn huge_lambda_shrinks_weights_not_bias() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![f64::from(i) / 10.0 - 2.0]).collect();
        let y: Vec<bool> = (0..40).map(|i| i % 4 != 0).collect();
        let s = vec![1.0; 40];
        let fit = problem(&x, &y, &s, 1e9).fit(&FitOptions::default());
        assert!(fit.weights[0].abs() < 1e-6);
        // base rate 0.75 recovered by the bias alone
        assert!((sigmoid(fit.bias) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn balanced_weights_values() {
        assert_eq!(balanced_weights(&[true, false, false, false]), Some((4.0 / 6.0, 2.0)));
        assert_eq!(balanced_weights(&[true, true]), None);
    }

    #[test]
    fn balanced_equals_replicated_minority() {
        let mut r = crate::rng::seeded(8);
        let n_maj = 240;
        let n_min = 60;
        let k = n_maj / n_min;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n_maj + n_min {
            let label = i >= n_maj;
            let c = if label { 0.7 } else { -0.3 };
            x.push(vec![c + r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
            y.push(label);
        }
        let (wn, wp) = balanced_weights(&y).unwrap();
        let s: Vec<f64> = y.iter().map(|&l| if l { wp } else { wn }).collect();
        let lambda = 1.0;
        let opts = FitOptions { tolerance: 1e-10, ..Default::default() };
        let bal = problem(&x, &y, &s, lambda).fit(&opts);

        let mut xr = Vec::new();
        let mut yr = Vec::new();
        for (row, &l) in x.iter().zip(&y) {
            for _ in 0..if l { k } else { 1 } {
                xr.push(row.clone());
                yr.push(l);
            }
        }
        let ones = vec![1.0; xr.len()];
        // Balanced loss = w_maj * replicated loss, so lambda scales by 1/w_maj.
        let rep = problem(&xr, &yr, &ones, lambda / wn).fit(&opts);
        for (a, b) in bal.weights.iter().zip(&rep.weights) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!((bal.bias - rep.bias).abs() < 1e-4);
    }
}
