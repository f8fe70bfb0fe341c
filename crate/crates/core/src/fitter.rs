//! Polynomial regression of time traces and derivative readout at `t = 0`.
//!
//! Fits are least squares in a Chebyshev basis on the sampled interval,
//! re-expressed in monomials of physical time. Every derivative estimate is
//! a fixed linear functional of the sampled means; its weights are kept so
//! that shot-noise variances can be propagated exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{double_factorial_odd, factorial};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    #[default]
    Uniform,
    Chebyshev,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Robust {
    #[default]
    None,
    /// Median over shot batches of the per-time means before fitting.
    MedianOfMeans { batches: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub degree: usize,
    #[serde(default)]
    pub robust: Robust,
}

impl FitConfig {
    pub fn new(degree: usize) -> Self {
        Self {
            degree,
            robust: Robust::None,
        }
    }
}

/// `n` evenly spaced times on `[t_min, t_max]`.
pub fn uniform_grid(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![t_min];
    }
    (0..n)
        .map(|k| t_min + (t_max - t_min) * k as f64 / (n - 1) as f64)
        .collect()
}

/// `n` Chebyshev nodes on `[t_min, t_max]`, ascending.
pub fn chebyshev_grid(t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    let mid = 0.5 * (t_min + t_max);
    let half = 0.5 * (t_max - t_min);
    let mut v: Vec<f64> = (0..n)
        .map(|k| mid - half * (std::f64::consts::PI * (2 * k + 1) as f64 / (2 * n) as f64).cos())
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn grid(kind: GridKind, t_min: f64, t_max: f64, n: usize) -> Vec<f64> {
    match kind {
        GridKind::Uniform => uniform_grid(t_min, t_max, n),
        GridKind::Chebyshev => chebyshev_grid(t_min, t_max, n),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub degree: usize,
    /// Monomial coefficients in physical time, ascending.
    pub coefficients: Vec<f64>,
    /// `p^{(m)}(0)` for `m = 0..=degree`.
    pub derivative_at_zero: Vec<f64>,
    /// Propagation factor from a per-point precision to the error of each
    /// derivative: `3 d^{2m} / (2m-1)!!`, converted to physical time units.
    pub error_scale: Vec<f64>,
    /// Weights `w` with `derivative_at_zero[m] = sum_i w[m][i] y_i`.
    pub derivative_weights: Vec<Vec<f64>>,
    pub residual_rms: f64,
}

impl PolyFit {
    pub fn derivative(&self, m: usize) -> f64 {
        self.derivative_at_zero.get(m).copied().unwrap_or(0.0)
    }

    /// Standard error of the `m`-th derivative for independent per-point
    /// standard deviations `sd`.
    pub fn derivative_sd(&self, m: usize, sd: &[f64]) -> f64 {
        match self.derivative_weights.get(m) {
            Some(w) => w
                .iter()
                .zip(sd)
                .map(|(w, s)| (w * s).powi(2))
                .sum::<f64>()
                .sqrt(),
            None => 0.0,
        }
    }

    /// Fit of `q(u) = p(c u)`: derivatives pick up `c^m`.
    pub fn time_scaled(&self, c: f64) -> PolyFit {
        let scale = |m: usize| c.powi(m as i32);
        PolyFit {
            degree: self.degree,
            coefficients: self
                .coefficients
                .iter()
                .enumerate()
                .map(|(m, x)| x * scale(m))
                .collect(),
            derivative_at_zero: self
                .derivative_at_zero
                .iter()
                .enumerate()
                .map(|(m, x)| x * scale(m))
                .collect(),
            error_scale: self
                .error_scale
                .iter()
                .enumerate()
                .map(|(m, x)| x * scale(m).abs())
                .collect(),
            derivative_weights: self
                .derivative_weights
                .iter()
                .enumerate()
                .map(|(m, w)| w.iter().map(|x| x * scale(m)).collect())
                .collect(),
            residual_rms: self.residual_rms,
        }
    }
}

fn chebyshev_row(x: f64, d: usize) -> Vec<f64> {
    let mut row = vec![1.0; d + 1];
    if d >= 1 {
        row[1] = x;
    }
    for k in 2..=d {
        row[k] = 2.0 * x * row[k - 1] - row[k - 2];
    }
    row
}

/// Monomial coefficients (ascending, in `x`) of the Chebyshev polynomials `T_0..T_d`.
fn chebyshev_monomials(d: usize) -> Vec<Vec<f64>> {
    let mut t = vec![vec![0.0; d + 1]; d + 1];
    t[0][0] = 1.0;
    if d >= 1 {
        t[1][1] = 1.0;
    }
    for k in 2..=d {
        for j in 0..=d {
            let shifted = if j >= 1 { 2.0 * t[k - 1][j - 1] } else { 0.0 };
            t[k][j] = shifted - t[k - 2][j];
        }
    }
    t
}

/// Coefficients in `t` of `sum_j c_j x^j` with `x = alpha t + beta`.
fn affine_substitute(c: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    let d = c.len();
    let mut out = vec![0.0; d];
    for (j, cj) in c.iter().enumerate() {
        // (alpha t + beta)^j
        for k in 0..=j {
            out[k] += cj
                * crate::numerics::binomial(j as u32, k as u32)
                * alpha.powi(k as i32)
                * beta.powi((j - k) as i32);
        }
    }
    out
}

/// Least-squares polynomial fit of `(times, values)`.
pub fn fit_points(times: &[f64], values: &[f64], degree: usize) -> Result<PolyFit> {
    let n = times.len();
    if n != values.len() {
        return Err(Error::Domain("times and values differ in length".into()));
    }
    let mut distinct: Vec<f64> = times.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < degree + 1 {
        return Err(Error::RankDeficient(format!(
            "{} distinct times cannot determine a degree-{degree} polynomial",
            distinct.len()
        )));
    }
    let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
    let alpha = 2.0 / (hi - lo);
    let beta = -(hi + lo) / (hi - lo);
    let v = DMatrix::from_fn(n, degree + 1, |i, j| {
        chebyshev_row(alpha * times[i] + beta, degree)[j]
    });
    // pseudo-inverse rows give the weights of every Chebyshev coefficient
    let svd = v.clone().svd(true, true);
    let pinv = svd
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let tmono = chebyshev_monomials(degree);
    // monomial-in-t coefficient k = sum_j M[k][j] * chebyshev coefficient j
    let mut m = DMatrix::zeros(degree + 1, degree + 1);
    for j in 0..=degree {
        let in_t = affine_substitute(&tmono[j], alpha, beta);
        for k in 0..=degree {
            m[(k, j)] = in_t[k];
        }
    }
    let weights = &m * &pinv;
    let y = DVector::from_column_slice(values);
    let coeffs = &weights * &y;
    let fitted = &v * (&pinv * &y);
    let residual_rms = ((&fitted - &y).norm_squared() / n as f64).sqrt();
    let span = hi - lo;
    let coefficients: Vec<f64> = coeffs.iter().copied().collect();
    let derivative_at_zero = (0..=degree)
        .map(|k| factorial(k as u32) * coefficients[k])
        .collect();
    let derivative_weights = (0..=degree)
        .map(|k| {
            weights
                .row(k)
                .iter()
                .map(|w| w * factorial(k as u32))
                .collect()
        })
        .collect();
    let d = degree.max(1) as f64;
    let error_scale = (0..=degree)
        .map(|k| {
            3.0 * d.powi(2 * k as i32) / double_factorial_odd(k as u32)
                * (2.0 / span).powi(k as i32)
        })
        .collect();
    Ok(PolyFit {
        degree,
        coefficients,
        derivative_at_zero,
        error_scale,
        derivative_weights,
        residual_rms,
    })
}

/// Median of per-batch means at each time (`batch_means[i]` holds the batch
/// means of time `i`).
pub fn median_of_means(batch_means: &[Vec<f64>]) -> Vec<f64> {
    batch_means
        .iter()
        .map(|b| {
            let mut v = b.clone();
            v.sort_by(f64::total_cmp);
            let k = v.len();
            if k == 0 {
                f64::NAN
            } else if k % 2 == 1 {
                v[k / 2]
            } else {
                0.5 * (v[k / 2 - 1] + v[k / 2])
            }
        })
        .collect()
}

/// Fit a sampled trace, optionally through the median of its batch means.
pub fn fit(trace: &crate::sampler::TimeTrace, config: &FitConfig) -> Result<PolyFit> {
    match config.robust {
        Robust::None => fit_points(&trace.times, &trace.means, config.degree),
        Robust::MedianOfMeans { .. } => {
            if trace.batch_means.is_empty() {
                return fit_points(&trace.times, &trace.means, config.degree);
            }
            fit_points(
                &trace.times,
                &median_of_means(&trace.batch_means),
                config.degree,
            )
        }
    }
}

/// Per-point precision needed for the `M`-th derivative to reach `eps_target`:
/// `eps_target (2M-1)!! / (3 d^{2M})`.
pub fn derivative_error_budget(degree: usize, eps_target: f64, m: u32) -> Result<f64> {
    if (m as usize) > degree {
        return Err(Error::Domain(format!(
            "derivative order {m} exceeds degree {degree}"
        )));
    }
    Ok(eps_target * double_factorial_odd(m) / (3.0 * (degree as f64).powi(2 * m as i32)))
}

/// Per-derivative error levels `eps_{S,m} = eps_S 3 d^{2m} / (2m-1)!!` for
/// `m = 0..=M`, given the per-point precision `eps_s`.
pub fn propagated_errors(degree: usize, eps_s: f64, m_max: u32) -> Vec<f64> {
    (0..=m_max)
        .map(|m| eps_s * 3.0 * (degree as f64).powi(2 * m as i32) / double_factorial_odd(m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exact_on_cubic() {
        let ts = uniform_grid(1e-3, 0.1, 10);
        let ys: Vec<f64> = ts.iter().map(|t| 1.0 - 3.0 * t + 2.0 * t.powi(3)).collect();
        let f = fit_points(&ts, &ys, 3).unwrap();
        let want = [1.0, -3.0, 0.0, 12.0];
        for (m, w) in want.iter().enumerate() {
            assert!(
                (f.derivative(m) - w).abs() < 1e-8 * (1.0 + w.abs()),
                "m={m}: {}",
                f.derivative(m)
            );
        }
        for (c, w) in f.coefficients.iter().zip([1.0, -3.0, 0.0, 2.0]) {
            assert!((c - w).abs() < 1e-10 * 10f64.powi(3));
        }
    }

    #[test]
    fn quadratic_second_derivative() {
        let ts = uniform_grid(0.0, 1.0, 5);
        let ys: Vec<f64> = ts.iter().map(|t| t * t).collect();
        let f = fit_points(&ts, &ys, 2).unwrap();
        assert!(f.derivative(1).abs() < 1e-12);
        assert_relative_eq!(f.derivative(2), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficiency() {
        assert!(matches!(
            fit_points(&[0.1, 0.1, 0.2], &[1.0, 1.0, 2.0], 2),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn budget_examples() {
        assert_relative_eq!(derivative_error_budget(1, 0.3, 0).unwrap(), 0.1);
        assert_relative_eq!(derivative_error_budget(3, 1.0, 1).unwrap(), 1.0 / 27.0);
        let a = derivative_error_budget(3, 1.0, 2).unwrap();
        let b = derivative_error_budget(6, 1.0, 2).unwrap();
        assert_relative_eq!(a / b, 16.0);
        let e = propagated_errors(3, 1e-3, 3);
        assert!(e.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn grids_agree_on_polynomials() {
        let p = |t: f64| 0.3 - 1.2 * t + 4.0 * t * t - 7.0 * t.powi(3);
        let fits: Vec<PolyFit> = [GridKind::Uniform, GridKind::Chebyshev]
            .into_iter()
            .map(|g| {
                let ts = grid(g, 1e-3, 0.1, 10);
                let ys: Vec<f64> = ts.iter().map(|&t| p(t)).collect();
                fit_points(&ts, &ys, 3).unwrap()
            })
            .collect();
        for m in 0..=3 {
            assert!(
                (fits[0].derivative(m) - fits[1].derivative(m)).abs()
                    < 1e-9 * (1.0 + fits[0].derivative(m).abs())
            );
        }
    }

    #[test]
    fn rescaling_matches_direct_fit() {
        let c = 0.05;
        let us = uniform_grid(0.02, 2.02, 9);
        let ts: Vec<f64> = us.iter().map(|u| c * u).collect();
        let ys: Vec<f64> = ts.iter().map(|t: &f64| (3.0 * t).cos() + t).collect();
        let direct = fit_points(&us, &ys, 4).unwrap();
        let scaled = fit_points(&ts, &ys, 4).unwrap().time_scaled(c);
        for m in 0..=4 {
            assert!(
                (direct.derivative(m) - scaled.derivative(m)).abs()
                    < 1e-9 * (1.0 + direct.derivative(m).abs())
            );
        }
    }

    #[test]
    fn noisy_derivatives_within_propagated_bound() {
        use rand::{Rng, SeedableRng};
        let d = 3usize;
        let a = 1.0 / (d * d) as f64;
        let us = chebyshev_grid(a, 2.0 + a, 4 * (d + 1));
        let p = |u: f64| 0.2 + 0.5 * u - 0.3 * u * u + 0.1 * u.powi(3);
        let exact = [0.2, 0.5, -0.6, 0.6];
        let eps = 1e-3;
        let mut ok = 0;
        for seed in 0..100u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = us
                .iter()
                .map(|&u| p(u) + eps * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            let f = fit_points(&us, &ys, d).unwrap();
            let within = (0..=d).all(|m| {
                let bound =
                    3.0 * eps * (d as f64).powi(2 * m as i32 + 1) / double_factorial_odd(m as u32);
                (f.derivative(m) - exact[m]).abs() <= bound
            });
            ok += usize::from(within);
        }
        assert!(ok >= 95, "{ok}/100 within bound");
    }

    #[test]
    fn weights_reproduce_derivatives() {
        let ts = chebyshev_grid(0.01, 0.2, 8);
        let ys: Vec<f64> = ts.iter().map(|t: &f64| (2.0 * t).sin()).collect();
        let f = fit_points(&ts, &ys, 4).unwrap();
        for m in 0..=4 {
            let lin: f64 = f.derivative_weights[m]
                .iter()
                .zip(&ys)
                .map(|(w, y)| w * y)
                .sum();
            assert_relative_eq!(lin, f.derivative(m), epsilon = 1e-9 * (1.0 + lin.abs()));
        }
    }
}
