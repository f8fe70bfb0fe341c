//! Numerical building blocks: adaptive Dormand-Prince integration,
//! Gauss-Hermite quadrature and Richardson-extrapolated finite differences.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// State vector space for the integrator.
pub trait OdeState: Clone {
    /// `self += a * x`
    fn add_scaled(&mut self, a: f64, x: &Self);
    fn scale(&mut self, a: f64);
    /// RMS of `err_i / (atol + rtol * max(|y0_i|, |y1_i|))`.
    fn error_norm(err: &Self, y0: &Self, y1: &Self, atol: f64, rtol: f64) -> f64;
}

impl OdeState for DMatrix<f64> {
    fn add_scaled(&mut self, a: f64, x: &Self) {
        self.zip_apply(x, |s, v| *s += a * v);
    }

    fn scale(&mut self, a: f64) {
        *self *= a;
    }

    fn error_norm(err: &Self, y0: &Self, y1: &Self, atol: f64, rtol: f64) -> f64 {
        let mut acc = 0.0;
        for ((e, a), b) in err.iter().zip(y0.iter()).zip(y1.iter()) {
            let sc = atol + rtol * a.abs().max(b.abs());
            acc += (e / sc).powi(2);
        }
        (acc / err.len().max(1) as f64).sqrt()
    }
}

impl OdeState for DMatrix<Complex64> {
    fn add_scaled(&mut self, a: f64, x: &Self) {
        self.zip_apply(x, |s, v| *s += v * a);
    }

    fn scale(&mut self, a: f64) {
        *self *= Complex64::new(a, 0.0);
    }

    fn error_norm(err: &Self, y0: &Self, y1: &Self, atol: f64, rtol: f64) -> f64 {
        let mut acc = 0.0;
        for ((e, a), b) in err.iter().zip(y0.iter()).zip(y1.iter()) {
            let sc = atol + rtol * a.norm().max(b.norm());
            acc += (e.norm() / sc).powi(2);
        }
        (acc / err.len().max(1) as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub atol: f64,
    pub rtol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            atol: 1e-10,
            rtol: 1e-8,
        }
    }
}

impl Tolerance {
    pub fn tight() -> Self {
        Self {
            atol: 1e-13,
            rtol: 1e-11,
        }
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrate `y' = f(t, y)` from `t0` through each entry of `times` (which
/// must be monotone in the direction of integration), returning the state at
/// every requested time. Negative directions are allowed.
pub fn integrate<S, F>(mut f: F, y0: S, t0: f64, times: &[f64], tol: Tolerance) -> Result<Vec<S>>
where
    S: OdeState,
    F: FnMut(f64, &S) -> S,
{
    let mut out = Vec::with_capacity(times.len());
    let mut t = t0;
    let mut y = y0;
    let span = times.iter().map(|x| (x - t0).abs()).fold(0.0, f64::max);
    let mut h = if span > 0.0 { span * 1e-3 } else { 0.0 };
    let mut k1 = f(t, &y);
    for &target in times {
        let dir = (target - t).signum();
        while (target - t).abs() > 1e-15 * (1.0 + t.abs()) {
            h = h.abs().min((target - t).abs()).max(1e-14 * (1.0 + t.abs())) * dir;
            let mut ks: Vec<S> = Vec::with_capacity(7);
            ks.push(k1.clone());
            for s in 1..7 {
                let mut ys = y.clone();
                for (j, kj) in ks.iter().enumerate() {
                    if A[s][j] != 0.0 {
                        OdeState::add_scaled(&mut ys, h * A[s][j], kj);
                    }
                }
                ks.push(f(t + C[s] * h, &ys));
            }
            // stage 7 is evaluated at the fifth-order solution (FSAL)
            let mut y_new = y.clone();
            for (j, kj) in ks.iter().take(6).enumerate() {
                if A[6][j] != 0.0 {
                    OdeState::add_scaled(&mut y_new, h * A[6][j], kj);
                }
            }
            let mut err = ks[0].clone();
            OdeState::scale(&mut err, h * E[0]);
            for (j, kj) in ks.iter().enumerate().skip(1) {
                if E[j] != 0.0 {
                    OdeState::add_scaled(&mut err, h * E[j], kj);
                }
            }
            let ratio = S::error_norm(&err, &y, &y_new, tol.atol, tol.rtol);
            if !ratio.is_finite() {
                return Err(Error::Integrator(format!(
                    "non-finite error estimate at t = {t}"
                )));
            }
            if ratio <= 1.0 {
                t += h;
                y = y_new;
                k1 = ks.pop().unwrap();
                let grow = if ratio == 0.0 {
                    5.0
                } else {
                    (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0)
                };
                h *= grow;
            } else {
                h *= (0.9 * ratio.powf(-0.25)).clamp(0.1, 0.9);
                if h.abs() < 1e-14 * (1.0 + t.abs()) {
                    return Err(Error::Integrator(format!("step size underflow at t = {t}")));
                }
            }
        }
        t = target;
        out.push(y.clone());
    }
    Ok(out)
}

/// Nodes and weights for expectations over a standard normal variable:
/// `E[g(Z)] ~ sum_i w_i g(z_i)`. Golub-Welsch on the Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    // probabilists' Hermite polynomials: beta_k = sqrt(k)
    let jac = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Derivative estimate with an error indicator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Derivative {
    pub value: f64,
    pub error: f64,
}

fn stencil_derivatives(f: &dyn Fn(f64) -> f64, m_max: usize, half: usize, h: f64) -> Vec<f64> {
    let n = 2 * half + 1;
    let nodes: Vec<f64> = (0..n).map(|k| k as f64 - half as f64).collect();
    let vals = DVector::from_iterator(n, nodes.iter().map(|&x| f(x * h)));
    let v = DMatrix::from_fn(n, n, |i, j| nodes[i].powi(j as i32));
    let coeffs = v.lu().solve(&vals).expect("Vandermonde on distinct nodes");
    (0..=m_max)
        .map(|m| coeffs[m] * factorial(m as u32) / h.powi(m as i32))
        .collect()
}

/// Central-difference derivatives of `f` at 0 for orders `0..=m_max`, from
/// symmetric interpolation stencils at steps `step` and `step / 2` combined by
/// one Richardson extrapolation. `f` must accept negative arguments.
pub fn central_derivatives(f: &dyn Fn(f64) -> f64, m_max: usize, step: f64) -> Vec<Derivative> {
    let half = m_max / 2 + 2;
    let coarse = stencil_derivatives(f, m_max, half, step);
    let fine = stencil_derivatives(f, m_max, half, step / 2.0);
    (0..=m_max)
        .map(|m| {
            let p = 2 * ((2 * half + 2 - m) / 2);
            let factor = 2f64.powi(p as i32) - 1.0;
            let value = fine[m] + (fine[m] - coarse[m]) / factor;
            Derivative {
                value,
                error: (fine[m] - coarse[m]).abs() / factor,
            }
        })
        .collect()
}

pub fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

pub fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k)
        .map(|i| f64::from(n - i) / f64::from(i + 1))
        .product()
}

/// `(2k - 1)!!` with the convention `(-1)!! = 1`.
pub fn double_factorial_odd(k: u32) -> f64 {
    (1..=k).map(|i| f64::from(2 * i - 1)).product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn integrates_exponential_both_directions() {
        let y0 = DMatrix::from_element(1, 1, 1.0);
        let ys = integrate(
            |_, y: &DMatrix<f64>| y * -0.7,
            y0.clone(),
            0.0,
            &[0.5, 1.0, 2.0],
            Tolerance::tight(),
        )
        .unwrap();
        assert_relative_eq!(ys[2][(0, 0)], (-1.4f64).exp(), max_relative = 1e-10);
        let back = integrate(
            |_, y: &DMatrix<f64>| y * -0.7,
            y0,
            0.0,
            &[-1.0],
            Tolerance::tight(),
        )
        .unwrap();
        assert_relative_eq!(back[0][(0, 0)], 0.7f64.exp(), max_relative = 1e-10);
    }

    #[test]
    fn rotation_preserves_norm() {
        let gen = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let y0 = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let ys = integrate(
            |_, y: &DMatrix<f64>| &gen * y,
            y0,
            0.0,
            &[3.0],
            Tolerance::tight(),
        )
        .unwrap();
        assert_relative_eq!(ys[0][(0, 0)], 3f64.cos(), epsilon = 1e-9);
    }

    #[test]
    fn hermite_moments() {
        let (x, w) = gauss_hermite(12);
        let moment = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert_relative_eq!(moment(0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(moment(2), 1.0, epsilon = 1e-12);
        assert_relative_eq!(moment(4), 3.0, epsilon = 1e-11);
        assert_relative_eq!(moment(6), 15.0, epsilon = 1e-10);
        assert!(moment(3).abs() < 1e-12);
    }

    #[test]
    fn central_differences_on_polynomial_and_exp() {
        let d = central_derivatives(&|t| t * t, 3, 0.1);
        assert!(d[1].value.abs() < 1e-9);
        assert_relative_eq!(d[2].value, 2.0, epsilon = 1e-8);
        assert!(d[3].value.abs() < 1e-6);
        let e = central_derivatives(&|t: f64| (0.8 * t).exp(), 4, 0.05);
        for (m, x) in e.iter().enumerate() {
            assert_relative_eq!(x.value, 0.8f64.powi(m as i32), max_relative = 1e-7);
        }
    }

    #[test]
    fn combinatorics() {
        assert_eq!(factorial(5), 120.0);
        assert_eq!(binomial(6, 2), 15.0);
        assert_eq!(double_factorial_odd(0), 1.0);
        assert_eq!(double_factorial_odd(3), 15.0);
    }
}
