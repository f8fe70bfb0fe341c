//! Free-fermion backend: Majorana covariance dynamics for a quadratic chain
//! bilinearly coupled to lossy bath fermions.
//!
//! Majorana indices: system `x_i = 2i`, `y_i = 2i + 1`; bath `x_j = 2n + 2j`,
//! `y_j = 2n + 2j + 1`. The covariance `G_ab = Tr(i c_a c_b rho)` obeys
//! `dG/dt = X G + G X^T + Y` with drift `X = h - D` (loss `D = gamma/2` on
//! both Majoranas of a bath mode) and pump `Y = gamma G_vac` on the bath.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoupledMajorana, FermionChainSpec};
use crate::numerics::{integrate, Tolerance};

pub fn x_index(i: usize) -> usize {
    2 * i
}

pub fn y_index(i: usize) -> usize {
    2 * i + 1
}

/// Majorana of system site `i` that couples to the bath.
pub fn coupled_index(spec: &FermionChainSpec, i: usize) -> usize {
    match spec.coupled {
        CoupledMajorana::First => x_index(i),
        CoupledMajorana::Second => y_index(i),
    }
}

/// Majorana generator `h` (`H = (i/4) sum h_ab c_a c_b`) of system plus bath.
pub fn hamiltonian_generator(spec: &FermionChainSpec) -> DMatrix<f64> {
    let n = spec.n;
    let mut h = DMatrix::zeros(4 * n, 4 * n);
    let mut add = |a: usize, b: usize, v: f64| {
        h[(a, b)] += v;
        h[(b, a)] -= v;
    };
    for i in 0..n {
        add(x_index(i), y_index(i), -2.0 * spec.field);
    }
    for i in 0..n.saturating_sub(1) {
        add(y_index(i), x_index(i + 1), -2.0 * spec.hopping);
    }
    for i in 0..n {
        for j in 0..n {
            if spec.v[i][j] != 0.0 {
                add(
                    coupled_index(spec, i),
                    2 * n + x_index(j),
                    -2.0 * spec.v[i][j],
                );
            }
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MajoranaModel {
    pub n_system: usize,
    pub generator: DMatrix<f64>,
    pub drift: DMatrix<f64>,
    pub pump: DMatrix<f64>,
    pub vacuum: DMatrix<f64>,
}

pub fn build_majorana_model(spec: &FermionChainSpec) -> Result<MajoranaModel> {
    spec.validate()?;
    let n = spec.n;
    let generator = hamiltonian_generator(spec);
    let mut loss = DMatrix::zeros(4 * n, 4 * n);
    let mut vacuum = DMatrix::zeros(4 * n, 4 * n);
    for j in 0..n {
        let (bx, by) = (2 * n + x_index(j), 2 * n + y_index(j));
        loss[(bx, bx)] = spec.gamma[j] / 2.0;
        loss[(by, by)] = spec.gamma[j] / 2.0;
        vacuum[(bx, by)] = 1.0;
        vacuum[(by, bx)] = -1.0;
    }
    let drift = &generator - &loss;
    let pump = -(&drift * &vacuum + &vacuum * drift.transpose());
    // the pump only acts on lossy bath modes; the Hamiltonian part of the
    // expression above vanishes on the vacuum of a decoupled bath
    let pump = DMatrix::from_fn(4 * n, 4 * n, |a, b| {
        if a >= 2 * n && b >= 2 * n {
            pump[(a, b)]
        } else {
            0.0
        }
    });
    Ok(MajoranaModel {
        n_system: n,
        generator,
        drift,
        pump,
        vacuum,
    })
}

/// Uniform chain with nearest-neighbour antisymmetric couplings.
pub fn chain_model(
    hopping: f64,
    field: f64,
    v: f64,
    gamma: f64,
    n: usize,
) -> Result<MajoranaModel> {
    build_majorana_model(&FermionChainSpec::chain(n, hopping, field, v, gamma))
}

impl MajoranaModel {
    pub fn n_majoranas(&self) -> usize {
        4 * self.n_system
    }

    fn check(&self, idx: &[usize]) -> Result<()> {
        match idx.iter().find(|&&k| k >= self.n_majoranas()) {
            Some(k) => Err(Error::Domain(format!("Majorana index {k} out of range"))),
            None => Ok(()),
        }
    }

    /// Covariance at each of `times` (ascending) from `gamma0`.
    pub fn evolve_covariance(
        &self,
        gamma0: &DMatrix<f64>,
        times: &[f64],
        tol: Tolerance,
    ) -> Result<Vec<DMatrix<f64>>> {
        let rhs = |_, g: &DMatrix<f64>| &self.drift * g + g * self.drift.transpose() + &self.pump;
        let out = integrate(rhs, gamma0.clone(), 0.0, times, tol)?;
        Ok(out
            .into_iter()
            .map(|g| (&g - g.transpose()) * 0.5)
            .collect())
    }

    /// Initial covariance of `(1 + i c_c c_d) / 2^n (x) vacuum`, or of the
    /// state with the opposite sign when `sign < 0`.
    pub fn initial_covariance(&self, c: usize, d: usize, sign: f64) -> DMatrix<f64> {
        let mut g = self.vacuum.clone();
        g[(c, d)] = sign;
        g[(d, c)] = -sign;
        g
    }

    /// `O_{a,b,c,d}(tau) = Tr(i c_a c_b rho_{c,d}(tau))` at evolution times `tau`.
    pub fn observable_trace(
        &self,
        a: usize,
        b: usize,
        c: usize,
        d: usize,
        times: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(&[a, b, c, d])?;
        if a == b || c == d {
            return Err(Error::Domain(
                "observable and initial pair need distinct Majoranas".into(),
            ));
        }
        let g0 = self.initial_covariance(c, d, 1.0);
        Ok(self
            .evolve_covariance(&g0, times, Tolerance::tight())?
            .iter()
            .map(|g| g[(a, b)])
            .collect())
    }

    /// Linear part `(O_+ - O_-) / 2`, the response to `i c_c c_d` alone.
    pub fn linear_trace(
        &self,
        a: usize,
        b: usize,
        c: usize,
        d: usize,
        times: &[f64],
    ) -> Result<Vec<f64>> {
        let plus = self.observable_trace(a, b, c, d, times)?;
        let g0 = self.initial_covariance(c, d, -1.0);
        let minus = self.evolve_covariance(&g0, times, Tolerance::tight())?;
        Ok(plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| (p - m[(a, b)]) / 2.0)
            .collect())
    }

    /// Single-particle propagator `exp(X tau)`.
    pub fn propagator(&self, tau: f64) -> DMatrix<f64> {
        (&self.drift * tau).exp()
    }

    /// Linear part through the propagator: `R_ac R_bd - R_ad R_bc`.
    pub fn linear_trace_closed_form(
        &self,
        a: usize,
        b: usize,
        c: usize,
        d: usize,
        tau: f64,
    ) -> f64 {
        let r = self.propagator(tau);
        r[(a, c)] * r[(b, d)] - r[(a, d)] * r[(b, c)]
    }

    /// Bath self-energy `h_SB exp(X_B tau) h_BS` on the system Majoranas.
    pub fn self_energy(&self, tau: f64) -> DMatrix<f64> {
        let s = 2 * self.n_system;
        let h_sb = self.generator.view((0, s), (s, s)).into_owned();
        let h_bs = self.generator.view((s, 0), (s, s)).into_owned();
        let x_b = self.drift.view((s, s), (s, s)).into_owned();
        h_sb * (x_b * tau).exp() * h_bs
    }
}

/// Index quadruples `(a, b, c, d)` of the traces used for the kernel between
/// the coupled Majoranas of sites `i` and `j`. `l` and `k` are auxiliary
/// Majorana indices distinct from the targets.
pub fn kernel_trace_set(
    spec: &FermionChainSpec,
    i: usize,
    j: usize,
    l: usize,
    k: usize,
) -> Vec<(usize, usize, usize, usize)> {
    let ci = coupled_index(spec, i);
    let cj = coupled_index(spec, j);
    if i != j {
        vec![(ci, l, cj, l)]
    } else {
        vec![(ci, l, ci, l), (l, k, l, k), (k, ci, k, ci)]
    }
}
