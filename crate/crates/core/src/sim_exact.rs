//! Dense ground-truth simulators.
//!
//! * [`JointSystem`]: system qubits coupled to lossy bosonic pseudomodes,
//!   evolved under a Lindblad master equation. Implements the process
//!   `B(t) = Tr[P_O E_W(t)(P_I)] / 2^N` with `W` applied between two segments
//!   of length `t`.
//! * Ensemble members: closed evolution under a fixed draw of the Hamiltonian
//!   coefficients, either dense or through a Jordan-Wigner free-fermion map.
//! * [`fermion_chain_dense`]: the fermionic chain with explicit bath modes, as
//!   a cross-check for the Gaussian backend.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{FermionChainSpec, KernelMode, KernelSpec, NoiseModel};
use crate::numerics::{central_derivatives, gauss_hermite, integrate, Derivative, Tolerance};
use crate::pauli::{Axis, PauliString};
use crate::planner::{MeasurementSetting, WSpec};

type C = Complex64;

pub const DEFAULT_DIM_LIMIT: usize = 1 << 12;

fn c(re: f64) -> C {
    C::new(re, 0.0)
}

fn kron(a: &DMatrix<C>, b: &DMatrix<C>) -> DMatrix<C> {
    a.kronecker(b)
}

fn trace_product(a: &DMatrix<C>, b: &DMatrix<C>) -> C {
    // Tr(A B) without forming the product
    let mut acc = C::default();
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Lindblad generator `L(X) = -i[H, X] + sum_k L_k X L_k^dag - {L_k^dag L_k, X}/2`.
#[derive(Clone, Debug)]
pub struct Lindblad {
    h: DMatrix<C>,
    jumps: Vec<DMatrix<C>>,
    jumps_dag: Vec<DMatrix<C>>,
    // -iH - sum L^dag L / 2
    k: DMatrix<C>,
}

impl Lindblad {
    pub fn new(h: DMatrix<C>, jumps: Vec<DMatrix<C>>) -> Self {
        let dim = h.nrows();
        let mut k = &h * C::new(0.0, -1.0);
        let jumps_dag: Vec<DMatrix<C>> = jumps.iter().map(|l| l.adjoint()).collect();
        for (l, ld) in jumps.iter().zip(&jumps_dag) {
            k -= (ld * l) * c(0.5);
        }
        debug_assert_eq!(k.nrows(), dim);
        Self {
            h,
            jumps,
            jumps_dag,
            k,
        }
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn hamiltonian(&self) -> &DMatrix<C> {
        &self.h
    }

    pub fn apply(&self, x: &DMatrix<C>) -> DMatrix<C> {
        let mut out = &self.k * x + x * self.k.adjoint();
        for (l, ld) in self.jumps.iter().zip(&self.jumps_dag) {
            out += l * x * ld;
        }
        out
    }

    /// Heisenberg-picture generator, the Hilbert-Schmidt adjoint of [`apply`](Self::apply).
    pub fn apply_adjoint(&self, o: &DMatrix<C>) -> DMatrix<C> {
        let mut out = self.k.adjoint() * o + o * &self.k;
        for (l, ld) in self.jumps.iter().zip(&self.jumps_dag) {
            out += ld * o * l;
        }
        out
    }

    /// Evolve an operator to each of `times` (monotone, measured from 0).
    pub fn evolve(
        &self,
        x0: &DMatrix<C>,
        times: &[f64],
        tol: Tolerance,
    ) -> Result<Vec<DMatrix<C>>> {
        integrate(
            |_, x: &DMatrix<C>| self.apply(x),
            x0.clone(),
            0.0,
            times,
            tol,
        )
    }
}

fn annihilator(levels: usize) -> DMatrix<C> {
    DMatrix::from_fn(levels, levels, |r, col| {
        if col == r + 1 {
            c((col as f64).sqrt())
        } else {
            C::default()
        }
    })
}

/// Truncated bosonic pseudomodes reproducing exponential kernel modes.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudomodeEmbedding {
    pub levels: usize,
    pub dim_limit: usize,
}

impl Default for PseudomodeEmbedding {
    fn default() -> Self {
        Self {
            levels: 6,
            dim_limit: DEFAULT_DIM_LIMIT,
        }
    }
}

/// System plus pseudomode environment, ready to evolve.
#[derive(Clone, Debug)]
pub struct JointSystem {
    pub n_qubits: usize,
    pub env_dim: usize,
    pub lindblad: Lindblad,
    env_vacuum: DMatrix<C>,
    env_couplings: Vec<DMatrix<C>>,
    env_only: Lindblad,
    pub tol: Tolerance,
}

/// Dense matrix of `sum_a coeff_a P_a` on `n` qubits.
pub fn hamiltonian_matrix(terms: &[(PauliString, f64)], n: usize) -> DMatrix<C> {
    let dim = 1usize << n;
    let mut h = DMatrix::zeros(dim, dim);
    for (p, coeff) in terms {
        for col in 0..dim {
            let (row, amp) = p.apply_basis(col, n);
            h[(row, col)] += amp * *coeff;
        }
    }
    h
}

impl PseudomodeEmbedding {
    pub fn build(&self, model: &NoiseModel) -> Result<JointSystem> {
        let modes: Vec<KernelMode> = match &model.kernel {
            KernelSpec::Modes(m) => m.clone(),
            KernelSpec::Table(_) => {
                return Err(Error::InvalidModel(
                    "the dense simulator needs kernel modes, not a derivative table".into(),
                ))
            }
        };
        if self.levels < 2 {
            return Err(Error::Config("pseudomodes need at least 2 levels".into()));
        }
        let n = model.n_qubits;
        let env_dim = self
            .levels
            .checked_pow(modes.len() as u32)
            .unwrap_or(usize::MAX);
        let sys_dim = 1usize << n;
        let dim = sys_dim.saturating_mul(env_dim);
        if dim > self.dim_limit {
            return Err(Error::DimensionOverflow {
                dim,
                limit: self.dim_limit,
            });
        }
        let b1 = annihilator(self.levels);
        let id_l = DMatrix::<C>::identity(self.levels, self.levels);
        let mode_op = |l: usize, op: &DMatrix<C>| {
            let mut acc = DMatrix::<C>::identity(1, 1);
            for k in 0..modes.len() {
                acc = kron(&acc, if k == l { op } else { &id_l });
            }
            acc
        };
        let bs: Vec<DMatrix<C>> = (0..modes.len()).map(|l| mode_op(l, &b1)).collect();
        let id_env = DMatrix::<C>::identity(env_dim, env_dim);
        let id_sys = DMatrix::<C>::identity(sys_dim, sys_dim);

        let mut h_env = DMatrix::<C>::zeros(env_dim, env_dim);
        for (m, b) in modes.iter().zip(&bs) {
            h_env -= b.adjoint() * b * c(m.epsilon);
        }
        let env_couplings: Vec<DMatrix<C>> = (0..model.couplings.len())
            .map(|a| {
                let mut op = DMatrix::<C>::zeros(env_dim, env_dim);
                for (m, b) in modes.iter().zip(&bs) {
                    let v = m.coupling(a);
                    op += b * v.conj() + b.adjoint() * v;
                }
                op
            })
            .collect();
        let terms: Vec<(PauliString, f64)> = model
            .hamiltonian
            .iter()
            .map(|t| (t.pauli.clone(), t.coeff))
            .collect();
        let mut h = kron(&hamiltonian_matrix(&terms, n), &id_env) + kron(&id_sys, &h_env);
        for (term, env_op) in model.couplings.iter().zip(&env_couplings) {
            h += kron(&term.pauli.to_dense(n), env_op);
        }
        let jumps: Vec<DMatrix<C>> = modes
            .iter()
            .zip(&bs)
            .filter(|(m, _)| m.gamma > 0.0)
            .map(|(m, b)| kron(&id_sys, b) * c(m.gamma.sqrt()))
            .collect();
        let env_jumps: Vec<DMatrix<C>> = modes
            .iter()
            .zip(&bs)
            .filter(|(m, _)| m.gamma > 0.0)
            .map(|(m, b)| b * c(m.gamma.sqrt()))
            .collect();
        let mut env_vacuum = DMatrix::<C>::zeros(env_dim, env_dim);
        env_vacuum[(0, 0)] = c(1.0);
        Ok(JointSystem {
            n_qubits: n,
            env_dim,
            lindblad: Lindblad::new(h, jumps),
            env_vacuum,
            env_couplings,
            env_only: Lindblad::new(h_env, env_jumps),
            tol: Tolerance::tight(),
        })
    }
}

/// Inputs of one process trace: `Tr[P_O E_W(t)(P)] / 2^N` with `P` the
/// prepared operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelQuery {
    pub prepared: PauliString,
    pub observable: PauliString,
    pub w: WSpec,
}

impl ChannelQuery {
    pub fn from_setting(s: &MeasurementSetting) -> Self {
        Self {
            prepared: s.prepared_input(),
            observable: s.observable.clone(),
            w: s.w,
        }
    }
}

/// Sign `(-1)^{chi(w, I)}` that maps single-Pauli-gate traces onto
/// `Tr[P_O E_W(t)(W P_I W^dag)]`.
pub fn sign_correction(s: &MeasurementSetting) -> f64 {
    match s.w.pauli() {
        Some(w) if !w.commutes(&s.input_pauli) => -1.0,
        _ => 1.0,
    }
}

impl JointSystem {
    pub fn dim(&self) -> usize {
        self.lindblad.dim()
    }

    fn lift(&self, p: &DMatrix<C>) -> DMatrix<C> {
        kron(p, &DMatrix::identity(self.env_dim, self.env_dim))
    }

    fn initial(&self, prepared: &PauliString) -> DMatrix<C> {
        let scale = 1.0 / (1u64 << self.n_qubits) as f64;
        kron(
            &(prepared.to_dense(self.n_qubits) * c(scale)),
            &self.env_vacuum,
        )
    }

    fn measure(&self, obs: &DMatrix<C>, x: &DMatrix<C>) -> C {
        trace_product(obs, x)
    }

    /// `B(t)` at each of `times` (ascending, or all non-positive descending).
    pub fn channel(&self, q: &ChannelQuery, times: &[f64]) -> Result<Vec<f64>> {
        let x0 = self.initial(&q.prepared);
        let obs = self.lift(&q.observable.to_dense(self.n_qubits));
        let vals: Vec<C> = if q.w.is_identity() {
            let doubled: Vec<f64> = times.iter().map(|t| 2.0 * t).collect();
            self.lindblad
                .evolve(&x0, &doubled, self.tol)?
                .iter()
                .map(|x| self.measure(&obs, x))
                .collect()
        } else {
            let w = self.lift(&q.w.to_dense(self.n_qubits));
            let wd = w.adjoint();
            let first = self.lindblad.evolve(&x0, times, self.tol)?;
            let mut out = Vec::with_capacity(times.len());
            for (x, &t) in first.iter().zip(times) {
                let y = &w * x * &wd;
                let z = self.lindblad.evolve(&y, &[t], self.tol)?.pop().unwrap();
                out.push(self.measure(&obs, &z));
            }
            out
        };
        vals.into_iter()
            .map(|v| {
                if v.im.abs() > 1e-8 || v.re.abs() > 1.0 + 1e-8 || !v.re.is_finite() {
                    Err(Error::OutOfRange {
                        what: format!("B({} -> {})", q.prepared, q.observable),
                        value: v.re,
                    })
                } else {
                    Ok(v.re.clamp(-1.0, 1.0))
                }
            })
            .collect()
    }

    /// Exact `d^m B / dt^m` at 0 for `m = 0..=m_max`, by powers of the
    /// generator: `sum_k C(m,k) Tr[O L^{m-k} W L^k X0]`.
    pub fn channel_derivatives(&self, q: &ChannelQuery, m_max: usize) -> Vec<f64> {
        let x0 = self.initial(&q.prepared);
        let obs = self.lift(&q.observable.to_dense(self.n_qubits));
        let w = self.lift(&q.w.to_dense(self.n_qubits));
        let wd = w.adjoint();
        // heisenberg powers of the observable
        let mut obs_pows = vec![obs];
        for j in 1..=m_max {
            let next = self.lindblad.apply_adjoint(&obs_pows[j - 1]);
            obs_pows.push(next);
        }
        let mut state_pows = vec![x0];
        for k in 1..=m_max {
            let next = self.lindblad.apply(&state_pows[k - 1]);
            state_pows.push(next);
        }
        let conj: Vec<DMatrix<C>> = state_pows.iter().map(|x| &w * x * &wd).collect();
        (0..=m_max)
            .map(|m| {
                (0..=m)
                    .map(|k| {
                        crate::numerics::binomial(m as u32, k as u32)
                            * trace_product(&obs_pows[m - k], &conj[k]).re
                    })
                    .sum()
            })
            .collect()
    }

    /// Richardson-extrapolated central differences of `B`, continuing the
    /// generator to negative times.
    pub fn finite_difference_derivatives(
        &self,
        q: &ChannelQuery,
        m_max: usize,
        step: f64,
    ) -> Result<Vec<Derivative>> {
        let err = std::cell::RefCell::new(None);
        let f = |t: f64| match self.channel_unchecked(q, t) {
            Ok(v) => v,
            Err(e) => {
                err.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        };
        let d = central_derivatives(&f, m_max, step);
        match err.into_inner() {
            Some(e) => Err(e),
            None => Ok(d),
        }
    }

    fn channel_unchecked(&self, q: &ChannelQuery, t: f64) -> Result<f64> {
        let x0 = self.initial(&q.prepared);
        let obs = self.lift(&q.observable.to_dense(self.n_qubits));
        let w = self.lift(&q.w.to_dense(self.n_qubits));
        let x = self.lindblad.evolve(&x0, &[t], self.tol)?.pop().unwrap();
        let y = &w * x * w.adjoint();
        let z = self.lindblad.evolve(&y, &[t], self.tol)?.pop().unwrap();
        Ok(self.measure(&obs, &z).re)
    }

    /// Joint state evolution from `rho_S (x) vacuum`.
    pub fn evolve_state(&self, rho_s: &DMatrix<C>, times: &[f64]) -> Result<Vec<DMatrix<C>>> {
        self.lindblad
            .evolve(&kron(rho_s, &self.env_vacuum), times, self.tol)
    }

    /// Environment correlation `Tr[A_a(t) A_b(0) gamma]` via the regression theorem.
    pub fn env_correlation(&self, a: usize, b: usize, times: &[f64]) -> Result<Vec<C>> {
        let x0 = &self.env_couplings[b] * &self.env_vacuum;
        let xs = self.env_only.evolve(&x0, times, self.tol)?;
        Ok(xs
            .iter()
            .map(|x| trace_product(&self.env_couplings[a], x))
            .collect())
    }

    /// Population of the highest retained level of every mode, maximised over
    /// `times`, starting from the maximally mixed system state.
    pub fn truncation_probe(&self, times: &[f64], levels: usize) -> Result<f64> {
        let sys_dim = 1usize << self.n_qubits;
        let rho_s = DMatrix::<C>::identity(sys_dim, sys_dim) * c(1.0 / sys_dim as f64);
        let states = self.evolve_state(&rho_s, times)?;
        let n_modes = (self.env_dim as f64).log(levels as f64).round() as usize;
        let mut worst: f64 = 0.0;
        for rho in &states {
            for e in 0..self.env_dim {
                let mut digits = e;
                let mut top = false;
                for _ in 0..n_modes {
                    if digits % levels == levels - 1 {
                        top = true;
                    }
                    digits /= levels;
                }
                if top {
                    let pop: f64 = (0..sys_dim)
                        .map(|s| rho[(s * self.env_dim + e, s * self.env_dim + e)].re)
                        .sum();
                    worst = worst.max(pop);
                }
            }
        }
        Ok(worst)
    }
}

/// Closed evolution for one draw of the Hamiltonian coefficients.
#[derive(Clone, Debug)]
pub struct DenseMember {
    n: usize,
    vecs: DMatrix<C>,
    energies: Vec<f64>,
}

impl DenseMember {
    pub fn new(model: &NoiseModel, coeffs: &[f64], dim_limit: usize) -> Result<Self> {
        let n = model.n_qubits;
        if (1usize << n) > dim_limit {
            return Err(Error::DimensionOverflow {
                dim: 1 << n,
                limit: dim_limit,
            });
        }
        let terms: Vec<(PauliString, f64)> = model
            .hamiltonian
            .iter()
            .zip(coeffs)
            .map(|(t, &x)| (t.pauli.clone(), x))
            .collect();
        let eig = SymmetricEigen::new(hamiltonian_matrix(&terms, n));
        Ok(Self {
            n,
            vecs: eig.eigenvectors,
            energies: eig.eigenvalues.iter().copied().collect(),
        })
    }

    /// `Tr[P_O U(2t) P_I U(2t)^dag] / 2^N`.
    pub fn trace(&self, input: &PauliString, observable: &PauliString, t: f64) -> f64 {
        let phases = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.energies.len(),
            self.energies
                .iter()
                .map(|e| C::from_polar(1.0, -2.0 * t * e)),
        ));
        let u = &self.vecs * phases * self.vecs.adjoint();
        let evolved = &u * input.to_dense(self.n) * u.adjoint();
        trace_product(&observable.to_dense(self.n), &evolved).re / (1u64 << self.n) as f64
    }
}

pub fn evolve_ensemble_member(
    model: &NoiseModel,
    draw: &[f64],
    input: &PauliString,
    observable: &PauliString,
    t: f64,
) -> Result<f64> {
    Ok(DenseMember::new(model, draw, DEFAULT_DIM_LIMIT)?.trace(input, observable, t))
}

/// Jordan-Wigner map of a qubit chain onto `2n` Majorana operators,
/// `g_{2i} = Z_0..Z_{i-1} X_i` and `g_{2i+1} = Z_0..Z_{i-1} Y_i`.
#[derive(Clone, Debug)]
pub struct JordanWigner {
    n: usize,
    majoranas: Vec<PauliString>,
}

impl JordanWigner {
    pub fn new(n: usize) -> Self {
        let mut majoranas = Vec::with_capacity(2 * n);
        for i in 0..n {
            for axis in [Axis::X, Axis::Y] {
                let sites = (0..i)
                    .map(|j| (j, Axis::Z))
                    .chain(std::iter::once((i, axis)));
                majoranas.push(PauliString::from_sites(sites));
            }
        }
        Self { n, majoranas }
    }

    pub fn n_majoranas(&self) -> usize {
        2 * self.n
    }

    pub fn majorana(&self, k: usize) -> &PauliString {
        &self.majoranas[k]
    }

    /// Write `p = phase * g_{k_1} ... g_{k_r}` with ascending `k`.
    pub fn monomial(&self, p: &PauliString) -> (C, Vec<usize>) {
        let mut set = Vec::new();
        let mut above = 0usize;
        for i in (0..self.n).rev() {
            let local = p.axis_at(i);
            // content of the Majorana pair at site i once the strings of
            // higher Majoranas (an odd count contributes a Z) are removed
            let needs = match (local, above % 2 == 1) {
                (None, false) | (Some(Axis::Z), true) => (false, false),
                (Some(Axis::X), false) | (Some(Axis::Y), true) => (true, false),
                (Some(Axis::Y), false) | (Some(Axis::X), true) => (false, true),
                (Some(Axis::Z), false) | (None, true) => (true, true),
            };
            if needs.1 {
                set.push(2 * i + 1);
                above += 1;
            }
            if needs.0 {
                set.push(2 * i);
                above += 1;
            }
        }
        set.reverse();
        let mut prod = PauliString::identity();
        for &k in &set {
            prod = prod.multiply(&self.majoranas[k]);
        }
        debug_assert_eq!(prod.unphased(), p.unphased());
        // p = phase * prod  =>  phase = p_phase / prod_phase
        let phase = p.phase() / prod.phase();
        (phase, set)
    }

    /// Majorana generator `h` with `H = (i/4) sum h_kl g_k g_l` for a
    /// Hamiltonian made of quadratic monomials.
    pub fn generator(&self, terms: &[(PauliString, f64)]) -> Result<DMatrix<f64>> {
        let m = self.n_majoranas();
        let mut h = DMatrix::zeros(m, m);
        for (p, coeff) in terms {
            let (phase, set) = self.monomial(p);
            if set.len() != 2 {
                return Err(Error::InvalidModel(format!(
                    "{p} is not quadratic under the Jordan-Wigner map"
                )));
            }
            // coeff * phase * g_p g_q = (i/2) h_pq g_p g_q
            let hpq = phase * C::new(0.0, -2.0) * *coeff;
            if hpq.im.abs() > 1e-12 {
                return Err(Error::InvalidModel(format!("{p} is not Hermitian")));
            }
            h[(set[0], set[1])] += hpq.re;
            h[(set[1], set[0])] -= hpq.re;
        }
        Ok(h)
    }

    /// `Tr[P_O U P_I U^dag] / 2^N` where `U g_k U^dag = sum_l R_lk g_l`.
    pub fn trace(&self, r: &DMatrix<f64>, input: &PauliString, observable: &PauliString) -> f64 {
        let (phi_i, a) = self.monomial(input);
        let (phi_o, b) = self.monomial(observable);
        if a.len() != b.len() {
            return 0.0;
        }
        let p = a.len();
        let sub = DMatrix::from_fn(p, p, |i, j| r[(b[i], a[j])]);
        let sign = if (p * p.saturating_sub(1) / 2) % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        let det = if p == 0 { 1.0 } else { sub.determinant() };
        (phi_o * phi_i * sign * det).re
    }
}

/// Gauss-Hermite expectation over the ensemble's Gaussian coefficients.
#[derive(Clone, Debug)]
pub struct EnsembleQuadrature {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl EnsembleQuadrature {
    /// Tensor grid with `per_dim` nodes along each direction of non-zero
    /// variance; refuses more than 3 such directions.
    pub fn new(model: &NoiseModel, per_dim: usize) -> Result<Self> {
        let ens = model
            .ensemble
            .as_ref()
            .ok_or_else(|| Error::InvalidModel("model has no ensemble section".into()))?;
        let factor = ens.factor()?;
        let cols: Vec<usize> = (0..factor.ncols())
            .filter(|&j| factor.column(j).norm() > 1e-12)
            .collect();
        if cols.len() > 3 {
            return Err(Error::Config(format!(
                "quadrature over {} random directions is not supported",
                cols.len()
            )));
        }
        let (x, w) = gauss_hermite(per_dim);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let total = per_dim.pow(cols.len() as u32);
        for idx in 0..total {
            let mut rem = idx;
            let mut lam = ens.means.clone();
            let mut weight = 1.0;
            for &j in &cols {
                let k = rem % per_dim;
                rem /= per_dim;
                weight *= w[k];
                for (a, l) in lam.iter_mut().enumerate() {
                    *l += factor[(a, j)] * x[k];
                }
            }
            nodes.push(lam);
            weights.push(weight);
        }
        Ok(Self { nodes, weights })
    }

    pub fn average(&self, f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
        use rayon::prelude::*;
        self.nodes
            .par_iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(x))
            .sum()
    }
}

/// Ensemble-averaged traces `E_Lambda B_Lambda(t)` using the free-fermion
/// map when every Hamiltonian term is quadratic, dense evolution otherwise.
pub fn ensemble_traces(
    model: &NoiseModel,
    quad: &EnsembleQuadrature,
    input: &PauliString,
    observable: &PauliString,
    times: &[f64],
) -> Result<Vec<f64>> {
    let jw = JordanWigner::new(model.n_qubits);
    let quadratic = model
        .hamiltonian
        .iter()
        .all(|t| jw.monomial(&t.pauli).1.len() == 2);
    if quadratic {
        let eval = |lam: &[f64], t: f64| -> f64 {
            let terms: Vec<(PauliString, f64)> = model
                .hamiltonian
                .iter()
                .zip(lam)
                .map(|(term, &x)| (term.pauli.clone(), x))
                .collect();
            let h = jw.generator(&terms).expect("checked quadratic");
            let r = (h * (2.0 * t)).exp();
            jw.trace(&r, input, observable)
        };
        Ok(times
            .iter()
            .map(|&t| quad.average(|lam| eval(lam, t)))
            .collect())
    } else {
        let members: Vec<DenseMember> = quad
            .nodes
            .iter()
            .map(|lam| DenseMember::new(model, lam, DEFAULT_DIM_LIMIT))
            .collect::<Result<_>>()?;
        Ok(times
            .iter()
            .map(|&t| {
                members
                    .iter()
                    .zip(&quad.weights)
                    .map(|(m, w)| w * m.trace(input, observable, t))
                    .sum()
            })
            .collect())
    }
}

/// Dense fermionic chain with explicit bath modes: Majoranas (as matrices),
/// the Lindblad generator, and the bath vacuum projector.
#[derive(Clone, Debug)]
pub struct FermionDense {
    pub majoranas: Vec<DMatrix<C>>,
    pub lindblad: Lindblad,
    pub bath_vacuum: DMatrix<C>,
    pub n_system: usize,
}

/// Build the fermionic chain on `n` system and `n` bath modes via a
/// Jordan-Wigner map of all `2n` modes (system first).
pub fn fermion_chain_dense(spec: &FermionChainSpec, dim_limit: usize) -> Result<FermionDense> {
    let n = spec.n;
    let modes = 2 * n;
    let dim = 1usize << modes;
    if dim > dim_limit {
        return Err(Error::DimensionOverflow {
            dim,
            limit: dim_limit,
        });
    }
    let jw = JordanWigner::new(modes);
    let majoranas: Vec<DMatrix<C>> = (0..2 * modes)
        .map(|k| jw.majorana(k).to_dense(modes))
        .collect();
    let h = crate::sim_gaussian::hamiltonian_generator(spec);
    let mut ham = DMatrix::<C>::zeros(dim, dim);
    for a in 0..2 * modes {
        for b in 0..2 * modes {
            if h[(a, b)] != 0.0 {
                ham += &majoranas[a] * &majoranas[b] * C::new(0.0, 0.25 * h[(a, b)]);
            }
        }
    }
    let annihilators: Vec<DMatrix<C>> = (0..modes)
        .map(|k| (&majoranas[2 * k] - &majoranas[2 * k + 1] * C::new(0.0, 1.0)) * c(0.5))
        .collect();
    let jumps: Vec<DMatrix<C>> = (0..n)
        .filter(|&j| spec.gamma[j] > 0.0)
        .map(|j| &annihilators[n + j] * c(spec.gamma[j].sqrt()))
        .collect();
    let mut bath_vacuum = DMatrix::<C>::identity(dim, dim);
    for a in &annihilators[n..] {
        bath_vacuum = &bath_vacuum * (DMatrix::<C>::identity(dim, dim) - a.adjoint() * a);
    }
    Ok(FermionDense {
        majoranas,
        lindblad: Lindblad::new(ham, jumps),
        bath_vacuum,
        n_system: n,
    })
}

impl FermionDense {
    /// `Tr(i c_a c_b rho(t))` with `rho(0) = (1 + i c_c c_d) / 2^n (x) vacuum`.
    pub fn observable_trace(
        &self,
        a: usize,
        b: usize,
        cc: usize,
        d: usize,
        times: &[f64],
        tol: Tolerance,
    ) -> Result<Vec<f64>> {
        let dim = self.lindblad.dim();
        let norm = 1.0 / (1u64 << self.n_system) as f64;
        let sys = DMatrix::<C>::identity(dim, dim)
            + &self.majoranas[cc] * &self.majoranas[d] * C::new(0.0, 1.0);
        let rho0 = sys * &self.bath_vacuum * c(norm);
        let obs = &self.majoranas[a] * &self.majoranas[b] * C::new(0.0, 1.0);
        Ok(self
            .lindblad
            .evolve(&rho0, times, tol)?
            .iter()
            .map(|r| trace_product(&obs, r).re)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CouplingTerm, HamTerm, ModeCoupling};
    use approx::assert_relative_eq;

    fn p(s: &str) -> PauliString {
        s.parse().unwrap()
    }

    fn closed_qubit(lambda: f64) -> NoiseModel {
        NoiseModel {
            n_qubits: 1,
            hamiltonian: vec![HamTerm {
                pauli: p("Z0"),
                coeff: lambda,
            }],
            couplings: vec![],
            kernel: KernelSpec::Modes(vec![]),
            metadata: None,
            ensemble: None,
        }
    }

    fn one_mode(v: f64, eps: f64, gamma: f64) -> NoiseModel {
        NoiseModel {
            n_qubits: 1,
            hamiltonian: vec![HamTerm {
                pauli: p("Z0"),
                coeff: 0.3,
            }],
            couplings: vec![CouplingTerm { pauli: p("X0") }],
            kernel: KernelSpec::Modes(vec![KernelMode {
                couplings: vec![ModeCoupling {
                    term: 0,
                    re: v,
                    im: 0.0,
                }],
                epsilon: eps,
                gamma,
            }]),
            metadata: None,
            ensemble: None,
        }
    }

    #[test]
    fn time_zero_is_normalized_trace() {
        let sys = PseudomodeEmbedding::default()
            .build(&one_mode(1.0, 0.2, 0.9))
            .unwrap();
        let q = ChannelQuery {
            prepared: p("X0"),
            observable: p("X0"),
            w: WSpec::Identity,
        };
        assert_relative_eq!(sys.channel(&q, &[0.0]).unwrap()[0], 1.0, epsilon = 1e-12);
        let q = ChannelQuery {
            prepared: p("X0"),
            observable: p("Y0"),
            w: WSpec::Identity,
        };
        assert!(sys.channel(&q, &[0.0]).unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn closed_qubit_first_derivative() {
        let lambda = 0.8;
        let sys = PseudomodeEmbedding::default()
            .build(&closed_qubit(lambda))
            .unwrap();
        // observable i Z X = -Y; the trace uses the Hermitian half of 2i Z X
        let q = ChannelQuery {
            prepared: p("X0"),
            observable: p("Z0").multiply(&p("X0")).times_i(),
            w: WSpec::Identity,
        };
        let d = sys.channel_derivatives(&q, 2);
        assert_relative_eq!(2.0 * d[1], -8.0 * lambda, epsilon = 1e-12);
        let fd = sys.finite_difference_derivatives(&q, 2, 0.05).unwrap();
        assert_relative_eq!(2.0 * fd[1].value, -8.0 * lambda, epsilon = 1e-8);
    }

    #[test]
    fn decoupled_mode_keeps_trace_constant() {
        let mut m = one_mode(0.0, 0.4, 0.9);
        m.hamiltonian.clear();
        let sys = PseudomodeEmbedding::default().build(&m).unwrap();
        let q = ChannelQuery {
            prepared: p("X0"),
            observable: p("X0"),
            w: WSpec::Sh { site: 0 },
        };
        let vals = sys.channel(&q, &[0.0, 0.05, 0.1]).unwrap();
        // SH maps X to Z, so the trace is Tr(X Z)/2 = 0 at all times
        for v in vals {
            assert!(v.abs() < 1e-12);
        }
        let q = ChannelQuery {
            prepared: p("Z0"),
            observable: p("Z0"),
            w: WSpec::Identity,
        };
        for v in sys.channel(&q, &[0.05, 0.1]).unwrap() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn environment_correlation_matches_mode() {
        let (eps, gamma) = (0.7, 0.9);
        let sys = PseudomodeEmbedding::default()
            .build(&one_mode(1.0, eps, gamma))
            .unwrap();
        let times = [0.0, 0.1, 0.5, 1.0];
        let got = sys.env_correlation(0, 0, &times).unwrap();
        for (g, t) in got.iter().zip(times) {
            let want = (C::new(-gamma / 2.0, eps) * t).exp();
            assert!((g - want).norm() < 1e-8, "{g} vs {want}");
        }
    }

    #[test]
    fn trace_preserved_and_truncation_small() {
        let sys = PseudomodeEmbedding::default()
            .build(&one_mode(1.0, 0.2, 0.9))
            .unwrap();
        let rho = DMatrix::<C>::identity(2, 2) * c(0.5);
        for r in sys.evolve_state(&rho, &[0.05, 0.1, 0.2]).unwrap() {
            assert!((r.trace() - c(1.0)).norm() < 1e-8);
        }
        assert!(sys.truncation_probe(&[0.1, 0.2], 6).unwrap() < 1e-8);
    }

    #[test]
    fn exact_derivatives_match_finite_differences() {
        let sys = PseudomodeEmbedding::default()
            .build(&one_mode(1.0, 0.2, 0.9))
            .unwrap();
        let q = ChannelQuery {
            prepared: p("Y0"),
            observable: p("Y0"),
            w: WSpec::Sh { site: 0 },
        };
        let exact = sys.channel_derivatives(&q, 4);
        let fd = sys.finite_difference_derivatives(&q, 4, 0.05).unwrap();
        for m in 0..=4 {
            assert!(
                (exact[m] - fd[m].value).abs() < 1e-6 * (1.0 + exact[m].abs()),
                "m={m}: {} vs {}",
                exact[m],
                fd[m].value
            );
        }
    }

    #[test]
    fn monomial_decoding() {
        let jw = JordanWigner::new(3);
        for s in [
            "Z0", "X0 X1", "Y1 Y2", "X0 Z1 X2", "Z0 Z1 Z2", "Y0", "X2", "Y0 X1",
        ] {
            let (phase, set) = jw.monomial(&p(s));
            let mut prod = PauliString::identity();
            for k in set {
                prod = prod.multiply(jw.majorana(k));
            }
            assert_eq!(prod.unphased(), p(s));
            assert!((prod.phase() * phase - c(1.0)).norm() < 1e-12, "{s}");
        }
    }

    #[test]
    fn free_fermion_matches_dense() {
        let model = crate::model::tfim(4, 0.3, 0.7);
        let coeffs = [-0.9, -0.6, -0.8, -0.5, -0.2, -0.35, -0.1];
        let jw = JordanWigner::new(4);
        let terms: Vec<(PauliString, f64)> = model
            .hamiltonian
            .iter()
            .zip(coeffs)
            .map(|(t, x)| (t.pauli.clone(), x))
            .collect();
        let h = jw.generator(&terms).unwrap();
        let dense = DenseMember::new(&model, &coeffs, DEFAULT_DIM_LIMIT).unwrap();
        let t = 0.37;
        let r = (&h * (2.0 * t)).exp();
        let strings = [
            "Z1", "X1 X2", "Y1 X2", "X0", "Y2 Y3", "Z0 Z1", "X1", "X0 Y1", "Y1 Z2",
        ];
        for i in strings {
            for o in strings {
                let want = dense.trace(&p(i), &p(o), t);
                let got = jw.trace(&r, &p(i), &p(o));
                assert!((want - got).abs() < 1e-10, "{i} -> {o}: {want} vs {got}");
            }
        }
    }

    #[test]
    fn gaussian_averaged_rabi_curve() {
        // H = Lambda Z, Lambda ~ N(0, s^2): E cos(4 Lambda t) = exp(-8 s^2 t^2)
        let s2 = 0.3;
        let mut model = closed_qubit(0.0);
        model.ensemble = Some(crate::model::EnsembleSpec {
            means: vec![0.0],
            covariance: vec![vec![s2]],
        });
        let quad = EnsembleQuadrature::new(&model, 30).unwrap();
        for t in [0.1, 0.3, 0.6] {
            let got = ensemble_traces(&model, &quad, &p("X0"), &p("X0"), &[t]).unwrap()[0];
            assert_relative_eq!(got, (-8.0 * s2 * t * t).exp(), epsilon = 1e-10);
        }
    }
}
