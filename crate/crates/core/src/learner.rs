//! Inversion pipeline: Hamiltonian coefficients from first derivatives, kernel
//! derivatives order by order from higher derivatives, then mode parameters or
//! ensemble covariances.
//!
//! Kernel orders are solved as one real-linear least-squares problem per order
//! over every planned xi coefficient. The linear forms come from the
//! second-order map `T` below, so the same code handles all gate variants and
//! both smooth and non-smooth kernels. The closed-form case formulas are kept
//! in [`kernel_from_xi`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::PolyFit;
use crate::model::KernelTable;
use crate::offsets::{offset_m, DysonModel, TraceQuery};
use crate::pauli::{PauliString, Region};
use crate::planner::{companion, setting_id, MeasurementSetting, Plan, Purpose, WSpec, XiTarget};
use crate::sampler::{provenance_line, TimeTrace};

type C = Complex64;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Value with a one-sigma error estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sd: f64,
}

impl Estimate {
    pub fn new(value: f64, sd: f64) -> Self {
        Self { value, sd }
    }
}

/// Derivative estimates of one measured trace with their standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub derivatives: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Observation {
    pub fn from_fit(fit: &PolyFit, trace: &TimeTrace) -> Self {
        let sd_points = trace.mean_sd();
        Self {
            derivatives: fit.derivative_at_zero.clone(),
            sd: (0..fit.derivative_at_zero.len())
                .map(|m| fit.derivative_sd(m, &sd_points))
                .collect(),
        }
    }

    /// Noise-free derivatives.
    pub fn exact(derivatives: Vec<f64>) -> Self {
        let n = derivatives.len();
        Self {
            derivatives,
            sd: vec![0.0; n],
        }
    }

    pub fn derivative(&self, m: u32) -> Result<f64> {
        self.derivatives.get(m as usize).copied().ok_or_else(|| {
            Error::MissingEstimate(format!("derivative of order {m} was not fitted"))
        })
    }

    fn sd(&self, m: u32) -> f64 {
        self.sd.get(m as usize).copied().unwrap_or(0.0)
    }
}

// ---------------------------------------------------------------- Hamiltonian

/// `lambda_a` from the first derivative of the canonical setting, whose
/// observable `i P_a P_I` is a unit-norm Pauli: `B'(0) = -4 lambda_a`.
pub fn lambda_from_derivative(first_derivative: f64) -> f64 {
    -first_derivative / 4.0
}

/// Hamiltonian coefficients, one per canonical setting in `plan.hamiltonian`.
pub fn recover_lambda(
    settings: &[MeasurementSetting],
    observations: &BTreeMap<u64, Observation>,
) -> Result<Vec<Estimate>> {
    settings
        .iter()
        .map(|s| {
            let obs = observations.get(&s.id).ok_or_else(|| {
                Error::IncompleteObservations(format!(
                    "no data for Hamiltonian setting {:?}",
                    s.purpose
                ))
            })?;
            Ok(Estimate::new(
                lambda_from_derivative(obs.derivative(1)?),
                obs.sd(1) / 4.0,
            ))
        })
        .collect()
}

// ---------------------------------------------------------------- T map

/// One term `coeff * kappa * left X right` of the order-`m` map, where `kappa`
/// is `K_{pair}^{(m-2)}(0)` or its conjugate.
#[derive(Clone, Debug, PartialEq)]
pub struct SandwichTerm {
    pub pair: (usize, usize),
    pub conjugate: bool,
    pub coeff: f64,
    pub left: PauliString,
    pub right: PauliString,
}

/// The kernel-linear part of the `m`-th derivative in the frame of the
/// setting's input: `T(X) = -sum_cd [G(c', d') + G(c, d) + (2^m - 2) G(c, d')]`
/// with `P' = W P W^dagger` and
/// `G(p, q)(X) = k pqX - k qXp + k* Xqp - k* pXq`, `k = K_cd^{(m-2)}`.
pub fn t_map_terms(couplings: &[PauliString], w: &WSpec, m: u32) -> Vec<SandwichTerm> {
    let mult = 2f64.powi(m as i32) - 2.0;
    let mut out = Vec::new();
    for (c, pc) in couplings.iter().enumerate() {
        let wc = w.conj(pc);
        for (d, pd) in couplings.iter().enumerate() {
            let wd = w.conj(pd);
            for (p, q, scale) in [(&wc, &wd, 1.0), (pc, pd, 1.0), (pc, &wd, mult)] {
                if scale == 0.0 {
                    continue;
                }
                let one = PauliString::identity();
                let pieces = [
                    (false, -scale, p.multiply(q), one.clone()),
                    (false, scale, q.clone(), p.clone()),
                    (true, -scale, one, q.multiply(p)),
                    (true, scale, p.clone(), q.clone()),
                ];
                for (conjugate, coeff, left, right) in pieces {
                    out.push(SandwichTerm {
                        pair: (c, d),
                        conjugate,
                        coeff,
                        left,
                        right,
                    });
                }
            }
        }
    }
    out
}

/// `Tr(obs T(input)) / 2^N` for a kernel table, from the sandwich terms.
pub fn t_map_trace(
    terms: &[SandwichTerm],
    kernel: &KernelTable,
    m: u32,
    input: &PauliString,
    obs: &PauliString,
) -> C {
    let mut acc = C::new(0.0, 0.0);
    for t in terms {
        let prod = obs.multiply(&t.left).multiply(input).multiply(&t.right);
        if !prod.is_identity() {
            continue;
        }
        let k = kernel.get(t.pair.0, t.pair.1, m - 2);
        let k = if t.conjugate { k.conj() } else { k };
        acc += k * t.coeff * prod.phase();
    }
    acc
}

/// `xi = sum alpha K_pq + beta conj(K_pq)` over pairs.
pub type LinearForm = BTreeMap<(usize, usize), (C, C)>;

/// Coefficient of `left (.) right` on `region` in the region-reduced map: a
/// global term `A X B` contributes when `A` and `B` agree outside the region.
pub fn xi_linear_form(
    terms: &[SandwichTerm],
    region: &Region,
    left: &PauliString,
    right: &PauliString,
) -> LinearForm {
    let mut form = LinearForm::new();
    let (left, right) = (left.unphased(), right.unphased());
    for t in terms {
        if t.left.restrict(region) != left || t.right.restrict(region) != right {
            continue;
        }
        if t.left.restrict_outside(region) != t.right.restrict_outside(region) {
            continue;
        }
        let c = t.coeff * t.left.phase() * t.right.phase();
        let e = form
            .entry(t.pair)
            .or_insert((C::new(0.0, 0.0), C::new(0.0, 0.0)));
        if t.conjugate {
            e.1 += c;
        } else {
            e.0 += c;
        }
    }
    form.retain(|_, (a, b)| a.norm() > 1e-12 || b.norm() > 1e-12);
    form
}

// ---------------------------------------------------------------- xi extraction

/// An extracted coefficient `xi_{left,right}` of the order-`m` map under gate `w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiCoefficient {
    pub left: PauliString,
    pub right: PauliString,
    pub order: u32,
    pub w: WSpec,
    pub value: C,
}

/// `xi_{left,right} = sum_obs R_obs O(companion(obs), obs)` over the `4^|I|`
/// observables of `region`, with `|R| = 4^-|I|`. `observations` maps
/// `(input, observable)` to the measured (offset-corrected) derivative.
pub fn extract_xi(
    observations: &BTreeMap<(PauliString, PauliString), f64>,
    region: &Region,
    left: &PauliString,
    right: &PauliString,
) -> Result<C> {
    let mut acc = C::new(0.0, 0.0);
    for obs in PauliString::all_on(region) {
        let (input, weight) = companion(left, &obs, right, region.len());
        let v = observations
            .get(&(input.clone(), obs.clone()))
            .ok_or_else(|| {
                Error::IncompleteObservations(format!(
                    "missing input {input} / observable {obs} for xi({left}, {right})"
                ))
            })?;
        acc += weight * *v;
    }
    Ok(acc)
}

/// Gate family of a closed-form kernel inversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum XiCase {
    /// No gate.
    Identity,
    /// Single-site Pauli; `chi_wb` is `chi(P_w, P_b)`.
    SinglePauli { chi_wb: u8 },
    /// `S H` on a support site of a diagonal pair; `im_kcd` is the already
    /// learned `Im K_{W P_a W^dag, W^dag P_a W}` at the same order.
    Sh { im_kcd: f64 },
}

/// Closed-form `K^{(m-2)}` from `xi` (case formulas for smooth kernels).
/// Case 3 returns only the imaginary part, the real part of an odd-order
/// diagonal derivative being zero.
pub fn kernel_from_xi(xi: C, m: u32, case: XiCase) -> Result<C> {
    if m < 2 {
        return Err(Error::Domain(format!(
            "kernel inversion needs trace order >= 2, got {m}"
        )));
    }
    let i = C::new(0.0, 1.0);
    let two_m = 2f64.powi(m as i32);
    match case {
        XiCase::Identity => {
            let re = (xi + xi.conj()) / (4.0 * two_m);
            let im = i * (xi - xi.conj()) / (4.0 * two_m);
            Ok(C::new(re.re, im.re))
        }
        XiCase::SinglePauli { chi_wb } => {
            let div = 2.0 * two_m - 4.0;
            if div == 0.0 {
                return Err(Error::Domain(
                    "single-Pauli inversion is degenerate at this order".into(),
                ));
            }
            let sign = if chi_wb == 1 { -1.0 } else { 1.0 };
            let re = (xi + xi.conj()) / (2.0 * div);
            let im = i * (xi - xi.conj()) / (2.0 * div);
            Ok(C::new(sign * re.re, sign * im.re))
        }
        XiCase::Sh { im_kcd } => {
            let div = two_m - 2.0;
            if div == 0.0 {
                return Err(Error::Domain(
                    "SH inversion is degenerate at this order".into(),
                ));
            }
            Ok(C::new(0.0, im_kcd - xi.im / div))
        }
    }
}

// ---------------------------------------------------------------- kernel solve

/// Kernel derivative estimate for one ordered pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub a: usize,
    pub b: usize,
    pub order: u32,
    pub re: f64,
    pub im: f64,
    pub re_sd: f64,
    pub im_sd: f64,
}

impl KernelEstimate {
    pub fn value(&self) -> C {
        C::new(self.re, self.im)
    }
}

/// Parity constraint `K_dc^{(k)} = s conj(K_cd^{(k)})` at order `k`, if any.
fn order_parity(k: u32, smooth: bool) -> Option<f64> {
    if smooth {
        Some(if k % 2 == 0 { 1.0 } else { -1.0 })
    } else if k == 0 {
        Some(1.0)
    } else {
        None
    }
}

/// Real parameters of one canonical pair: `K = sum_j e_j x_j`.
struct PairParams {
    pair: (usize, usize),
    basis: Vec<C>,
    offset: usize,
}

struct Parametrization {
    parity: Option<f64>,
    pairs: Vec<PairParams>,
    index: BTreeMap<(usize, usize), usize>,
    n_params: usize,
}

impl Parametrization {
    fn new(pairs: &BTreeSet<(usize, usize)>, parity: Option<f64>) -> Self {
        let canon: BTreeSet<(usize, usize)> = pairs
            .iter()
            .map(|&(p, q)| {
                if parity.is_some() {
                    (p.min(q), p.max(q))
                } else {
                    (p, q)
                }
            })
            .collect();
        let mut out = Parametrization {
            parity,
            pairs: Vec::new(),
            index: BTreeMap::new(),
            n_params: 0,
        };
        for (k, (p, q)) in canon.into_iter().enumerate() {
            let basis = match parity {
                Some(s) if p == q => vec![if s > 0.0 {
                    C::new(1.0, 0.0)
                } else {
                    C::new(0.0, 1.0)
                }],
                _ => vec![C::new(1.0, 0.0), C::new(0.0, 1.0)],
            };
            out.index.insert((p, q), k);
            out.pairs.push(PairParams {
                pair: (p, q),
                basis,
                offset: out.n_params,
            });
            out.n_params += out.pairs[k].basis.len();
        }
        out
    }

    /// Complex column coefficients of `alpha K_pq + beta conj(K_pq)`.
    fn columns(&self, pq: (usize, usize), alpha: C, beta: C) -> Vec<(usize, C)> {
        let (key, reversed) = match self.index.get(&pq) {
            Some(&k) => (k, false),
            None => (self.index[&(pq.1, pq.0)], true),
        };
        let pp = &self.pairs[key];
        let s = self.parity.unwrap_or(1.0);
        pp.basis
            .iter()
            .enumerate()
            .map(|(j, &e)| {
                let c = if reversed {
                    s * (alpha * e.conj() + beta * e)
                } else {
                    alpha * e + beta * e.conj()
                };
                (pp.offset + j, c)
            })
            .collect()
    }
}

/// Inputs of [`learn_kernels`].
#[derive(Clone, Copy, Debug)]
pub struct KernelProblem<'a> {
    pub plan: &'a Plan,
    pub couplings: &'a [PauliString],
    /// Estimated system terms used in the offsets.
    pub system: &'a [(PauliString, f64)],
    pub max_kernel_order: u32,
    /// Impose `K^{(k)}_ba = (-1)^k conj K^{(k)}_ab` at every order.
    pub smooth: bool,
    /// Subtract system and higher-Dyson offsets (off only for ensembles,
    /// whose second derivative has none).
    pub subtract_offsets: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelLearning {
    pub table: KernelTable,
    pub estimates: Vec<KernelEstimate>,
    /// Per order, the largest ratio of residual to propagated error of the
    /// overdetermined least-squares system (zero when exactly determined).
    pub residual_ratio: Vec<f64>,
    /// Set when an order failed; lower orders are still reported.
    pub failure: Option<String>,
}

struct TargetRows {
    form: LinearForm,
    value: C,
    /// Dependence of `value` on measured derivatives: `(setting id, weight)`.
    weights: Vec<(u64, C)>,
}

fn target_rows(
    target: &XiTarget,
    region: &Region,
    terms: &[SandwichTerm],
    corrected: &BTreeMap<u64, f64>,
) -> Result<TargetRows> {
    let purpose = Purpose::Pair {
        a: target.a,
        b: target.b,
    };
    let mut value = C::new(0.0, 0.0);
    let mut weights = Vec::new();
    for obs in PauliString::all_on(region) {
        let (input, weight) = companion(&target.left, &obs, &target.right, region.len());
        let id = setting_id(&purpose, &input, &obs, &target.w, target.conjugate_input);
        let v = corrected.get(&id).ok_or_else(|| {
            Error::IncompleteObservations(format!(
                "no data for input {input} / observable {obs} (pair {},{})",
                target.a, target.b
            ))
        })?;
        value += weight * *v;
        weights.push((id, weight));
    }
    Ok(TargetRows {
        form: xi_linear_form(terms, region, &target.left, &target.right),
        value,
        weights,
    })
}

/// Kernel derivatives up to `max_kernel_order` from the pair settings of a
/// plan, order by order; each order subtracts offsets built from the lower
/// ones.
pub fn learn_kernels(
    problem: &KernelProblem,
    observations: &BTreeMap<u64, Observation>,
) -> KernelLearning {
    let mut out = KernelLearning {
        table: KernelTable::new(problem.smooth),
        estimates: Vec::new(),
        residual_ratio: Vec::new(),
        failure: None,
    };
    for k in 0..=problem.max_kernel_order {
        match learn_order(problem, observations, &out.table, k) {
            Ok((ests, ratio)) => {
                for e in &ests {
                    out.table.set(e.a, e.b, k, e.value());
                }
                out.estimates.extend(ests);
                out.residual_ratio.push(ratio);
            }
            Err(err) => {
                out.failure = Some(format!("kernel order {k}: {err}"));
                break;
            }
        }
    }
    out
}

fn learn_order(
    problem: &KernelProblem,
    observations: &BTreeMap<u64, Observation>,
    lower: &KernelTable,
    k: u32,
) -> Result<(Vec<KernelEstimate>, f64)> {
    let m = k + 2;
    let dyson = DysonModel {
        system: problem.system.to_vec(),
        couplings: problem.couplings.to_vec(),
        kernel: lower.clone(),
    };
    let corrected: BTreeMap<u64, (f64, f64)> = problem
        .plan
        .settings
        .par_iter()
        .filter(|s| s.orders.contains(&m))
        .filter_map(|s| observations.get(&s.id).map(|o| (s, o)))
        .map(|(s, o)| {
            let offset = if problem.subtract_offsets {
                offset_m(&dyson, &TraceQuery::from_setting(s), m)?
            } else {
                0.0
            };
            Ok((s.id, (o.derivative(m)? - offset, o.sd(m))))
        })
        .collect::<Result<_>>()?;
    let values: BTreeMap<u64, f64> = corrected.iter().map(|(&id, &(v, _))| (id, v)).collect();

    let mut rows = Vec::new();
    let mut terms_by_w: BTreeMap<WSpec, Vec<SandwichTerm>> = BTreeMap::new();
    for pp in &problem.plan.pairs {
        for t in &pp.targets {
            let terms = terms_by_w
                .entry(t.w)
                .or_insert_with(|| t_map_terms(problem.couplings, &t.w, m));
            rows.push(target_rows(t, &pp.region, terms, &values)?);
        }
    }
    let pairs: BTreeSet<(usize, usize)> =
        rows.iter().flat_map(|r| r.form.keys().copied()).collect();
    if pairs.is_empty() {
        return Err(Error::Unidentifiable(format!(
            "no xi target depends on order-{k} kernels"
        )));
    }
    let params = Parametrization::new(&pairs, order_parity(k, problem.smooth));

    let ids: Vec<u64> = corrected.keys().copied().collect();
    let col_of: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let n_rows = 2 * rows.len();
    let mut a = DMatrix::<f64>::zeros(n_rows, params.n_params);
    let mut y = DVector::<f64>::zeros(n_rows);
    let mut mix = DMatrix::<f64>::zeros(n_rows, ids.len());
    for (r, row) in rows.iter().enumerate() {
        for (&pq, &(alpha, beta)) in &row.form {
            for (j, c) in params.columns(pq, alpha, beta) {
                a[(2 * r, j)] += c.re;
                a[(2 * r + 1, j)] += c.im;
            }
        }
        y[2 * r] = row.value.re;
        y[2 * r + 1] = row.value.im;
        for &(id, w) in &row.weights {
            let c = col_of[&id];
            mix[(2 * r, c)] += w.re;
            mix[(2 * r + 1, c)] += w.im;
        }
    }

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin < 1e-9 * smax {
        let list: Vec<String> = params
            .pairs
            .iter()
            .map(|p| format!("({},{})", p.pair.0, p.pair.1))
            .collect();
        return Err(Error::Unidentifiable(format!(
            "order-{k} kernels of pairs {} are not determined by the planned settings (singular values {smin:.2e}..{smax:.2e})",
            list.join(" ")
        )));
    }
    let pinv = svd
        .pseudo_inverse(1e-12 * smax)
        .map_err(|e| Error::Unidentifiable(e.to_string()))?;
    let x = &pinv * &y;
    let var = DVector::from_iterator(ids.len(), ids.iter().map(|id| corrected[id].1.powi(2)));
    let prop = &pinv * &mix;
    let cov = &prop * DMatrix::from_diagonal(&var) * prop.transpose();
    let cov_y = &mix * DMatrix::from_diagonal(&var) * mix.transpose();
    let resid = &a * &x - &y;
    let ratio = (0..n_rows)
        .map(|i| {
            let s = cov_y[(i, i)].sqrt();
            if s > 0.0 {
                resid[i].abs() / s
            } else if resid[i].abs() > 1e-9 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);

    let mut ests = Vec::new();
    for pp in &params.pairs {
        let mut value = C::new(0.0, 0.0);
        let (mut var_re, mut var_im) = (0.0, 0.0);
        for (j, e) in pp.basis.iter().enumerate() {
            let idx = pp.offset + j;
            value += e * x[idx];
            var_re += (e.re * e.re) * cov[(idx, idx)];
            var_im += (e.im * e.im) * cov[(idx, idx)];
        }
        let (p, q) = pp.pair;
        ests.push(KernelEstimate {
            a: p,
            b: q,
            order: k,
            re: value.re,
            im: value.im,
            re_sd: var_re.sqrt(),
            im_sd: var_im.sqrt(),
        });
        if let Some(s) = params.parity {
            if p != q {
                let v = s * value.conj();
                ests.push(KernelEstimate {
                    a: q,
                    b: p,
                    order: k,
                    re: v.re,
                    im: v.im,
                    re_sd: var_re.sqrt(),
                    im_sd: var_im.sqrt(),
                });
            }
        }
    }
    Ok((ests, ratio))
}

/// Average `(a, b)` and `(b, a)` entries with the parity signs of a smooth
/// kernel. Returns the repaired table and the largest violation found.
pub fn symmetrize(table: &KernelTable) -> (KernelTable, f64) {
    let mut out = KernelTable::new(table.smooth);
    let mut worst = 0.0f64;
    for ((a, b, m), v) in table.iter() {
        let s = if !table.smooth || m % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        if !table.smooth && m > 0 {
            out.set(a, b, m, v);
            continue;
        }
        let partner = if table.contains(b, a, m) {
            s * table.get(b, a, m).conj()
        } else {
            v
        };
        worst = worst.max((v - partner).norm());
        out.set(a, b, m, (v + partner) / 2.0);
    }
    (out, worst)
}

// ---------------------------------------------------------------- modes

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeParams {
    pub v: Estimate,
    pub gamma: Estimate,
    pub epsilon: Estimate,
    /// True once the coupling error is below half the coupling, the point
    /// from which the decay-rate error is meaningful.
    pub resolved: bool,
}

/// Single-mode parameters from `K(0)` and `K'(0)` of one pair.
///
/// For a diagonal pair `K(0)` must be positive. Off-diagonal pairs carry the
/// relative phase of the two couplings in `K(0)`, so `v = sqrt|K(0)|` and the
/// rate comes from the ratio `K'(0) / K(0)`.
pub fn mode_params_from_kernel(k0: KernelEstimate, k1: KernelEstimate) -> Result<ModeParams> {
    let z0 = k0.value();
    let z1 = k1.value();
    if k0.a == k0.b && !(z0.re > 0.0) {
        return Err(Error::Unidentifiable(format!(
            "K({},{})(0) = {z0} is not positive",
            k0.a, k0.b
        )));
    }
    if !(z0.norm() > 0.0) {
        return Err(Error::Unidentifiable("K(0) vanishes".into()));
    }
    let ratio = z1 / z0;
    let n0 = z0.norm();
    let sd0 = k0.re_sd.hypot(k0.im_sd);
    let sd1 = k1.re_sd.hypot(k1.im_sd);
    let v = Estimate::new(n0.sqrt(), sd0 / (2.0 * n0.sqrt()));
    // |d(ratio)| <= sd1 / |K0| + |K1| sd0 / |K0|^2
    let ratio_sd = (sd1 / n0).hypot(z1.norm() * sd0 / (n0 * n0));
    Ok(ModeParams {
        v,
        gamma: Estimate::new(-2.0 * ratio.re, 2.0 * ratio_sd),
        epsilon: Estimate::new(ratio.im, ratio_sd),
        resolved: v.sd < v.value / 2.0,
    })
}

// ---------------------------------------------------------------- ensembles

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEntry {
    pub a: usize,
    pub b: usize,
    pub second_moment: Estimate,
    pub covariance: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleEstimate {
    pub lambda: Vec<Estimate>,
    pub entries: Vec<CovarianceEntry>,
}

/// Means from first derivatives and `E[Lambda_a Lambda_b]` from second
/// derivatives (a constant real kernel, no offsets); `Sigma = E - mu mu^T`.
pub fn learn_ensemble(
    plan: &Plan,
    terms: &[PauliString],
    observations: &BTreeMap<u64, Observation>,
) -> Result<EnsembleEstimate> {
    let lambda = recover_lambda(&plan.hamiltonian, observations)?;
    let problem = KernelProblem {
        plan,
        couplings: terms,
        system: &[],
        max_kernel_order: 0,
        smooth: true,
        subtract_offsets: false,
    };
    let learned = learn_kernels(&problem, observations);
    if let Some(f) = learned.failure {
        return Err(Error::Unidentifiable(f));
    }
    let entries = plan
        .pairs
        .iter()
        .map(|pp| {
            let e = learned
                .estimates
                .iter()
                .find(|e| e.a == pp.a && e.b == pp.b)
                .ok_or_else(|| {
                    Error::Unidentifiable(format!(
                        "second moment ({},{}) not determined",
                        pp.a, pp.b
                    ))
                })?;
            let (la, lb) = (lambda[pp.a], lambda[pp.b]);
            let cov_sd =
                (e.re_sd.powi(2) + (lb.value * la.sd).powi(2) + (la.value * lb.sd).powi(2)).sqrt();
            Ok(CovarianceEntry {
                a: pp.a,
                b: pp.b,
                second_moment: Estimate::new(e.re, e.re_sd),
                covariance: Estimate::new(e.re - la.value * lb.value, cov_sd),
            })
        })
        .collect::<Result<_>>()?;
    Ok(EnsembleEstimate { lambda, entries })
}

// ---------------------------------------------------------------- fermion chain

/// Majorana indices `(a, b, c, d)` of the linear traces used to learn the
/// free-fermion chain at a representative site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTraceSet {
    pub field: (usize, usize, usize, usize),
    pub hopping: (usize, usize, usize, usize),
    pub kernel: (usize, usize, usize, usize),
}

impl ChainTraceSet {
    /// Traces around site `i` (needs sites `i..=i+3`): the field from
    /// `(x_i, y_i)`, the hopping from `(y_i, x_{i+1})`, and the kernel between
    /// the coupled Majoranas `y_i, y_{i+2}` with auxiliary `x_{i+1}`, for which
    /// every lower-order correction vanishes.
    pub fn at_site(i: usize) -> Self {
        use crate::sim_gaussian::{x_index, y_index};
        Self {
            field: (x_index(i), x_index(i + 2), y_index(i), x_index(i + 2)),
            hopping: (y_index(i), x_index(i + 3), x_index(i + 1), x_index(i + 3)),
            kernel: (y_index(i), x_index(i + 1), y_index(i + 2), x_index(i + 1)),
        }
    }

    pub fn all(&self) -> [(usize, usize, usize, usize); 3] {
        [self.field, self.hopping, self.kernel]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainEstimate {
    pub field: Estimate,
    pub hopping: Estimate,
    /// `K(0)` and `K'(0)` between the coupled Majoranas of sites `i` and `i+2`.
    pub k0: Estimate,
    pub k1: Estimate,
}

/// Derivatives `F^{(m)}(0)` of `F(tau) = R_ac R_bd - R_ad R_bc` from a fit on
/// grid times `t` with `tau = scale * t`.
fn tau_derivatives(obs: &Observation, scale: f64) -> Vec<Estimate> {
    (0..obs.derivatives.len())
        .map(|m| {
            let f = scale.powi(-(m as i32));
            Estimate::new(obs.derivatives[m] * f, obs.sd[m] * f)
        })
        .collect()
}

/// Chain parameters from the three traces of [`ChainTraceSet`].
///
/// With `R = exp(X tau)`, `R' = h`, `R'' = h^2 + S0`, `R''' = h R'' + S0 h + S1`
/// where `S(tau) = -4 K(tau)` is the bath self-energy on the coupled
/// Majoranas. For the trace `(x, l, y, l)`:
/// `F' = h_xy`, `F'' = R''_xy - 2 h_xl h_ly` and
/// `F''' = R'''_xy + 3 h_xy R''_ll - 3 R''_xl h_ly - 3 h_xl R''_ly`.
pub fn learn_chain(
    n_sites: usize,
    site: usize,
    traces: &[Observation; 3],
    scale: f64,
) -> Result<ChainEstimate> {
    use crate::sim_gaussian::{x_index, y_index};
    if site + 3 >= n_sites {
        return Err(Error::Domain(format!("representative site {site} needs three neighbours to its right in a chain of {n_sites}")));
    }
    for t in traces {
        if t.derivatives.len() < 4 {
            return Err(Error::MissingEstimate(
                "chain learning needs third derivatives (fit degree >= 3)".into(),
            ));
        }
    }
    let set = ChainTraceSet::at_site(site);
    let f = tau_derivatives(&traces[0], scale);
    let g = tau_derivatives(&traces[1], scale);
    let k = tau_derivatives(&traces[2], scale);
    let h_xy = f[1];
    let j_xy = g[1];
    let field = Estimate::new(-h_xy.value / 2.0, h_xy.sd / 2.0);
    let hopping = Estimate::new(-j_xy.value / 2.0, j_xy.sd / 2.0);

    // estimated system generator of the whole chain
    let dim = 2 * n_sites;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..n_sites {
        h[(x_index(i), y_index(i))] = h_xy.value;
        h[(y_index(i), x_index(i))] = -h_xy.value;
        if i + 1 < n_sites {
            h[(y_index(i), x_index(i + 1))] = j_xy.value;
            h[(x_index(i + 1), y_index(i))] = -j_xy.value;
        }
    }
    let (x, l, y, _) = set.kernel;
    let h2 = &h * &h;
    let s0 = k[2].value + 2.0 * h[(x, l)] * h[(l, y)] - h2[(x, y)];
    let mut sigma0 = DMatrix::<f64>::zeros(dim, dim);
    sigma0[(x, y)] = s0;
    sigma0[(y, x)] = s0;
    let r2 = &h2 + &sigma0;
    let hr2 = &h * &r2;
    let s0h = &sigma0 * &h;
    let s1 = k[3].value - hr2[(x, y)] - s0h[(x, y)] - 3.0 * h[(x, y)] * r2[(l, l)]
        + 3.0 * r2[(x, l)] * h[(l, y)]
        + 3.0 * h[(x, l)] * r2[(l, y)];
    Ok(ChainEstimate {
        field,
        hopping,
        k0: Estimate::new(-s0 / 4.0, k[2].sd / 4.0),
        k1: Estimate::new(-s1 / 4.0, k[3].sd / 4.0),
    })
}

// ---------------------------------------------------------------- report

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub master_seed: u64,
    pub shots_per_time: u64,
    pub fit_degree: usize,
    pub times: Vec<f64>,
    pub n_settings: usize,
}

/// One row of the per-parameter summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub parameter: String,
    pub truth: Option<f64>,
    pub estimate: f64,
    pub error: f64,
    pub shots: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub lambda_hat: Vec<Estimate>,
    pub kernel_hat: Vec<KernelEstimate>,
    pub mode_params: Option<ModeParams>,
    pub ensemble: Option<EnsembleEstimate>,
    pub chain: Option<ChainEstimate>,
    pub provenance: Provenance,
    /// Per-parameter rows with ground truth where known.
    pub summary: Vec<ParameterRow>,
    /// Notes on the error model, including the loose analytic bounds.
    pub commentary: Vec<String>,
    pub failure: Option<String>,
}

impl LearnReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "{}",
            provenance_line(self.schema_version, &self.config_hash)
        )?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["parameter", "truth", "estimate", "error", "shots"])?;
        for r in &self.summary {
            csv.write_record([
                r.parameter.clone(),
                r.truth.map(|t| t.to_string()).unwrap_or_default(),
                r.estimate.to_string(),
                r.error.to_string(),
                r.shots.to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CouplingTerm, HamTerm, KernelMode, KernelSpec, ModeCoupling, NoiseModel};
    use crate::offsets::{dyson_term, PieceSet};
    use crate::pauli::Axis;
    use approx::assert_relative_eq;

    fn p(s: &str) -> PauliString {
        s.parse().unwrap()
    }

    fn instance() -> NoiseModel {
        NoiseModel {
            n_qubits: 2,
            hamiltonian: vec![
                HamTerm {
                    pauli: p("Z0"),
                    coeff: 0.7,
                },
                HamTerm {
                    pauli: p("Z1"),
                    coeff: -0.4,
                },
                HamTerm {
                    pauli: p("X0 X1"),
                    coeff: 0.3,
                },
            ],
            couplings: vec![
                CouplingTerm { pauli: p("X0") },
                CouplingTerm { pauli: p("Y1") },
            ],
            kernel: KernelSpec::Modes(vec![KernelMode {
                couplings: vec![
                    ModeCoupling {
                        term: 0,
                        re: 0.6,
                        im: 0.0,
                    },
                    ModeCoupling {
                        term: 1,
                        re: 0.3,
                        im: 0.2,
                    },
                ],
                epsilon: 0.5,
                gamma: 0.8,
            }]),
            metadata: None,
            ensemble: None,
        }
    }

    #[test]
    fn t_map_matches_second_order_dyson() {
        let model = instance();
        let couplings: Vec<PauliString> = model.couplings.iter().map(|c| c.pauli.clone()).collect();
        let dm = DysonModel {
            system: vec![],
            couplings: couplings.clone(),
            kernel: model.kernel.to_table(3),
        };
        let ws = [
            WSpec::Identity,
            WSpec::SinglePauli {
                site: 0,
                axis: Axis::Z,
            },
            WSpec::Sh { site: 0 },
            WSpec::Sh { site: 1 },
        ];
        let region = Region::from_iter([0, 1]);
        for w in ws {
            for m in 2..=5u32 {
                let terms = t_map_terms(&couplings, &w, m);
                for input in PauliString::all_on(&region) {
                    for obs in PauliString::all_on(&region) {
                        // sign-corrected data in the frame of the setting's input
                        let (prepared, sign) = match w {
                            WSpec::Sh { .. } => (w.conj_dagger(&input), 1.0),
                            WSpec::SinglePauli { site, axis } => (
                                input.clone(),
                                if crate::pauli::chi(&PauliString::single(site, axis), &input) == 1
                                {
                                    -1.0
                                } else {
                                    1.0
                                },
                            ),
                            WSpec::Identity => (input.clone(), 1.0),
                        };
                        let q = TraceQuery {
                            prepared,
                            observable: obs.clone(),
                            w,
                            sign,
                        };
                        let dyson = dyson_term(&dm, &q, m, 2, PieceSet::CouplingsOnly, false, None);
                        let tmap = t_map_trace(&terms, &dm.kernel, m, &input, &obs);
                        assert!(
                            (dyson - tmap).norm() < 1e-10,
                            "{w:?} m={m} {input} -> {obs}: {dyson} vs {tmap}"
                        );
                    }
                }
            }
        }
    }

    /// Dense `Tr(obs T(input)) / 2^n` for `T(X) = sum coeff * L X R`.
    fn synthetic_observations(
        map: &[(C, PauliString, PauliString)],
        region: &Region,
    ) -> BTreeMap<(PauliString, PauliString), f64> {
        let n = region.iter().max().unwrap() + 1;
        let dim = (1usize << n) as f64;
        let mut out = BTreeMap::new();
        for input in PauliString::all_on(region) {
            let x = input.to_dense(n);
            let mut tx = DMatrix::<C>::zeros(x.nrows(), x.ncols());
            for (c, l, r) in map {
                tx += (l.to_dense(n) * &x * r.to_dense(n)) * *c;
            }
            for obs in PauliString::all_on(region) {
                let v = (obs.to_dense(n) * &tx).trace() / dim;
                out.insert((input.clone(), obs), v.re);
            }
        }
        out
    }

    #[test]
    fn xi_extraction_on_synthetic_maps() {
        let region = Region::from_iter([0, 1]);
        // Hermiticity preserving: 3 (P X Q + Q X P)
        let (pc, pd) = (p("X0 Z1"), p("Y1"));
        let map = vec![
            (C::new(3.0, 0.0), pc.clone(), pd.clone()),
            (C::new(3.0, 0.0), pd.clone(), pc.clone()),
        ];
        let obs = synthetic_observations(&map, &region);
        assert_relative_eq!(
            extract_xi(&obs, &region, &pc, &pd).unwrap().re,
            3.0,
            epsilon = 1e-10
        );
        assert!(extract_xi(&obs, &region, &pc, &pc).unwrap().norm() < 1e-10);

        let ident = synthetic_observations(
            &[(
                C::new(1.0, 0.0),
                PauliString::identity(),
                PauliString::identity(),
            )],
            &region,
        );
        assert_relative_eq!(
            extract_xi(
                &ident,
                &region,
                &PauliString::identity(),
                &PauliString::identity()
            )
            .unwrap()
            .re,
            1.0,
            epsilon = 1e-12
        );

        let mut partial = obs.clone();
        let first = partial.keys().next().unwrap().clone();
        partial.remove(&first);
        let missing = PauliString::all_on(&region).into_iter().any(|o| {
            let (i, _) = companion(&pc, &o, &pd, 2);
            (i, o) == first
        });
        if missing {
            assert!(matches!(
                extract_xi(&partial, &region, &pc, &pd),
                Err(Error::IncompleteObservations(_))
            ));
        }
    }

    #[test]
    fn kernel_from_xi_examples() {
        let k = kernel_from_xi(C::new(8.0, 0.0), 2, XiCase::Identity).unwrap();
        assert_relative_eq!(k.re, 1.0);
        assert_relative_eq!(k.im, 0.0);
        // 12 (Re - i Im) with Re = 0, Im = -0.45
        let xi = C::new(0.0, -1.0) * (-0.45) * 12.0;
        let k = kernel_from_xi(xi, 3, XiCase::SinglePauli { chi_wb: 0 }).unwrap();
        assert_relative_eq!(k.im, -0.45, epsilon = 1e-12);
        let flipped = kernel_from_xi(xi, 3, XiCase::SinglePauli { chi_wb: 1 }).unwrap();
        assert_relative_eq!(flipped.im, 0.45, epsilon = 1e-12);
        let k = kernel_from_xi(C::new(0.3, 1.2), 3, XiCase::Sh { im_kcd: 0.0 }).unwrap();
        assert_relative_eq!(k.im, -1.2 / 6.0);
        assert!(kernel_from_xi(C::new(1.0, 0.0), 1, XiCase::Identity).is_err());
    }

    fn est(a: usize, b: usize, order: u32, z: C) -> KernelEstimate {
        KernelEstimate {
            a,
            b,
            order,
            re: z.re,
            im: z.im,
            re_sd: 0.0,
            im_sd: 0.0,
        }
    }

    #[test]
    fn mode_parameter_examples() {
        let m = mode_params_from_kernel(
            est(0, 0, 0, C::new(1.0, 0.0)),
            est(0, 0, 1, C::new(-0.45, 0.0)),
        )
        .unwrap();
        assert_relative_eq!(m.v.value, 1.0);
        assert_relative_eq!(m.gamma.value, 0.9);
        assert_relative_eq!(m.epsilon.value, 0.0);
        let m = mode_params_from_kernel(
            est(0, 0, 0, C::new(4.0, 0.0)),
            est(0, 0, 1, C::new(-2.0, 4.0)),
        )
        .unwrap();
        assert_relative_eq!(m.v.value, 2.0);
        assert_relative_eq!(m.gamma.value, 1.0);
        assert_relative_eq!(m.epsilon.value, 1.0);
        assert!(matches!(
            mode_params_from_kernel(
                est(0, 0, 0, C::new(-0.1, 0.0)),
                est(0, 0, 1, C::new(0.0, 0.0))
            ),
            Err(Error::Unidentifiable(_))
        ));
        // off-diagonal pair with a relative sign between the couplings
        let m = mode_params_from_kernel(
            est(0, 2, 0, C::new(-1.0, 0.0)),
            est(0, 2, 1, C::new(0.45, 0.0)),
        )
        .unwrap();
        assert_relative_eq!(m.v.value, 1.0);
        assert_relative_eq!(m.gamma.value, 0.9);
    }

    #[test]
    fn lambda_rule() {
        assert_relative_eq!(lambda_from_derivative(-3.2), 0.8);
        assert_eq!(lambda_from_derivative(0.0), 0.0);
    }

    #[test]
    fn symmetrization_repairs_parity() {
        let mut t = KernelTable::new(true);
        t.set(0, 1, 1, C::new(0.2, 0.5));
        t.set(1, 0, 1, C::new(-0.22, 0.48));
        let (s, worst) = symmetrize(&t);
        assert!(worst > 0.0 && worst < 0.1);
        assert!(crate::model::table_violations(&s).is_empty());
        assert_relative_eq!(s.get(1, 0, 1).re, -s.get(0, 1, 1).re, epsilon = 1e-12);
        assert_relative_eq!(s.get(1, 0, 1).im, s.get(0, 1, 1).im, epsilon = 1e-12);
    }

    /// The closed-form inversions against xi evaluated from the T map on a
    /// smooth kernel. With the gate convention `W X W^dag = Z` the SH formula
    /// returns `-Im K_aa`.
    #[test]
    fn case_formulas_agree_with_t_map() {
        let couplings = vec![p("X0"), p("Z1")];
        let mut t = KernelTable::new(true);
        t.set(0, 0, 0, C::new(1.0, 0.0));
        t.set(1, 1, 0, C::new(0.5, 0.0));
        t.set(0, 1, 0, C::new(0.3, 0.2));
        t.set(1, 0, 0, C::new(0.3, -0.2));
        t.set(0, 0, 1, C::new(0.0, 0.7));
        t.set(1, 1, 1, C::new(0.0, -0.4));
        t.set(0, 1, 1, C::new(-0.45, 0.25));
        t.set(1, 0, 1, C::new(0.45, 0.25));
        let xi = |w: WSpec, m: u32, l: &PauliString, r: &PauliString, region: &Region| -> C {
            let form = xi_linear_form(&t_map_terms(&couplings, &w, m), region, l, r);
            form.iter()
                .map(|(&(a, b), &(al, be))| {
                    al * t.get(a, b, m - 2) + be * t.get(a, b, m - 2).conj()
                })
                .sum()
        };
        let both = Region::from_iter([0, 1]);
        let k = kernel_from_xi(
            xi(WSpec::Identity, 2, &p("X0"), &p("Z1"), &both),
            2,
            XiCase::Identity,
        )
        .unwrap();
        assert!((k - t.get(0, 1, 0)).norm() < 1e-12);
        for (w, chi_wb) in [
            (
                WSpec::SinglePauli {
                    site: 0,
                    axis: Axis::Z,
                },
                0u8,
            ),
            (
                WSpec::SinglePauli {
                    site: 1,
                    axis: Axis::X,
                },
                1,
            ),
        ] {
            let k = kernel_from_xi(
                xi(w, 3, &p("X0"), &p("Z1"), &both),
                3,
                XiCase::SinglePauli { chi_wb },
            )
            .unwrap();
            assert!((k - t.get(0, 1, 1)).norm() < 1e-12, "{w:?}: {k}");
        }
        let w = WSpec::Sh { site: 0 };
        let single = Region::from_iter([0]);
        let k = kernel_from_xi(
            xi(w, 3, &w.conj(&p("X0")), &p("X0"), &single),
            3,
            XiCase::Sh { im_kcd: 0.0 },
        )
        .unwrap();
        assert_relative_eq!(k.im, -t.get(0, 0, 1).im, epsilon = 1e-12);
    }

    #[test]
    fn exact_derivatives_recover_kernels() {
        use crate::planner::{plan_model, PlanOptions};
        use crate::sim_exact::{sign_correction, ChannelQuery, PseudomodeEmbedding};
        let model = instance();
        let opts = PlanOptions {
            max_kernel_order: 2,
            general_kernels: true,
            ..Default::default()
        };
        let plan = plan_model(&model, &opts);
        let joint = PseudomodeEmbedding::default().build(&model).unwrap();
        let mut observations = BTreeMap::new();
        for s in plan.hamiltonian.iter().chain(&plan.settings) {
            let d = joint.channel_derivatives(&ChannelQuery::from_setting(s), 4);
            let sign = sign_correction(s);
            observations.insert(
                s.id,
                Observation::exact(d.iter().map(|x| sign * x).collect()),
            );
        }
        let lambda = recover_lambda(&plan.hamiltonian, &observations).unwrap();
        for (e, t) in lambda.iter().zip(&model.hamiltonian) {
            assert_relative_eq!(e.value, t.coeff, epsilon = 1e-10);
        }
        let system: Vec<(PauliString, f64)> = model
            .hamiltonian
            .iter()
            .zip(&lambda)
            .map(|(t, e)| (t.pauli.clone(), e.value))
            .collect();
        let couplings: Vec<PauliString> = model.couplings.iter().map(|c| c.pauli.clone()).collect();
        let problem = KernelProblem {
            plan: &plan,
            couplings: &couplings,
            system: &system,
            max_kernel_order: 2,
            smooth: false,
            subtract_offsets: true,
        };
        let learned = learn_kernels(&problem, &observations);
        assert!(learned.failure.is_none(), "{:?}", learned.failure);
        let truth = model.kernel.to_table(2);
        for e in &learned.estimates {
            let want = truth.get(e.a, e.b, e.order);
            assert!(
                (e.value() - want).norm() < 1e-8,
                "K({},{})^({}) = {} vs {want}",
                e.a,
                e.b,
                e.order,
                e.value()
            );
        }
        assert_eq!(learned.estimates.iter().filter(|e| e.order == 1).count(), 4);
    }
}
