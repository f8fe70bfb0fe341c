//! Nonlinear offsets of trace derivatives: the parts of `d^m B / dt^m` at 0
//! that are not linear in the unknown kernel derivative `K^{(m-2)}`.
//!
//! The `n`-th Dyson term of the two-segment evolution is
//! `(-i)^n sum_l int [H(t_1), ... [H(t_l), W [H(t_{l+1}), ... [H(t_n), P (x) gamma]] W^dag]]`
//! with `t_1 >= ... >= t_l` in `[t, 2t]` and `t_{l+1} >= ... >= t_n` in
//! `[0, t]`. Each `H(t_k)` is a system term or a coupling `P_b (x) A_b(t_k)`;
//! environment moments factor into pairings (Wick) and the kernel is
//! Taylor-expanded, so the time integrals reduce to exact rational
//! coefficients. Offsets are `sum_{n=3}^m` of these terms for `m >= 3` and
//! the system-only `n = 2` term for `m = 2`.

use std::collections::BTreeMap;

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::KernelTable;
use crate::numerics::{binomial, factorial};
use crate::pauli::{PauliString, Region};
use crate::planner::WSpec;

/// Closed-form `int_0^t dt_1 ... int_0^{t_{n-1}} dt_n prod t_i^{d_i}`:
/// `t^{n + |d|} prod_r 1 / (r + |d^{[r]}|)` with `d^{[r]}` the last `r` entries.
pub fn nested_integral(d: &[u32], t: f64) -> f64 {
    let n = d.len();
    let total: u32 = d.iter().sum();
    let mut v = t.powi((n as u32 + total) as i32);
    let mut tail = 0u32;
    for r in 1..=n {
        tail += d[n - r];
        v /= (r as u32 + tail) as f64;
    }
    v
}

/// Polynomial in `u_1..u_n` as exponent vector -> coefficient.
type Poly = BTreeMap<Vec<u32>, f64>;

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = Poly::new();
    for (ea, ca) in a {
        for (eb, cb) in b {
            let e: Vec<u32> = ea.iter().zip(eb).map(|(x, y)| x + y).collect();
            *out.entry(e).or_insert(0.0) += ca * cb;
        }
    }
    out
}

/// `(u_p - u_q)^z / z!` in `n` variables.
fn difference_power(n: usize, p: usize, q: usize, z: u32) -> Poly {
    let mut out = Poly::new();
    for j in 0..=z {
        let mut e = vec![0; n];
        e[p] += j;
        e[q] += z - j;
        let sign = if (z - j) % 2 == 0 { 1.0 } else { -1.0 };
        *out.entry(e).or_insert(0.0) += sign * binomial(z, j) / factorial(z);
    }
    out
}

/// Integrate variable `k` between constant `lo` and either the constant `hi`
/// or the variable `k - 1`.
fn integrate_var(p: &Poly, k: usize, lo: f64, hi: Option<f64>) -> Poly {
    let mut out = Poly::new();
    for (e, c) in p {
        let pow = e[k] + 1;
        let c = c / pow as f64;
        let mut base = e.clone();
        base[k] = 0;
        match hi {
            Some(h) => *out.entry(base.clone()).or_insert(0.0) += c * h.powi(pow as i32),
            None => {
                let mut up = base.clone();
                up[k - 1] += pow;
                *out.entry(up).or_insert(0.0) += c;
            }
        }
        *out.entry(base).or_insert(0.0) -= c * lo.powi(pow as i32);
    }
    out
}

/// `d^m/dt^m` at 0 of the split nested integral of `prod_i (t_{p_i} - t_{q_i})^{z_i} / z_i!`
/// over `t_1 >= .. >= t_l` in `[t, 2t]` and `t_{l+1} >= .. >= t_n` in `[0, t]`.
/// Slots are 1-based time indices `(p_i, q_i)`.
pub fn integral_coefficient(
    z: &[u32],
    slots: &[(usize, usize)],
    n: usize,
    l: usize,
    m: u32,
) -> f64 {
    assert_eq!(z.len(), slots.len(), "one slot pair per kernel factor");
    assert!(l <= n);
    let degree = n as u32 + z.iter().sum::<u32>();
    if degree != m {
        return 0.0;
    }
    if n == 0 {
        return 1.0;
    }
    let mut p: Poly = [(vec![0; n], 1.0)].into_iter().collect();
    for (&zi, &(a, b)) in z.iter().zip(slots) {
        p = poly_mul(&p, &difference_power(n, a - 1, b - 1, zi));
    }
    // substitute t_k = t u_k; the integral becomes t^m times a constant
    for k in (0..n).rev() {
        let outer = k < l;
        let lo = if outer { 1.0 } else { 0.0 };
        let first_of_segment = k == 0 || k == l;
        let hi = if first_of_segment {
            Some(if outer { 2.0 } else { 1.0 })
        } else {
            None
        };
        p = integrate_var(&p, k, lo, hi);
    }
    factorial(m) * p.values().sum::<f64>()
}

/// Upper bound `2^{m-n} m! / ((n-l)! l! prod z_i!)` on [`integral_coefficient`].
pub fn integral_coefficient_bound(z: &[u32], n: usize, l: usize, m: u32) -> f64 {
    let zf: f64 = z.iter().map(|&x| factorial(x)).product();
    2f64.powi(m as i32 - n as i32) * factorial(m)
        / (factorial((n - l) as u32) * factorial(l as u32) * zf)
}

/// `-(4 / 2^N) Tr(P_O [H_S, [H_S, P_I]])` by Pauli algebra.
pub fn offset_m2(
    observable: &PauliString,
    input: &PauliString,
    system: &[(PauliString, f64)],
) -> f64 {
    let mut acc = C::new(0.0, 0.0);
    for (pa, la) in system {
        for (pb, lb) in system {
            if pb.commutes(input) || pa.commutes(&pb.multiply(input)) {
                continue;
            }
            // [P_b, P_I] = 2 P_b P_I and [P_a, 2 P_b P_I] = 4 P_a P_b P_I when both anticommute
            let inner = pa.multiply(pb).multiply(input);
            let tr = normalized(&observable.multiply(&inner));
            acc += tr * (4.0 * la * lb);
        }
    }
    -4.0 * acc.re
}

fn normalized(p: &PauliString) -> C {
    if p.is_identity() {
        p.phase()
    } else {
        C::new(0.0, 0.0)
    }
}

/// Everything the Dyson terms need: system terms, coupling Paulis and the
/// (estimated) kernel derivatives.
#[derive(Clone, Debug)]
pub struct DysonModel {
    pub system: Vec<(PauliString, f64)>,
    pub couplings: Vec<PauliString>,
    pub kernel: KernelTable,
}

/// One process trace as measured: `sign * Tr[P_O E_W(t)(prepared)] / 2^N`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceQuery {
    pub prepared: PauliString,
    pub observable: PauliString,
    pub w: WSpec,
    pub sign: f64,
}

impl TraceQuery {
    pub fn from_setting(s: &crate::planner::MeasurementSetting) -> Self {
        Self {
            prepared: s.prepared_input(),
            observable: s.observable.clone(),
            w: s.w,
            sign: crate::sim_exact::sign_correction(s),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Piece {
    System(usize),
    Coupling(usize),
}

/// Contributing cluster of one Dyson order and split, for debugging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub n: usize,
    pub l: usize,
    pub pieces: Vec<String>,
    pub re: f64,
    pub im: f64,
}

/// All perfect matchings of `0..k` (explicit enumeration).
pub fn perfect_matchings(k: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(rest: &[usize], cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        let first = rest[0];
        for j in 1..rest.len() {
            let others: Vec<usize> = rest[1..]
                .iter()
                .copied()
                .filter(|&x| x != rest[j])
                .collect();
            cur.push((first, rest[j]));
            rec(&others, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k % 2 == 0 {
        rec(&(0..k).collect::<Vec<_>>(), &mut Vec::new(), &mut out);
    }
    out
}

/// Wick sum `sum_pairings prod M[i][j]` (i < j) by expansion along the first
/// slot, skipping zero entries.
pub fn wick_sum(m: &[Vec<C>]) -> C {
    fn rec(m: &[Vec<C>], rest: &[usize]) -> C {
        if rest.is_empty() {
            return C::new(1.0, 0.0);
        }
        let first = rest[0];
        let mut acc = C::new(0.0, 0.0);
        for j in 1..rest.len() {
            let v = m[first][rest[j]];
            if v == C::new(0.0, 0.0) {
                continue;
            }
            let others: Vec<usize> = rest[1..]
                .iter()
                .copied()
                .filter(|&x| x != rest[j])
                .collect();
            acc += v * rec(m, &others);
        }
        acc
    }
    if m.len() % 2 == 1 {
        return C::new(0.0, 0.0);
    }
    rec(m, &(0..m.len()).collect::<Vec<_>>())
}

/// Weak compositions of `total` into `parts` non-negative parts.
fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
    if parts == 0 {
        return if total == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in 0..=total {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

struct Evaluator<'a> {
    model: &'a DysonModel,
    query: &'a TraceQuery,
    m: u32,
    cache: std::cell::RefCell<BTreeMap<(Vec<u32>, Vec<(usize, usize)>, usize, usize), f64>>,
}

impl Evaluator<'_> {
    fn pauli(&self, p: Piece) -> &PauliString {
        match p {
            Piece::System(a) => &self.model.system[a].0,
            Piece::Coupling(b) => &self.model.couplings[b],
        }
    }

    fn coefficient(&self, z: &[u32], slots: &[(usize, usize)], n: usize, l: usize) -> f64 {
        let key = (z.to_vec(), slots.to_vec(), n, l);
        if let Some(v) = self.cache.borrow().get(&key) {
            return *v;
        }
        let v = integral_coefficient(z, slots, n, l, self.m);
        self.cache.borrow_mut().insert(key, v);
        v
    }

    /// A cluster vanishes when some system-only component touches neither the
    /// observable, the input, the gate nor any coupling.
    fn pruned(&self, seq: &[Piece]) -> bool {
        let anchor: Region = self
            .query
            .observable
            .support()
            .union(&self.query.prepared.support())
            .union(&self.query.w.support());
        let k = seq.len();
        let mut parent: Vec<usize> = (0..=k).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        let supports: Vec<Region> = seq.iter().map(|&p| self.pauli(p).support()).collect();
        for i in 0..k {
            if !supports[i].is_disjoint(&anchor) || matches!(seq[i], Piece::Coupling(_)) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, k));
                parent[a] = b;
            }
            for j in i + 1..k {
                if !supports[i].is_disjoint(&supports[j]) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let root = find(&mut parent, k);
        (0..k).any(|i| find(&mut parent, i) != root)
    }

    /// Kernel factor of a pairing of environment slots: for each pair
    /// `(earlier, later)` in operator order returns the slot pair in time
    /// order and the Taylor coefficients by derivative order.
    fn pair_kernel(
        &self,
        b_first: usize,
        k_first: usize,
        b_second: usize,
        k_second: usize,
        max_z: u32,
    ) -> ((usize, usize), Vec<C>) {
        if k_first < k_second {
            // the first operator carries the later time
            let vals = (0..=max_z)
                .map(|z| self.model.kernel.get(b_first, b_second, z))
                .collect();
            ((k_first, k_second), vals)
        } else {
            let vals = (0..=max_z)
                .map(|z| self.model.kernel.get(b_second, b_first, z).conj())
                .collect();
            ((k_second, k_first), vals)
        }
    }

    /// Contribution of one ordered sequence of pieces at split `l`.
    fn sequence_value(&self, seq: &[Piece], l: usize) -> C {
        let n = seq.len();
        let u = seq
            .iter()
            .filter(|p| matches!(p, Piece::Coupling(_)))
            .count();
        if u % 2 == 1 {
            return C::new(0.0, 0.0);
        }
        let max_z = self.m - n as u32;
        let lam: f64 = seq
            .iter()
            .map(|p| match p {
                Piece::System(a) => self.model.system[*a].1,
                Piece::Coupling(_) => 1.0,
            })
            .product();
        let mut total = C::new(0.0, 0.0);
        for mask in 0u32..(1 << n) {
            // bit k set: piece k acts from the right
            let right = |k: usize| mask & (1 << k) != 0;
            let mut inner = PauliString::identity();
            for k in l..n {
                if !right(k) {
                    inner = inner.multiply(self.pauli(seq[k]));
                }
            }
            inner = inner.multiply(&self.query.prepared);
            for k in (l..n).rev() {
                if right(k) {
                    inner = inner.multiply(self.pauli(seq[k]));
                }
            }
            let mut op = PauliString::identity();
            for k in 0..l {
                if !right(k) {
                    op = op.multiply(self.pauli(seq[k]));
                }
            }
            op = op.multiply(&self.query.w.conj(&inner));
            for k in (0..l).rev() {
                if right(k) {
                    op = op.multiply(self.pauli(seq[k]));
                }
            }
            let tr = normalized(&self.query.observable.multiply(&op));
            if tr == C::new(0.0, 0.0) {
                continue;
            }
            let n_right = mask.count_ones();
            let sign = if n_right % 2 == 0 { 1.0 } else { -1.0 };
            // environment operator order: right-acting (decreasing time index), then left-acting
            let mut env: Vec<(usize, usize)> = Vec::with_capacity(u);
            for k in (0..n).rev() {
                if let Piece::Coupling(b) = seq[k] {
                    if right(k) {
                        env.push((b, k + 1));
                    }
                }
            }
            for k in 0..n {
                if let Piece::Coupling(b) = seq[k] {
                    if !right(k) {
                        env.push((b, k + 1));
                    }
                }
            }
            let env_value = self.env_integral(&env, n, l, max_z);
            total += tr * sign * env_value;
        }
        let phase = match n % 4 {
            0 => C::new(1.0, 0.0),
            1 => C::new(0.0, -1.0),
            2 => C::new(-1.0, 0.0),
            _ => C::new(0.0, 1.0),
        };
        total * phase * lam
    }

    /// Sum over pairings of the environment slots and kernel orders of the
    /// kernel products times the integral coefficients.
    fn env_integral(&self, env: &[(usize, usize)], n: usize, l: usize, max_z: u32) -> C {
        let mut acc = C::new(0.0, 0.0);
        let mut pairing_stack: Vec<((usize, usize), Vec<C>)> = Vec::new();
        self.pairings(
            env,
            &(0..env.len()).collect::<Vec<_>>(),
            max_z,
            &mut pairing_stack,
            &mut |pairs| {
                let slots: Vec<(usize, usize)> = pairs.iter().map(|p| p.0).collect();
                for z in compositions(max_z, pairs.len()) {
                    let mut k = C::new(1.0, 0.0);
                    for (p, &zi) in pairs.iter().zip(&z) {
                        k *= p.1[zi as usize];
                    }
                    if k == C::new(0.0, 0.0) {
                        continue;
                    }
                    acc += k * self.coefficient(&z, &slots, n, l);
                }
            },
        );
        acc
    }

    fn pairings(
        &self,
        env: &[(usize, usize)],
        rest: &[usize],
        max_z: u32,
        stack: &mut Vec<((usize, usize), Vec<C>)>,
        f: &mut dyn FnMut(&[((usize, usize), Vec<C>)]),
    ) {
        if rest.is_empty() {
            f(stack);
            return;
        }
        let first = rest[0];
        for j in 1..rest.len() {
            let (b1, k1) = env[first];
            let (b2, k2) = env[rest[j]];
            let pk = self.pair_kernel(b1, k1, b2, k2, max_z);
            // sparsity: a pair whose kernel vanishes at every order drops out
            if pk.1.iter().all(|v| *v == C::new(0.0, 0.0)) {
                continue;
            }
            let others: Vec<usize> = rest[1..]
                .iter()
                .copied()
                .filter(|&x| x != rest[j])
                .collect();
            stack.push(pk);
            self.pairings(env, &others, max_z, stack, f);
            stack.pop();
        }
    }
}

fn pieces(model: &DysonModel, system: bool) -> Vec<Piece> {
    let mut v: Vec<Piece> = Vec::new();
    if system {
        v.extend((0..model.system.len()).map(Piece::System));
    }
    v.extend((0..model.couplings.len()).map(Piece::Coupling));
    v
}

fn for_each_sequence(alphabet: &[Piece], n: usize, f: &mut dyn FnMut(&[Piece])) {
    let mut idx = vec![0usize; n];
    if alphabet.is_empty() && n > 0 {
        return;
    }
    loop {
        let seq: Vec<Piece> = idx.iter().map(|&i| alphabet[i]).collect();
        f(&seq);
        let mut k = n;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < alphabet.len() {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Which pieces a Dyson term may contain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PieceSet {
    All,
    SystemOnly,
    CouplingsOnly,
}

/// Contribution of Dyson order `n` to the `m`-th derivative at 0, with an
/// optional audit of non-zero clusters.
pub fn dyson_term(
    model: &DysonModel,
    query: &TraceQuery,
    m: u32,
    n: usize,
    set: PieceSet,
    prune: bool,
    mut audit: Option<&mut Vec<AuditEntry>>,
) -> C {
    if n == 0 || n as u32 > m {
        return C::new(0.0, 0.0);
    }
    let ev = Evaluator {
        model,
        query,
        m,
        cache: Default::default(),
    };
    let alphabet: Vec<Piece> = match set {
        PieceSet::All => pieces(model, true),
        PieceSet::SystemOnly => pieces(model, true)
            .into_iter()
            .filter(|p| matches!(p, Piece::System(_)))
            .collect(),
        PieceSet::CouplingsOnly => pieces(model, false),
    };
    let mut acc = C::new(0.0, 0.0);
    for_each_sequence(&alphabet, n, &mut |seq| {
        if prune && ev.pruned(seq) {
            return;
        }
        for l in 0..=n {
            let v = ev.sequence_value(seq, l);
            if v != C::new(0.0, 0.0) {
                acc += v;
                if let Some(a) = audit.as_deref_mut() {
                    a.push(AuditEntry {
                        n,
                        l,
                        pieces: seq
                            .iter()
                            .map(|p| match p {
                                Piece::System(k) => format!("H{k}"),
                                Piece::Coupling(k) => format!("V{k}"),
                            })
                            .collect(),
                        re: v.re,
                        im: v.im,
                    });
                }
            }
        }
    });
    acc * query.sign
}

/// Offset `f^{(m)}` for a measured trace, assembled from the current
/// estimates. For `m = 2` this is the system-only double commutator (with the
/// gate); for `m >= 3` the Dyson orders `3..=m`.
pub fn offset_m(model: &DysonModel, query: &TraceQuery, m: u32) -> Result<f64> {
    offset_with_audit(model, query, m, None)
}

pub fn offset_with_audit(
    model: &DysonModel,
    query: &TraceQuery,
    m: u32,
    mut audit: Option<&mut Vec<AuditEntry>>,
) -> Result<f64> {
    if m < 2 {
        return Err(Error::Domain(format!("offsets start at order 2, got {m}")));
    }
    if m > 4 {
        eprintln!("warning: offset order {m} is beyond the validated range (m <= 4)");
    }
    if m >= 3 && !model.couplings.is_empty() && model.kernel.max_order().is_none_or(|k| k + 3 < m) {
        return Err(Error::MissingEstimate(format!(
            "kernel derivatives up to order {} are needed for the order-{m} offset",
            m - 3
        )));
    }
    let v = if m == 2 {
        dyson_term(model, query, 2, 2, PieceSet::SystemOnly, true, audit)
    } else {
        let mut acc = C::new(0.0, 0.0);
        for n in 3..=m as usize {
            acc += dyson_term(
                model,
                query,
                m,
                n,
                PieceSet::All,
                true,
                audit.as_deref_mut(),
            );
        }
        acc
    };
    if v.im.abs() > 1e-9 * (1.0 + v.re.abs()) {
        return Err(Error::Domain(format!("offset has imaginary part {}", v.im)));
    }
    Ok(v.re)
}

/// Full `d^m B / dt^m` at 0 from the Dyson series (all orders `1..=m`).
pub fn dyson_derivative(model: &DysonModel, query: &TraceQuery, m: u32) -> C {
    (1..=m as usize)
        .map(|n| dyson_term(model, query, m, n, PieceSet::All, true, None))
        .sum()
}
