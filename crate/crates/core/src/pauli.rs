//! Pauli-string algebra with exact phase tracking.
//!
//! A [`PauliString`] is a sparse map from site index to a non-identity axis,
//! carrying a global factor `i^phase`. Phases are integers mod 4, so every
//! product and trace in this module is exact.
//!
//! Text grammar (used in config files and reports):
//!
//! ```text
//! pauli   := [phase] term*
//! phase   := "+" | "-" | "i" | "+i" | "-i"
//! term    := axis site            e.g. X0, Z12
//! axis    := "X" | "Y" | "Z"
//! ```
//!
//! Terms are whitespace separated; `I` (or an empty string) is the identity.
//! Repeating a site is an error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    /// Product of two single-site Paulis: `(phase, axis)` with `None` for identity.
    fn mul(self, other: Axis) -> (u8, Option<Axis>) {
        use Axis::*;
        match (self, other) {
            (X, X) | (Y, Y) | (Z, Z) => (0, None),
            (X, Y) => (1, Some(Z)),
            (Y, Z) => (1, Some(X)),
            (Z, X) => (1, Some(Y)),
            (Y, X) => (3, Some(Z)),
            (Z, Y) => (3, Some(X)),
            (X, Z) => (3, Some(Y)),
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Axis::X => 'X',
            Axis::Y => 'Y',
            Axis::Z => 'Z',
        }
    }

    pub fn matrix(self) -> [[Complex64; 2]; 2] {
        let o = Complex64::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        let i = Complex64::new(0.0, 1.0);
        match self {
            Axis::X => [[o, one], [one, o]],
            Axis::Y => [[o, -i], [i, o]],
            Axis::Z => [[one, o], [o, -one]],
        }
    }
}

/// `i^k` as a complex number.
pub fn phase_value(k: u8) -> Complex64 {
    match k % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PauliString {
    sites: BTreeMap<usize, Axis>,
    phase: u8,
}

impl PauliString {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn single(site: usize, axis: Axis) -> Self {
        let mut sites = BTreeMap::new();
        sites.insert(site, axis);
        Self { sites, phase: 0 }
    }

    /// Builds a phase-free string; later entries for a repeated site win.
    pub fn from_sites<I: IntoIterator<Item = (usize, Axis)>>(it: I) -> Self {
        Self {
            sites: it.into_iter().collect(),
            phase: 0,
        }
    }

    pub fn with_phase(mut self, phase_power: u8) -> Self {
        self.phase = phase_power % 4;
        self
    }

    pub fn phase_power(&self) -> u8 {
        self.phase
    }

    pub fn phase(&self) -> Complex64 {
        phase_value(self.phase)
    }

    /// Same sites, phase dropped.
    pub fn unphased(&self) -> Self {
        Self {
            sites: self.sites.clone(),
            phase: 0,
        }
    }

    pub fn sites(&self) -> impl Iterator<Item = (usize, Axis)> + '_ {
        self.sites.iter().map(|(&s, &a)| (s, a))
    }

    pub fn axis_at(&self, site: usize) -> Option<Axis> {
        self.sites.get(&site).copied()
    }

    pub fn weight(&self) -> usize {
        self.sites.len()
    }

    /// True when no site carries a Pauli (the phase is ignored).
    pub fn is_identity(&self) -> bool {
        self.sites.is_empty()
    }

    /// Hermitian iff the phase is real.
    pub fn is_hermitian(&self) -> bool {
        self.phase % 2 == 0
    }

    pub fn support(&self) -> Region {
        Region::from_iter(self.sites.keys().copied())
    }

    pub fn max_site(&self) -> Option<usize> {
        self.sites.keys().next_back().copied()
    }

    pub fn multiply(&self, other: &PauliString) -> PauliString {
        let mut phase = self.phase + other.phase;
        let mut sites = self.sites.clone();
        for (&s, &b) in &other.sites {
            match sites.get(&s).copied() {
                None => {
                    sites.insert(s, b);
                }
                Some(a) => {
                    let (p, r) = a.mul(b);
                    phase += p;
                    match r {
                        Some(c) => {
                            sites.insert(s, c);
                        }
                        None => {
                            sites.remove(&s);
                        }
                    }
                }
            }
        }
        PauliString {
            sites,
            phase: phase % 4,
        }
    }

    pub fn adjoint(&self) -> PauliString {
        PauliString {
            sites: self.sites.clone(),
            phase: (4 - self.phase) % 4,
        }
    }

    pub fn neg(&self) -> PauliString {
        PauliString {
            sites: self.sites.clone(),
            phase: (self.phase + 2) % 4,
        }
    }

    pub fn times_i(&self) -> PauliString {
        PauliString {
            sites: self.sites.clone(),
            phase: (self.phase + 1) % 4,
        }
    }

    pub fn commutes(&self, other: &PauliString) -> bool {
        chi(self, other) == 0
    }

    /// Restriction to `region` (phase dropped).
    pub fn restrict(&self, region: &Region) -> PauliString {
        PauliString::from_sites(self.sites().filter(|(s, _)| region.contains(*s)))
    }

    /// Restriction to the complement of `region` (phase dropped).
    pub fn restrict_outside(&self, region: &Region) -> PauliString {
        PauliString::from_sites(self.sites().filter(|(s, _)| !region.contains(*s)))
    }

    /// Same sites and phase?  (Equality already does this; provided for clarity.)
    pub fn same_sites(&self, other: &PauliString) -> bool {
        self.sites == other.sites
    }

    /// Dense `2^n x 2^n` matrix, site 0 being the most significant qubit.
    pub fn to_dense(&self, n_qubits: usize) -> DMatrix<Complex64> {
        let dim = 1usize << n_qubits;
        let mut m = DMatrix::zeros(dim, dim);
        for col in 0..dim {
            let (row, amp) = self.apply_basis(col, n_qubits);
            m[(row, col)] = amp;
        }
        m
    }

    /// Image of computational basis state `col` as `(row, amplitude)`.
    pub fn apply_basis(&self, col: usize, n_qubits: usize) -> (usize, Complex64) {
        let mut row = col;
        let mut amp = self.phase();
        for (&s, &a) in &self.sites {
            let bit = 1usize << (n_qubits - 1 - s);
            let set = col & bit != 0;
            match a {
                Axis::X => row ^= bit,
                Axis::Y => {
                    row ^= bit;
                    amp *= if set {
                        Complex64::new(0.0, -1.0)
                    } else {
                        Complex64::new(0.0, 1.0)
                    };
                }
                Axis::Z => {
                    if set {
                        amp = -amp;
                    }
                }
            }
        }
        (row, amp)
    }

    /// Enumerates all `4^|region|` phase-free strings supported in `region`,
    /// identity first, in a fixed lexicographic order.
    pub fn all_on(region: &Region) -> Vec<PauliString> {
        let sites: Vec<usize> = region.iter().collect();
        let mut out = Vec::with_capacity(1 << (2 * sites.len()));
        let total = 1usize << (2 * sites.len());
        for code in 0..total {
            let mut p = BTreeMap::new();
            for (k, &s) in sites.iter().enumerate() {
                match (code >> (2 * (sites.len() - 1 - k))) & 3 {
                    1 => {
                        p.insert(s, Axis::X);
                    }
                    2 => {
                        p.insert(s, Axis::Y);
                    }
                    3 => {
                        p.insert(s, Axis::Z);
                    }
                    _ => {}
                }
            }
            out.push(PauliString { sites: p, phase: 0 });
        }
        out
    }
}

/// 1 if `p` and `q` anticommute, 0 if they commute.
pub fn chi(p: &PauliString, q: &PauliString) -> u8 {
    let (small, large) = if p.sites.len() <= q.sites.len() {
        (p, q)
    } else {
        (q, p)
    };
    let mut odd = 0u8;
    for (s, a) in &small.sites {
        if let Some(b) = large.sites.get(s) {
            if a != b {
                odd ^= 1;
            }
        }
    }
    odd
}

pub fn multiply(p: &PauliString, q: &PauliString) -> PauliString {
    p.multiply(q)
}

/// `Tr(P_1 P_2 ... P_k) / 2^n`: the tracked phase if the product is
/// proportional to the identity, else zero.
pub fn normalized_trace(monomial: &[PauliString], n_qubits: usize) -> Complex64 {
    debug_assert!(monomial
        .iter()
        .all(|p| p.max_site().map_or(true, |s| s < n_qubits)));
    let prod = monomial
        .iter()
        .fold(PauliString::identity(), |acc, p| acc.multiply(p));
    if prod.is_identity() {
        prod.phase()
    } else {
        Complex64::new(0.0, 0.0)
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.phase {
            0 => "",
            1 => "i",
            2 => "-",
            _ => "-i",
        };
        if self.sites.is_empty() {
            return write!(f, "{prefix}I");
        }
        write!(f, "{prefix}")?;
        for (k, (s, a)) in self.sites.iter().enumerate() {
            if k > 0 {
                write!(f, " ")?;
            }
            write!(f, "{}{}", a.symbol(), s)?;
        }
        Ok(())
    }
}

impl FromStr for PauliString {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self, Error> {
        let bad = |why: &str| Error::Parse(format!("pauli string {text:?}: {why}"));
        let mut rest = text.trim();
        let mut phase = 0u8;
        for (tag, p) in [("-i", 3u8), ("+i", 1), ("-", 2), ("+", 0)] {
            if let Some(r) = rest.strip_prefix(tag) {
                phase = p;
                rest = r.trim_start();
                break;
            }
        }
        // A bare leading `i` is a phase only if followed by whitespace or an axis letter.
        if phase == 0 || phase == 2 {
            if let Some(r) = rest.strip_prefix('i') {
                phase = (phase + 1) % 4;
                rest = r.trim_start();
            }
        }
        let mut sites = BTreeMap::new();
        for tok in rest.split_whitespace() {
            if tok == "I" {
                continue;
            }
            let mut chars = tok.chars();
            let axis = match chars.next() {
                Some('X') => Axis::X,
                Some('Y') => Axis::Y,
                Some('Z') => Axis::Z,
                _ => return Err(bad("expected X, Y or Z")),
            };
            let site: usize = chars.as_str().parse().map_err(|_| bad("bad site index"))?;
            if sites.insert(site, axis).is_some() {
                return Err(bad("repeated site"));
            }
        }
        Ok(PauliString { sites, phase })
    }
}

impl Serialize for PauliString {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PauliString {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered, deduplicated set of sites.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region(BTreeSet<usize>);

impl Region {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, site: usize) -> bool {
        self.0.contains(&site)
    }

    pub fn insert(&mut self, site: usize) -> bool {
        self.0.insert(site)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &Region) -> Region {
        Region(self.0.union(&other.0).copied().collect())
    }

    pub fn intersection(&self, other: &Region) -> Region {
        Region(self.0.intersection(&other.0).copied().collect())
    }

    pub fn difference(&self, other: &Region) -> Region {
        Region(self.0.difference(&other.0).copied().collect())
    }

    /// Sites of `0..n_sites` not in `self`.
    pub fn complement(&self, n_sites: usize) -> Region {
        Region((0..n_sites).filter(|s| !self.0.contains(s)).collect())
    }

    pub fn is_disjoint(&self, other: &Region) -> bool {
        self.0.is_disjoint(&other.0)
    }

    pub fn is_subset(&self, other: &Region) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn first(&self) -> Option<usize> {
        self.0.iter().next().copied()
    }
}

impl FromIterator<usize> for Region {
    fn from_iter<I: IntoIterator<Item = usize>>(it: I) -> Self {
        Region(it.into_iter().collect())
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, s) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{s}")?;
        }
        write!(f, "}}")
    }
}

/// Lattice geometry for distance and diameter queries; the algebra itself is
/// lattice agnostic.
pub trait Lattice {
    fn n_sites(&self) -> usize;
    fn distance(&self, a: usize, b: usize) -> usize;

    fn diameter(&self, region: &Region) -> usize {
        let sites: Vec<usize> = region.iter().collect();
        let mut d = 0;
        for (k, &a) in sites.iter().enumerate() {
            for &b in &sites[k + 1..] {
                d = d.max(self.distance(a, b));
            }
        }
        d
    }
}

/// Open 1-D chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub n: usize,
}

impl Lattice for Chain {
    fn n_sites(&self) -> usize {
        self.n
    }

    fn distance(&self, a: usize, b: usize) -> usize {
        a.abs_diff(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> PauliString {
        s.parse().unwrap()
    }

    #[test]
    fn product_table() {
        assert_eq!(p("X1").multiply(&p("Y1")), p("i Z1"));
        assert_eq!(p("X1").multiply(&p("X1")), PauliString::identity());
        assert_eq!(p("X1 Z2").multiply(&p("Y1 Z2")), p("i Z1"));
    }

    #[test]
    fn chi_examples() {
        assert_eq!(chi(&p("X1"), &p("Z1")), 1);
        assert_eq!(chi(&p("X1"), &p("X2")), 0);
        assert_eq!(chi(&p("X1 X2"), &p("Z1 Z2")), 0);
    }

    #[test]
    fn trace_examples() {
        assert_eq!(
            normalized_trace(&[p("X1"), p("X1")], 2),
            Complex64::new(1.0, 0.0)
        );
        assert_eq!(
            normalized_trace(&[p("X1"), p("Y1")], 2),
            Complex64::new(0.0, 0.0)
        );
        assert_eq!(
            normalized_trace(&[p("X0"), p("Y0"), p("X0"), p("Y0")], 1),
            Complex64::new(-1.0, 0.0)
        );
    }

    #[test]
    fn text_round_trip() {
        for s in ["I", "-I", "X0", "i Z3", "-i X1 Y2 Z7", "-Y4"] {
            let q = p(s);
            assert_eq!(q.to_string().parse::<PauliString>().unwrap(), q);
        }
        assert_eq!(p("iX0"), p("i X0"));
        assert!("X1 X1".parse::<PauliString>().is_err());
        assert!("Q3".parse::<PauliString>().is_err());
    }

    #[test]
    fn enumerate_region() {
        let r = Region::from_iter([2, 5]);
        let all = PauliString::all_on(&r);
        assert_eq!(all.len(), 16);
        assert!(all[0].is_identity());
        let set: BTreeSet<_> = all.iter().cloned().collect();
        assert_eq!(set.len(), 16);
    }
}
