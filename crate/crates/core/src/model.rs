//! Noise models: system Hamiltonian, coupling Paulis, memory kernels and
//! Hamiltonian ensembles, plus the free-fermion chain used by the Gaussian
//! backend.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pauli::{Chain, Lattice, PauliString, Region};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamTerm {
    pub pauli: PauliString,
    pub coeff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingTerm {
    pub pauli: PauliString,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCoupling {
    /// Index into the coupling list.
    pub term: usize,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

impl ModeCoupling {
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

/// One exponential contribution `sum_ab v_a* v_b exp((i eps - gamma/2) t)`, t >= 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMode {
    pub couplings: Vec<ModeCoupling>,
    pub epsilon: f64,
    pub gamma: f64,
}

impl KernelMode {
    pub fn coupling(&self, term: usize) -> Complex64 {
        self.couplings
            .iter()
            .filter(|c| c.term == term)
            .map(ModeCoupling::value)
            .sum()
    }

    pub fn rate(&self) -> Complex64 {
        Complex64::new(-self.gamma / 2.0, self.epsilon)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelEntry {
    pub a: usize,
    pub b: usize,
    pub m: u32,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

/// Tabulated right-derivatives `K_ab^{(m)}(0+)`.
///
/// `smooth` records whether the kernel is analytic through `t = 0`; only then
/// do the Hermiticity and diagonal-parity relations between entries hold.
/// Exponential modes with loss have a kink at the origin.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "KernelTableFile", into = "KernelTableFile")]
pub struct KernelTable {
    entries: BTreeMap<(usize, usize, u32), Complex64>,
    pub smooth: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct KernelTableFile {
    #[serde(default = "default_true")]
    smooth: bool,
    #[serde(default)]
    entries: Vec<KernelEntry>,
}

fn default_true() -> bool {
    true
}

impl From<KernelTableFile> for KernelTable {
    fn from(f: KernelTableFile) -> Self {
        let mut t = KernelTable::new(f.smooth);
        for e in f.entries {
            t.set(e.a, e.b, e.m, Complex64::new(e.re, e.im));
        }
        t
    }
}

impl From<KernelTable> for KernelTableFile {
    fn from(t: KernelTable) -> Self {
        KernelTableFile {
            smooth: t.smooth,
            entries: t
                .entries
                .iter()
                .map(|(&(a, b, m), v)| KernelEntry {
                    a,
                    b,
                    m,
                    re: v.re,
                    im: v.im,
                })
                .collect(),
        }
    }
}

impl KernelTable {
    pub fn new(smooth: bool) -> Self {
        Self {
            entries: BTreeMap::new(),
            smooth,
        }
    }

    pub fn get(&self, a: usize, b: usize, m: u32) -> Complex64 {
        self.entries.get(&(a, b, m)).copied().unwrap_or_default()
    }

    pub fn contains(&self, a: usize, b: usize, m: u32) -> bool {
        self.entries.contains_key(&(a, b, m))
    }

    pub fn set(&mut self, a: usize, b: usize, m: u32, value: Complex64) {
        self.entries.insert((a, b, m), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize, u32), Complex64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn max_order(&self) -> Option<u32> {
        self.entries.keys().map(|k| k.2).max()
    }

    /// Ordered pairs with at least one stored entry.
    pub fn pairs(&self) -> BTreeSet<(usize, usize)> {
        self.entries.keys().map(|&(a, b, _)| (a, b)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSpec {
    Modes(Vec<KernelMode>),
    Table(KernelTable),
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Modes(Vec::new())
    }
}

impl KernelSpec {
    pub fn is_smooth(&self) -> bool {
        match self {
            KernelSpec::Modes(modes) => modes.iter().all(|m| m.gamma == 0.0),
            KernelSpec::Table(t) => t.smooth,
        }
    }

    /// Kernel value `K_ab(t)` for `t >= 0` (mode specs only; tables return the
    /// Taylor polynomial built from their entries).
    pub fn value(&self, a: usize, b: usize, t: f64) -> Complex64 {
        match self {
            KernelSpec::Modes(modes) => modes
                .iter()
                .map(|l| l.coupling(a).conj() * l.coupling(b) * (l.rate() * t).exp())
                .sum(),
            KernelSpec::Table(table) => {
                let mut acc = Complex64::default();
                let mut fact = 1.0;
                for m in 0..=table.max_order().unwrap_or(0) {
                    if m > 0 {
                        fact *= m as f64;
                    }
                    acc += table.get(a, b, m) * t.powi(m as i32) / fact;
                }
                acc
            }
        }
    }

    /// Ordered pairs `(a, b)` whose kernel is not identically zero.
    pub fn pairs(&self) -> BTreeSet<(usize, usize)> {
        match self {
            KernelSpec::Modes(modes) => {
                let mut out = BTreeSet::new();
                for l in modes {
                    for x in &l.couplings {
                        for y in &l.couplings {
                            if x.value().norm() > 0.0 && y.value().norm() > 0.0 {
                                out.insert((x.term, y.term));
                            }
                        }
                    }
                }
                out
            }
            KernelSpec::Table(t) => t
                .iter()
                .filter(|(_, v)| v.norm() > 0.0)
                .map(|((a, b, _), _)| (a, b))
                .collect(),
        }
    }

    /// Derived table of derivatives up to `max_m`.
    pub fn to_table(&self, max_m: u32) -> KernelTable {
        match self {
            KernelSpec::Table(t) => t.clone(),
            KernelSpec::Modes(_) => {
                let mut t = KernelTable::new(self.is_smooth());
                for (a, b) in self.pairs() {
                    for m in 0..=max_m {
                        t.set(a, b, m, kernel_derivative(self, a, b, m));
                    }
                }
                t
            }
        }
    }
}

/// `K_ab^{(m)}(0+)`; zero for pairs the kernel does not couple.
pub fn kernel_derivative(spec: &KernelSpec, a: usize, b: usize, m: u32) -> Complex64 {
    match spec {
        KernelSpec::Modes(modes) => modes
            .iter()
            .map(|l| l.coupling(a).conj() * l.coupling(b) * l.rate().powu(m))
            .sum(),
        KernelSpec::Table(t) => t.get(a, b, m),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub k_s: usize,
    pub k_se: usize,
    /// Largest number of other terms overlapping a coupling term.
    pub d: usize,
    /// Largest number of conflicting pairs over all targets.
    pub d0: usize,
    pub a0: usize,
    pub s: usize,
}

/// Jointly Gaussian Hamiltonian coefficients, one mean per Hamiltonian term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub means: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl EnsembleSpec {
    /// Coefficients `Lambda = A theta` for parameters `theta ~ N(mu, sigma)`.
    pub fn from_parameters(loading: &DMatrix<f64>, mu: &[f64], sigma: &DMatrix<f64>) -> Self {
        let means = loading * nalgebra::DVector::from_column_slice(mu);
        let cov = loading * sigma * loading.transpose();
        EnsembleSpec {
            means: means.iter().copied().collect(),
            covariance: (0..cov.nrows())
                .map(|i| cov.row(i).iter().copied().collect())
                .collect(),
        }
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let n = self.means.len();
        DMatrix::from_fn(n, n, |i, j| self.covariance[i][j])
    }

    /// `B` with `B B^T = Sigma`, from the eigendecomposition (handles rank
    /// deficiency). Fails if an eigenvalue is negative beyond tolerance.
    pub fn factor(&self) -> Result<DMatrix<f64>> {
        let s = self.covariance_matrix();
        let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let eig = SymmetricEigen::new(s);
        let mut b = eig.eigenvectors.clone();
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam < -1e-10 * scale {
                return Err(Error::InvalidModel(format!(
                    "covariance not PSD (eigenvalue {lam:.3e})"
                )));
            }
            // round-off eigenvalues of a rank-deficient covariance count as zero
            let r = if lam > 1e-12 * scale { lam.sqrt() } else { 0.0 };
            b.column_mut(k).scale_mut(r);
        }
        Ok(b)
    }
}

/// Spin noise model. Index sets of Hamiltonian and coupling terms are kept
/// disjoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub n_qubits: usize,
    #[serde(default)]
    pub hamiltonian: Vec<HamTerm>,
    #[serde(default)]
    pub couplings: Vec<CouplingTerm>,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub metadata: Option<ModelMetadata>,
    #[serde(default)]
    pub ensemble: Option<EnsembleSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    HermiticityParity,
    DiagonalParity,
    Sparsity,
    Locality,
    Metadata,
    Ensemble,
    IndexOverlap,
    NonFinite,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::HermiticityParity => "Hermiticity parity",
            ViolationKind::DiagonalParity => "diagonal parity",
            ViolationKind::Sparsity => "sparsity",
            ViolationKind::Locality => "locality",
            ViolationKind::Metadata => "metadata",
            ViolationKind::Ensemble => "ensemble",
            ViolationKind::IndexOverlap => "index overlap",
            ViolationKind::NonFinite => "non-finite",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.detail)
    }
}

const PARITY_TOL: f64 = 1e-9;

/// Parity violations of a kernel table (empty for non-smooth tables).
pub fn table_violations(table: &KernelTable) -> Vec<Violation> {
    let mut out = Vec::new();
    if !table.smooth {
        return out;
    }
    for ((a, b, m), v) in table.iter() {
        let tol = PARITY_TOL * (1.0 + v.norm());
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        if a == b {
            let bad = if m % 2 == 0 {
                v.im.abs() > tol
            } else {
                v.re.abs() > tol
            };
            if bad {
                out.push(Violation {
                    kind: ViolationKind::DiagonalParity,
                    detail: format!(
                        "K^({m})_({a},{a})(0) = {v} must be {}",
                        if m % 2 == 0 { "real" } else { "imaginary" }
                    ),
                });
            }
        } else if a < b || !table.contains(b, a, m) {
            let w = table.get(b, a, m);
            let re_ok = (v.re - sign * w.re).abs() <= tol;
            let im_ok = (v.im + sign * w.im).abs() <= tol;
            if !(re_ok && im_ok) {
                out.push(Violation {
                    kind: ViolationKind::HermiticityParity,
                    detail: format!("K^({m})_({a},{b})(0) = {v} vs K^({m})_({b},{a})(0) = {w}"),
                });
            }
        }
    }
    out
}

impl NoiseModel {
    pub fn hamiltonian_coeffs(&self) -> Vec<f64> {
        self.hamiltonian.iter().map(|t| t.coeff).collect()
    }

    pub fn with_coeffs(&self, coeffs: &[f64]) -> NoiseModel {
        let mut m = self.clone();
        for (t, &c) in m.hamiltonian.iter_mut().zip(coeffs) {
            t.coeff = c;
        }
        m
    }

    /// Metadata derived from the term lists (declared metadata is checked
    /// against this by [`validate`]).
    pub fn derived_metadata(&self) -> ModelMetadata {
        let chain = Chain { n: self.n_qubits };
        let k_s = self
            .hamiltonian
            .iter()
            .map(|t| t.pauli.weight())
            .max()
            .unwrap_or(0);
        let k_se = self
            .couplings
            .iter()
            .map(|t| t.pauli.weight())
            .max()
            .unwrap_or(0);
        let a0 = self
            .couplings
            .iter()
            .map(|t| chain.diameter(&t.pauli.support()))
            .max()
            .unwrap_or(0);
        let supports: Vec<Region> = self.couplings.iter().map(|t| t.pauli.support()).collect();
        let mut d = 0;
        for (i, s) in supports.iter().enumerate() {
            let n = supports
                .iter()
                .enumerate()
                .filter(|(j, o)| *j != i && !o.is_disjoint(s))
                .count();
            d = d.max(n);
        }
        let paulis: Vec<PauliString> = self.couplings.iter().map(|c| c.pauli.clone()).collect();
        let mut d0 = 0;
        for a in 0..paulis.len() {
            for b in 0..paulis.len() {
                d0 = d0.max(crate::planner::conflicting_pairs(a, b, &paulis).len());
            }
        }
        let mut partners: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (a, b) in self.kernel.pairs() {
            if a != b {
                partners.entry(a).or_default().insert(b);
            }
        }
        let s = partners.values().map(BTreeSet::len).max().unwrap_or(0);
        ModelMetadata {
            k_s,
            k_se,
            d,
            d0,
            a0,
            s,
        }
    }
}

/// All invariant violations of a spin model; empty iff the model is valid.
pub fn validate(model: &NoiseModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let derived = model.derived_metadata();
    let meta = model.metadata.unwrap_or(derived);
    for (i, t) in model.hamiltonian.iter().enumerate() {
        if !t.coeff.is_finite() {
            out.push(Violation {
                kind: ViolationKind::NonFinite,
                detail: format!("hamiltonian term {i}"),
            });
        }
        if t.pauli.weight() > meta.k_s {
            out.push(Violation {
                kind: ViolationKind::Locality,
                detail: format!("hamiltonian term {i} has weight > k_S = {}", meta.k_s),
            });
        }
        if !t.pauli.is_hermitian() || t.pauli.phase_power() != 0 {
            out.push(Violation {
                kind: ViolationKind::Locality,
                detail: format!("hamiltonian term {i} must be a phase-free Pauli"),
            });
        }
    }
    for (i, t) in model.couplings.iter().enumerate() {
        if t.pauli.weight() > meta.k_se {
            out.push(Violation {
                kind: ViolationKind::Locality,
                detail: format!("coupling {i} has weight > k_SE = {}", meta.k_se),
            });
        }
        if (Chain { n: model.n_qubits }).diameter(&t.pauli.support()) > meta.a0 {
            out.push(Violation {
                kind: ViolationKind::Locality,
                detail: format!("coupling {i} has diameter > a_0 = {}", meta.a0),
            });
        }
        if t.pauli.phase_power() != 0 || t.pauli.is_identity() {
            out.push(Violation {
                kind: ViolationKind::Locality,
                detail: format!("coupling {i} must be a phase-free non-identity Pauli"),
            });
        }
        if model
            .hamiltonian
            .iter()
            .any(|h| h.pauli.same_sites(&t.pauli))
        {
            out.push(Violation {
                kind: ViolationKind::IndexOverlap,
                detail: format!("coupling {i} also appears in the system Hamiltonian"),
            });
        }
    }
    for t in model
        .hamiltonian
        .iter()
        .map(|t| &t.pauli)
        .chain(model.couplings.iter().map(|t| &t.pauli))
    {
        if t.max_site().is_some_and(|s| s >= model.n_qubits) {
            out.push(Violation {
                kind: ViolationKind::Locality,
                detail: format!("{t} acts outside {} qubits", model.n_qubits),
            });
        }
    }
    if meta.d0 > meta.d {
        out.push(Violation {
            kind: ViolationKind::Metadata,
            detail: format!("d0 = {} exceeds d = {}", meta.d0, meta.d),
        });
    }
    if model.metadata.is_some() {
        for (name, declared, actual) in [
            ("k_S", meta.k_s, derived.k_s),
            ("k_SE", meta.k_se, derived.k_se),
            ("d", meta.d, derived.d),
            ("d0", meta.d0, derived.d0),
            ("a_0", meta.a0, derived.a0),
            ("s", meta.s, derived.s),
        ] {
            if actual > declared {
                out.push(Violation {
                    kind: ViolationKind::Metadata,
                    detail: format!("{name} declared {declared}, model needs {actual}"),
                });
            }
        }
    }
    let n_c = model.couplings.len();
    match &model.kernel {
        KernelSpec::Modes(modes) => {
            for (l, mode) in modes.iter().enumerate() {
                if !(mode.gamma >= 0.0) || !mode.epsilon.is_finite() {
                    out.push(Violation {
                        kind: ViolationKind::NonFinite,
                        detail: format!("mode {l} needs gamma >= 0 and finite epsilon"),
                    });
                }
                if let Some(c) = mode.couplings.iter().find(|c| c.term >= n_c) {
                    out.push(Violation {
                        kind: ViolationKind::Sparsity,
                        detail: format!("mode {l} couples to unknown term {}", c.term),
                    });
                }
            }
            out.extend(table_violations(&model.kernel.to_table(4)));
        }
        KernelSpec::Table(t) => {
            if let Some(((a, b, _), _)) = t.iter().find(|((a, b, _), _)| *a >= n_c || *b >= n_c) {
                out.push(Violation {
                    kind: ViolationKind::Sparsity,
                    detail: format!("kernel entry ({a},{b}) refers to an unknown coupling"),
                });
            }
            out.extend(table_violations(t));
        }
    }
    if let Some(e) = &model.ensemble {
        out.extend(ensemble_violations(e, model.hamiltonian.len()));
    }
    out
}

pub fn ensemble_violations(e: &EnsembleSpec, n_terms: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let bad = |d: String| Violation {
        kind: ViolationKind::Ensemble,
        detail: d,
    };
    if e.means.len() != n_terms
        || e.covariance.len() != n_terms
        || e.covariance.iter().any(|r| r.len() != n_terms)
    {
        out.push(bad(format!(
            "ensemble must have {n_terms} means and a {n_terms}x{n_terms} covariance"
        )));
        return out;
    }
    for (a, &m) in e.means.iter().enumerate() {
        if m.abs() > 1.0 {
            out.push(bad(format!("|lambda_{a}| = {m} exceeds 1")));
        }
        if e.covariance[a][a] > 1.0 {
            out.push(bad(format!(
                "Sigma_{a}{a} = {} exceeds 1",
                e.covariance[a][a]
            )));
        }
        for b in 0..n_terms {
            if (e.covariance[a][b] - e.covariance[b][a]).abs() > 1e-12 {
                out.push(bad(format!("Sigma not symmetric at ({a},{b})")));
            }
        }
    }
    if let Err(err) = e.factor() {
        out.push(bad(err.to_string()));
    }
    out
}

/// Which Majorana of a system site carries the bath coupling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoupledMajorana {
    /// `c_{2i-1} = a_i + a_i^dagger` (1-based).
    First,
    /// `c_{2i} = i (a_i - a_i^dagger)` (1-based).
    #[default]
    Second,
}

/// Free-fermion chain `-J sum (a_i^dag a_{i+1} + a_i^dag a_{i+1}^dag + h.c.) + 2h sum a_i^dag a_i`
/// coupled through `sum v_ij a_i (b_j + b_j^dag) + h.c.` to one lossy bath
/// fermion per site.
///
/// Conventions (0-based site `i`, Majoranas `x_i = a_i + a_i^dag`,
/// `y_i = i(a_i - a_i^dag)`): hopping and the field enter the Majorana
/// generator as `h_{y_i, x_{i+1}} = -2J` and `h_{x_i, y_i} = -2h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FermionChainSpec {
    pub n: usize,
    pub hopping: f64,
    pub field: f64,
    /// Coupling matrix `v[i][j]` between system site `i` and bath mode `j`.
    pub v: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub coupled: CoupledMajorana,
}

impl FermionChainSpec {
    /// Nearest-neighbour antisymmetric coupling `v_ij = delta_{i+1,j} - delta_{i,j+1}`
    /// with uniform loss.
    pub fn chain(n: usize, hopping: f64, field: f64, v: f64, gamma: f64) -> Self {
        let mut vm = vec![vec![0.0; n]; n];
        for i in 0..n {
            if i + 1 < n {
                vm[i][i + 1] = v;
            }
            if i >= 1 {
                vm[i][i - 1] = -v;
            }
        }
        Self {
            n,
            hopping,
            field,
            v: vm,
            gamma: vec![gamma; n],
            coupled: CoupledMajorana::Second,
        }
    }

    /// Bath-induced kernel between the coupling operators of sites `i` and `j`:
    /// `K_ij(t) = sum_l v_il v_jl exp(-gamma_l t / 2)`, as exponential modes
    /// (one per bath site, zero frequency).
    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec::Modes(
            (0..self.n)
                .map(|l| KernelMode {
                    couplings: (0..self.n)
                        .filter(|&i| self.v[i][l] != 0.0)
                        .map(|i| ModeCoupling {
                            term: i,
                            re: self.v[i][l],
                            im: 0.0,
                        })
                        .collect(),
                    epsilon: 0.0,
                    gamma: self.gamma[l],
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidModel("fermion chain needs n >= 2".into()));
        }
        if self.v.len() != self.n
            || self.v.iter().any(|r| r.len() != self.n)
            || self.gamma.len() != self.n
        {
            return Err(Error::InvalidModel(
                "coupling matrix and loss rates must be n x n and n".into(),
            ));
        }
        if self.gamma.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::InvalidModel(
                "loss rates must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// On-disk model file: a spin model or a fermion chain, with a versioned header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    #[serde(default)]
    pub spin: Option<NoiseModel>,
    #[serde(default)]
    pub fermion_chain: Option<FermionChainSpec>,
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self> {
        let f: ModelFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if f.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "model schema version {} not supported (expected {MODEL_SCHEMA_VERSION})",
                f.schema_version
            )));
        }
        if f.spin.is_none() == f.fermion_chain.is_none() {
            return Err(Error::Config(
                "model file needs exactly one of [spin] or [fermion_chain]".into(),
            ));
        }
        Ok(f)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model serializes")
    }
}

/// Transverse-field Ising chain `-J sum X_i X_{i+1} - h sum Z_i` on `n` sites
/// without couplings. Terms are ordered `Z_0..Z_{n-1}` then `X_iX_{i+1}`.
pub fn tfim(n: usize, hopping: f64, field: f64) -> NoiseModel {
    let mut hamiltonian = Vec::new();
    for i in 0..n {
        hamiltonian.push(HamTerm {
            pauli: PauliString::single(i, crate::pauli::Axis::Z),
            coeff: -field,
        });
    }
    for i in 0..n.saturating_sub(1) {
        hamiltonian.push(HamTerm {
            pauli: PauliString::from_sites([
                (i, crate::pauli::Axis::X),
                (i + 1, crate::pauli::Axis::X),
            ]),
            coeff: -hopping,
        });
    }
    NoiseModel {
        n_qubits: n,
        hamiltonian,
        couplings: Vec::new(),
        kernel: KernelSpec::default(),
        metadata: None,
        ensemble: None,
    }
}

/// TFIM ensemble with random `(h, J)` shared across the chain.
pub fn tfim_ensemble(n: usize, mean_h: f64, mean_j: f64, sigma: [[f64; 2]; 2]) -> NoiseModel {
    let mut model = tfim(n, mean_j, mean_h);
    let n_terms = model.hamiltonian.len();
    let loading = DMatrix::from_fn(n_terms, 2, |t, p| match (t < n, p) {
        (true, 0) => -1.0,
        (false, 1) => -1.0,
        _ => 0.0,
    });
    let s = DMatrix::from_fn(2, 2, |i, j| sigma[i][j]);
    model.ensemble = Some(EnsembleSpec::from_parameters(
        &loading,
        &[mean_h, mean_j],
        &s,
    ));
    model
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_mode(gamma: f64, eps: f64) -> KernelSpec {
        KernelSpec::Modes(vec![KernelMode {
            couplings: vec![ModeCoupling {
                term: 0,
                re: 1.0,
                im: 0.0,
            }],
            epsilon: eps,
            gamma,
        }])
    }

    #[test]
    fn single_mode_derivatives() {
        let k = one_mode(0.9, 0.0);
        assert!((kernel_derivative(&k, 0, 0, 0) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!((kernel_derivative(&k, 0, 0, 1) - Complex64::new(-0.45, 0.0)).norm() < 1e-15);
        assert_eq!(kernel_derivative(&k, 3, 1, 2), Complex64::default());
    }

    #[test]
    fn table_parity_violations() {
        let mut t = KernelTable::new(true);
        t.set(0, 0, 1, Complex64::new(0.3, 0.0));
        let v = table_violations(&t);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::DiagonalParity);

        let mut t = KernelTable::new(true);
        t.set(0, 1, 1, Complex64::new(0.3, 0.0));
        t.set(1, 0, 1, Complex64::new(0.3, 0.0));
        let v = table_violations(&t);
        assert!(v.iter().any(|x| x.kind == ViolationKind::HermiticityParity));
    }

    #[test]
    fn factor_reproduces_covariance() {
        let m = tfim_ensemble(4, 0.8, 0.2, [[0.6, 0.3], [0.3, 0.7]]);
        let e = m.ensemble.unwrap();
        let b = e.factor().unwrap();
        let s = e.covariance_matrix();
        assert!((&b * b.transpose() - s).amax() < 1e-12);
        assert!(validate(&tfim_ensemble(4, 0.8, 0.2, [[0.6, 0.3], [0.3, 0.7]])).is_empty());
    }

    #[test]
    fn fermion_chain_kernel() {
        let f = FermionChainSpec::chain(6, 0.2, 0.8, 1.0, 0.9);
        let k = f.kernel_spec();
        assert!((kernel_derivative(&k, 2, 2, 0).re - 2.0).abs() < 1e-15);
        assert!((kernel_derivative(&k, 2, 4, 0).re + 1.0).abs() < 1e-15);
        assert!((kernel_derivative(&k, 2, 4, 1).re - 0.45).abs() < 1e-15);
        assert!((kernel_derivative(&k, 0, 0, 0).re - 1.0).abs() < 1e-15);
    }
}
