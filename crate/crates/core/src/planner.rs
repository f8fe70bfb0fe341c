//! Experiment planning: tomography regions, intermediate gates, measurement
//! settings and a round schedule of pairwise-disjoint regions.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::NoiseModel;
use crate::pauli::{chi, Axis, PauliString, Region};

/// Gate applied halfway through the evolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WSpec {
    Identity,
    SinglePauli {
        site: usize,
        axis: Axis,
    },
    /// `S * H` on one site; conjugation cycles X -> Z -> Y -> X.
    Sh {
        site: usize,
    },
}

impl WSpec {
    /// `W P W^dagger`, exact (both gate families map Paulis to signed Paulis).
    pub fn conj(&self, p: &PauliString) -> PauliString {
        match *self {
            WSpec::Identity => p.clone(),
            WSpec::SinglePauli { site, axis } => {
                let w = PauliString::single(site, axis);
                if chi(&w, p) == 1 {
                    p.neg()
                } else {
                    p.clone()
                }
            }
            WSpec::Sh { site } => map_site(p, site, |a| match a {
                Axis::X => Axis::Z,
                Axis::Z => Axis::Y,
                Axis::Y => Axis::X,
            }),
        }
    }

    /// `W^dagger P W`.
    pub fn conj_dagger(&self, p: &PauliString) -> PauliString {
        match *self {
            WSpec::Identity | WSpec::SinglePauli { .. } => self.conj(p),
            WSpec::Sh { site } => map_site(p, site, |a| match a {
                Axis::Z => Axis::X,
                Axis::Y => Axis::Z,
                Axis::X => Axis::Y,
            }),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, WSpec::Identity)
    }

    pub fn pauli(&self) -> Option<PauliString> {
        match *self {
            WSpec::SinglePauli { site, axis } => Some(PauliString::single(site, axis)),
            _ => None,
        }
    }

    pub fn support(&self) -> Region {
        match *self {
            WSpec::Identity => Region::new(),
            WSpec::SinglePauli { site, .. } | WSpec::Sh { site } => Region::from_iter([site]),
        }
    }

    /// Dense unitary on `n` qubits (site 0 most significant).
    pub fn to_dense(&self, n: usize) -> DMatrix<Complex64> {
        match *self {
            WSpec::Identity => DMatrix::identity(1 << n, 1 << n),
            WSpec::SinglePauli { site, axis } => PauliString::single(site, axis).to_dense(n),
            WSpec::Sh { site } => {
                let r = std::f64::consts::FRAC_1_SQRT_2;
                let c = |re: f64, im: f64| Complex64::new(re, im);
                // S H = [[1, 1], [i, -i]] / sqrt 2
                let g = [[c(r, 0.0), c(r, 0.0)], [c(0.0, r), c(0.0, -r)]];
                embed_single(&g, site, n)
            }
        }
    }
}

fn map_site(p: &PauliString, site: usize, f: impl Fn(Axis) -> Axis) -> PauliString {
    let sites = p
        .sites()
        .map(|(s, a)| if s == site { (s, f(a)) } else { (s, a) });
    PauliString::from_sites(sites).with_phase(p.phase_power())
}

pub(crate) fn embed_single(g: &[[Complex64; 2]; 2], site: usize, n: usize) -> DMatrix<Complex64> {
    let dim = 1usize << n;
    let bit = 1usize << (n - 1 - site);
    DMatrix::from_fn(dim, dim, |r, c| {
        if (r & !bit) != (c & !bit) {
            return Complex64::default();
        }
        g[usize::from(r & bit != 0)][usize::from(c & bit != 0)]
    })
}

/// Pairs `(c, d)` of couplings, other than `a` and `b`, that tomography on
/// `region` cannot tell apart from `(a, b)`.
pub fn conflicting_pairs_in(
    a: usize,
    b: usize,
    couplings: &[PauliString],
    region: &Region,
) -> BTreeSet<(usize, usize)> {
    let pa = couplings[a].restrict(region);
    let pb = couplings[b].restrict(region);
    let mut out = BTreeSet::new();
    for c in 0..couplings.len() {
        if c == a || c == b || couplings[c].restrict(region) != pa {
            continue;
        }
        let outside = couplings[c].restrict_outside(region);
        if outside.is_identity() {
            continue;
        }
        for d in 0..couplings.len() {
            if d == a || d == b {
                continue;
            }
            if couplings[d].restrict(region) == pb
                && couplings[d].restrict_outside(region) == outside
            {
                out.insert((c, d));
            }
        }
    }
    out
}

/// Conflicting pairs on the joint support of the target pair.
pub fn conflicting_pairs(
    a: usize,
    b: usize,
    couplings: &[PauliString],
) -> BTreeSet<(usize, usize)> {
    let s = couplings[a].support().union(&couplings[b].support());
    conflicting_pairs_in(a, b, couplings, &s)
}

/// Joint support plus one out-of-support site per conflicting pair, chosen
/// greedily: the site resolving the most pairs first, lowest index on ties.
pub fn enlarge_region(a: usize, b: usize, couplings: &[PauliString]) -> Region {
    let s = couplings[a].support().union(&couplings[b].support());
    let mut open: Vec<Region> = conflicting_pairs_in(a, b, couplings, &s)
        .into_iter()
        .map(|(c, _)| couplings[c].support().difference(&s))
        .collect();
    let mut region = s;
    while !open.is_empty() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for cand in &open {
            for site in cand.iter() {
                *counts.entry(site).or_default() += 1;
            }
        }
        let best = counts
            .iter()
            .max_by(|x, y| x.1.cmp(y.1).then(y.0.cmp(x.0)))
            .map(|(&site, _)| site)
            .expect("open pairs have out-of-support sites");
        region.insert(best);
        open.retain(|cand| !cand.contains(best));
    }
    region
}

fn other_axis(a: Axis) -> Axis {
    if a == Axis::X {
        Axis::Y
    } else {
        Axis::X
    }
}

/// Intermediate gate for learning `K_ab^{(m-2)}` from the `m`-th derivative.
///
/// Even `m` needs none. For odd `m` and `a != b` a single-site Pauli that
/// anticommutes with exactly one of the pair: preferably a site where only
/// `P_a` acts (a different axis), else a site where both act and differ
/// (`P_b`'s axis), else a site where only `P_b` acts. For odd `m` and
/// `a == b`, `S H` on a support site (the lowest unless overridden).
pub fn select_w(pa: &PauliString, pb: &PauliString, m: u32, sh_site: Option<usize>) -> WSpec {
    if m % 2 == 0 {
        return WSpec::Identity;
    }
    if pa.unphased() == pb.unphased() {
        let site = sh_site
            .filter(|s| pa.axis_at(*s).is_some())
            .or_else(|| pa.support().first())
            .expect("SH needs a non-identity Pauli");
        return WSpec::Sh { site };
    }
    if let Some((site, axis)) = pa.sites().find(|(s, _)| pb.axis_at(*s).is_none()) {
        return WSpec::SinglePauli {
            site,
            axis: other_axis(axis),
        };
    }
    if let Some((site, _)) = pa
        .sites()
        .find(|(s, x)| pb.axis_at(*s).is_some_and(|y| y != *x))
    {
        return WSpec::SinglePauli {
            site,
            axis: pb.axis_at(site).unwrap(),
        };
    }
    let (site, axis) = pb
        .sites()
        .find(|(s, _)| pa.axis_at(*s).is_none())
        .expect("distinct Pauli strings differ somewhere");
    WSpec::SinglePauli {
        site,
        axis: other_axis(axis),
    }
}

/// One coefficient `xi_{P,Q}` of `P X Q` to be extracted on a region.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct XiTarget {
    pub a: usize,
    pub b: usize,
    pub w: WSpec,
    pub left: PauliString,
    pub right: PauliString,
    /// Prepare `W^dagger P_I W` instead of `P_I`.
    pub conjugate_input: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Purpose {
    /// First-derivative setting for one Hamiltonian term.
    Hamiltonian { term: usize },
    /// Tomography for a kernel (or ensemble second moment) pair.
    Pair { a: usize, b: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSetting {
    pub id: u64,
    pub purpose: Purpose,
    pub region: Region,
    pub input_pauli: PauliString,
    pub observable: PauliString,
    pub w: WSpec,
    pub conjugate_input: bool,
    /// Product basis in which input eigenstates are drawn.
    pub input_basis: Vec<(usize, Axis)>,
    /// Derivative orders this setting feeds.
    pub orders: Vec<u32>,
}

impl MeasurementSetting {
    /// The operator actually prepared (conjugated for case-3 settings).
    pub fn prepared_input(&self) -> PauliString {
        if self.conjugate_input {
            self.w.conj_dagger(&self.input_pauli)
        } else {
            self.input_pauli.clone()
        }
    }
}

/// Stable identifier derived from the physical content of a setting.
pub fn setting_id(
    purpose: &Purpose,
    input: &PauliString,
    observable: &PauliString,
    w: &WSpec,
    conj: bool,
) -> u64 {
    let key = format!("{purpose:?}|{input}|{observable}|{w:?}|{conj}");
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn input_basis(p: &PauliString, region: &Region) -> Vec<(usize, Axis)> {
    region
        .iter()
        .map(|s| (s, p.axis_at(s).unwrap_or(Axis::Z)))
        .collect()
}

/// The input companion of observable `obs` for coefficient `xi_{left,right}`:
/// the phase-free `P_in` with `left obs right P_in` proportional to the
/// identity, and the inversion weight `Tr(left obs right P_in) / 2^{3|I|}`
/// rescaled to the region, i.e. `phase / 4^{|I|}`.
pub fn companion(
    left: &PauliString,
    obs: &PauliString,
    right: &PauliString,
    region_size: usize,
) -> (PauliString, Complex64) {
    let prod = left.multiply(obs).multiply(right);
    let input = prod.unphased();
    let full = prod.multiply(&input);
    debug_assert!(full.is_identity());
    let weight = full.phase() / 4f64.powi(region_size as i32);
    (input, weight)
}

/// Settings for the given xi targets on `region`: one per observable on the
/// region and target, deduplicated across targets.
pub fn enumerate_settings(
    region: &Region,
    targets: &[XiTarget],
    purpose: Purpose,
    orders: &[u32],
) -> Vec<MeasurementSetting> {
    let mut out: BTreeMap<u64, MeasurementSetting> = BTreeMap::new();
    let observables = PauliString::all_on(region);
    for t in targets {
        for obs in &observables {
            let (input, _) = companion(&t.left, obs, &t.right, region.len());
            let id = setting_id(&purpose, &input, obs, &t.w, t.conjugate_input);
            out.entry(id)
                .and_modify(|s| {
                    for &m in orders {
                        if !s.orders.contains(&m) {
                            s.orders.push(m);
                        }
                    }
                    s.orders.sort_unstable();
                })
                .or_insert_with(|| MeasurementSetting {
                    id,
                    purpose,
                    region: region.clone(),
                    input_basis: input_basis(&input, region),
                    input_pauli: input,
                    observable: obs.clone(),
                    w: t.w,
                    conjugate_input: t.conjugate_input,
                    orders: orders.to_vec(),
                });
        }
    }
    out.into_values().collect()
}

/// Number of distinct (input basis, gate) configurations among settings.
pub fn configuration_count(settings: &[MeasurementSetting]) -> usize {
    settings
        .iter()
        .map(|s| (s.input_basis.clone(), s.w, s.conjugate_input))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Canonical first-derivative setting for Hamiltonian term `term`: a
/// single-site input anticommuting with `P_a` at its lowest site and the
/// observable `i P_a P_I`.
pub fn hamiltonian_setting(term: usize, pa: &PauliString) -> MeasurementSetting {
    let (site, axis) = pa.sites().next().expect("non-identity Hamiltonian term");
    let input = PauliString::single(site, other_axis(axis));
    let observable = pa.multiply(&input).times_i();
    debug_assert!(observable.is_hermitian());
    let purpose = Purpose::Hamiltonian { term };
    let region = observable.support().union(&input.support());
    MeasurementSetting {
        id: setting_id(&purpose, &input, &observable, &WSpec::Identity, false),
        purpose,
        input_basis: input_basis(&input, &region),
        region,
        input_pauli: input,
        observable,
        w: WSpec::Identity,
        conjugate_input: false,
        orders: vec![1],
    }
}

/// A group of settings sharing one tomography region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGroup {
    pub label: String,
    pub region: Region,
    pub setting_ids: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundSchedule {
    pub rounds: Vec<Vec<RegionGroup>>,
}

impl RoundSchedule {
    pub fn n_rounds(&self) -> usize {
        self.rounds.len()
    }
}

/// Maximum vertex degree of the region-overlap graph.
pub fn overlap_degree(regions: &[Region]) -> usize {
    (0..regions.len())
        .map(|i| {
            (0..regions.len())
                .filter(|&j| j != i && !regions[i].is_disjoint(&regions[j]))
                .count()
        })
        .max()
        .unwrap_or(0)
}

/// Greedy colouring of the overlap graph, vertices visited by descending
/// degree (index order on ties). Returns the colour of each region.
pub fn color_regions(regions: &[Region]) -> Vec<usize> {
    let n = regions.len();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && !regions[i].is_disjoint(&regions[j]))
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| adj[y].len().cmp(&adj[x].len()).then(x.cmp(&y)));
    let mut color = vec![usize::MAX; n];
    for &v in &order {
        let used: BTreeSet<usize> = adj[v]
            .iter()
            .map(|&u| color[u])
            .filter(|&c| c != usize::MAX)
            .collect();
        color[v] = (0..).find(|c| !used.contains(c)).unwrap();
    }
    color
}

pub fn schedule(groups: Vec<RegionGroup>) -> RoundSchedule {
    let regions: Vec<Region> = groups.iter().map(|g| g.region.clone()).collect();
    let colors = color_regions(&regions);
    let n_rounds = colors.iter().map(|c| c + 1).max().unwrap_or(0);
    let mut rounds = vec![Vec::new(); n_rounds];
    for (g, c) in groups.into_iter().zip(colors) {
        rounds[c].push(g);
    }
    RoundSchedule { rounds }
}

/// Everything the learner needs to know about one kernel (or second-moment)
/// pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPlan {
    pub a: usize,
    pub b: usize,
    pub region: Region,
    pub targets: Vec<XiTarget>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub hamiltonian: Vec<MeasurementSetting>,
    pub pairs: Vec<PairPlan>,
    pub settings: Vec<MeasurementSetting>,
    pub schedule: RoundSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Highest kernel order to learn (trace orders run to `max_kernel_order + 2`).
    pub max_kernel_order: u32,
    /// Also plan the Pauli-gate variant at even orders and the identity at odd
    /// orders, needed when the kernel is not smooth at the origin.
    pub general_kernels: bool,
    pub sh_site: Option<usize>,
    /// Ordered pairs to learn; defaults to every pair with a non-zero kernel.
    pub pairs: Option<Vec<(usize, usize)>>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            max_kernel_order: 1,
            general_kernels: false,
            sh_site: None,
            pairs: None,
        }
    }
}

/// Xi targets for pair `(a, b)` over trace orders `2..=max_m`.
pub fn pair_targets(
    pa: &PauliString,
    pb: &PauliString,
    a: usize,
    b: usize,
    max_m: u32,
    general: bool,
    sh_site: Option<usize>,
) -> Vec<XiTarget> {
    let mut ws: BTreeSet<WSpec> = BTreeSet::new();
    for m in 2..=max_m {
        ws.insert(select_w(pa, pb, m, sh_site));
        if general {
            ws.insert(WSpec::Identity);
            if a != b {
                ws.insert(select_w(pa, pb, 3, sh_site));
            }
        }
    }
    ws.into_iter()
        .map(|w| match w {
            WSpec::Sh { .. } => XiTarget {
                a,
                b,
                w,
                left: w.conj(pa).unphased(),
                right: pa.unphased(),
                conjugate_input: true,
            },
            _ => XiTarget {
                a,
                b,
                w,
                left: pa.unphased(),
                right: pb.unphased(),
                conjugate_input: false,
            },
        })
        .collect()
}

/// Full plan for a spin model: Hamiltonian settings, tomography on every
/// requested kernel pair, and a schedule over pair regions.
pub fn plan_model(model: &NoiseModel, opts: &PlanOptions) -> Plan {
    let couplings: Vec<PauliString> = model.couplings.iter().map(|c| c.pauli.clone()).collect();
    let hamiltonian: Vec<MeasurementSetting> = model
        .hamiltonian
        .iter()
        .enumerate()
        .map(|(k, t)| hamiltonian_setting(k, &t.pauli))
        .collect();
    let pairs: Vec<(usize, usize)> = match &opts.pairs {
        Some(p) => p.clone(),
        None => model
            .kernel
            .pairs()
            .into_iter()
            .filter(|(a, b)| a <= b)
            .collect(),
    };
    let max_m = opts.max_kernel_order + 2;
    let orders: Vec<u32> = (2..=max_m).collect();
    let mut plans = Vec::new();
    let mut settings = Vec::new();
    let mut groups = Vec::new();
    for (a, b) in pairs {
        let mut region = enlarge_region(a, b, &couplings);
        let targets = pair_targets(
            &couplings[a],
            &couplings[b],
            a,
            b,
            max_m,
            opts.general_kernels,
            opts.sh_site,
        );
        for t in &targets {
            if t.conjugate_input {
                // the SH coefficient pairs (W P_a W^dag, P_a); enlarge for its conflicts too
                let mut ext = couplings.clone();
                ext.push(t.left.clone());
                region = region.union(&enlarge_region(ext.len() - 1, a, &ext));
            }
        }
        let purpose = Purpose::Pair { a, b };
        let s = enumerate_settings(&region, &targets, purpose, &orders);
        groups.push(RegionGroup {
            label: format!("K({a},{b})"),
            region: region.clone(),
            setting_ids: s.iter().map(|x| x.id).collect(),
        });
        settings.extend(s);
        plans.push(PairPlan {
            a,
            b,
            region,
            targets,
        });
    }
    let schedule = schedule(groups);
    Plan {
        hamiltonian,
        pairs: plans,
        settings,
        schedule,
    }
}

/// Plan for Hamiltonian-ensemble learning: first-derivative settings for every
/// term and second-moment tomography on every requested pair of terms.
pub fn plan_ensemble(model: &NoiseModel, pairs: &[(usize, usize)]) -> Plan {
    let terms: Vec<PauliString> = model.hamiltonian.iter().map(|t| t.pauli.clone()).collect();
    let hamiltonian: Vec<MeasurementSetting> = terms
        .iter()
        .enumerate()
        .map(|(k, p)| hamiltonian_setting(k, p))
        .collect();
    let mut plans = Vec::new();
    let mut settings = Vec::new();
    let mut groups = Vec::new();
    for &(a, b) in pairs {
        let region = enlarge_region(a, b, &terms);
        let targets = vec![XiTarget {
            a,
            b,
            w: WSpec::Identity,
            left: terms[a].unphased(),
            right: terms[b].unphased(),
            conjugate_input: false,
        }];
        let purpose = Purpose::Pair { a, b };
        let s = enumerate_settings(&region, &targets, purpose, &[2]);
        groups.push(RegionGroup {
            label: format!("E({a},{b})"),
            region: region.clone(),
            setting_ids: s.iter().map(|x| x.id).collect(),
        });
        settings.extend(s);
        plans.push(PairPlan {
            a,
            b,
            region,
            targets,
        });
    }
    Plan {
        hamiltonian,
        pairs: plans,
        settings,
        schedule: schedule(groups),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> PauliString {
        s.parse().unwrap()
    }

    #[test]
    fn conflicting_pair_example() {
        let c = vec![p("X1"), p("X2"), p("X1 Z3"), p("X2 Z3")];
        let pairs = conflicting_pairs(0, 1, &c);
        assert_eq!(pairs, BTreeSet::from([(2, 3)]));
        let r = enlarge_region(0, 1, &c);
        assert_eq!(r, Region::from_iter([1, 2, 3]));
        assert!(conflicting_pairs_in(0, 1, &c, &r).is_empty());
    }

    #[test]
    fn single_qubit_couplings_have_no_conflicts() {
        let c = vec![p("X1"), p("Z2"), p("Y3")];
        assert!(conflicting_pairs(0, 1, &c).is_empty());
        assert_eq!(enlarge_region(0, 2, &c), Region::from_iter([1, 3]));
    }

    #[test]
    fn w_selection() {
        assert_eq!(select_w(&p("X1"), &p("Z2"), 2, None), WSpec::Identity);
        assert_eq!(
            select_w(&p("X1 X2"), &p("X1 Z2"), 3, None),
            WSpec::SinglePauli {
                site: 2,
                axis: Axis::Z
            }
        );
        assert_eq!(select_w(&p("Z5"), &p("Z5"), 3, None), WSpec::Sh { site: 5 });
        let pa = p("X0 Y3");
        let pb = p("Z3 X4");
        if let WSpec::SinglePauli { site, axis } = select_w(&pa, &pb, 3, None) {
            let w = PauliString::single(site, axis);
            assert_eq!(chi(&w, &pa) + chi(&w, &pb), 1);
        } else {
            panic!("expected a Pauli gate");
        }
    }

    #[test]
    fn sh_cycles() {
        let w = WSpec::Sh { site: 0 };
        assert_eq!(w.conj(&p("X0")), p("Z0"));
        assert_eq!(w.conj(&p("Z0")), p("Y0"));
        assert_eq!(w.conj(&p("Y0")), p("X0"));
        for s in ["X0", "Y0", "Z0", "X0 Z1"] {
            assert_eq!(w.conj_dagger(&w.conj(&p(s))), p(s));
        }
    }

    #[test]
    fn schedule_examples() {
        let disjoint: Vec<RegionGroup> = (0..4)
            .map(|k| RegionGroup {
                label: k.to_string(),
                region: Region::from_iter([2 * k, 2 * k + 1]),
                setting_ids: vec![],
            })
            .collect();
        assert_eq!(schedule(disjoint).n_rounds(), 1);
        let path: Vec<RegionGroup> = (0..6)
            .map(|k| RegionGroup {
                label: k.to_string(),
                region: Region::from_iter([k, k + 1]),
                setting_ids: vec![],
            })
            .collect();
        assert_eq!(schedule(path).n_rounds(), 2);
    }

    #[test]
    fn settings_count_case1() {
        let region = Region::from_iter([0, 1]);
        let t = XiTarget {
            a: 0,
            b: 1,
            w: WSpec::Identity,
            left: p("X0"),
            right: p("Z1"),
            conjugate_input: false,
        };
        let s = enumerate_settings(&region, &[t], Purpose::Pair { a: 0, b: 1 }, &[2]);
        assert_eq!(s.len(), 16);
        assert!(configuration_count(&s) <= 9);
        assert!(enumerate_settings(&region, &[], Purpose::Pair { a: 0, b: 1 }, &[2]).is_empty());
    }
}
