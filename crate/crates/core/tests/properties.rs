//! Randomized invariants of the algebra, planner, inversion and fitting layers.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use num_complex::Complex64 as C;
use proptest::prelude::*;

use memkern::fitter::{chebyshev_grid, fit_points, uniform_grid};
use memkern::learner::extract_xi;
use memkern::model::{kernel_derivative, KernelMode, KernelSpec, ModeCoupling};
use memkern::numerics::central_derivatives;
use memkern::pauli::{chi, normalized_trace, Axis, PauliString, Region};
use memkern::planner::{
    color_regions, conflicting_pairs, conflicting_pairs_in, enlarge_region, overlap_degree,
    select_w, WSpec,
};
use memkern::sampler::{sample_values, ShotConfig};

fn axis(k: u8) -> Option<Axis> {
    match k {
        1 => Some(Axis::X),
        2 => Some(Axis::Y),
        3 => Some(Axis::Z),
        _ => None,
    }
}

fn pauli_on(n: usize) -> impl Strategy<Value = PauliString> {
    prop::collection::vec(0u8..4, n).prop_map(|ks| {
        PauliString::from_sites(
            ks.iter()
                .enumerate()
                .filter_map(|(s, &k)| axis(k).map(|a| (s, a))),
        )
    })
}

fn non_identity(n: usize) -> impl Strategy<Value = PauliString> {
    pauli_on(n).prop_filter("non-identity", |p| !p.is_identity())
}

fn max_abs(m: &DMatrix<C>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn products_match_dense_matrices(p in pauli_on(4), q in pauli_on(4)) {
        let dense = p.to_dense(4) * q.to_dense(4);
        prop_assert!(max_abs(&(dense - p.multiply(&q).to_dense(4))) < 1e-12);
    }

    #[test]
    fn chi_counts_differing_sites(p in pauli_on(4), q in pauli_on(4)) {
        let differing = (0..4).filter(|&s| matches!((p.axis_at(s), q.axis_at(s)), (Some(x), Some(y)) if x != y)).count();
        prop_assert_eq!(chi(&p, &q) as usize, differing % 2);
        prop_assert_eq!(p.commutes(&q), differing % 2 == 0);
    }

    #[test]
    fn conjugation_only_adds_a_sign(a in pauli_on(3), w in pauli_on(3)) {
        let conj = w.multiply(&a.multiply(&w));
        let sign = if chi(&a, &w) == 1 { a.neg() } else { a.clone() };
        prop_assert_eq!(conj, sign);
    }

    #[test]
    fn non_identity_products_are_traceless(ps in prop::collection::vec(pauli_on(3), 1..5)) {
        let prod = ps.iter().fold(PauliString::identity(), |acc, p| acc.multiply(p));
        let t = normalized_trace(&ps, 3);
        if prod.unphased().is_identity() {
            prop_assert!((t - prod.phase()).norm() < 1e-15);
        } else {
            prop_assert_eq!(t, C::new(0.0, 0.0));
        }
    }

    #[test]
    fn single_pauli_gate_separates_the_pair(pa in non_identity(3), pb in non_identity(3)) {
        prop_assume!(pa.unphased() != pb.unphased());
        let w = select_w(&pa, &pb, 3, None);
        let pw = w.pauli().expect("odd order off-diagonal pairs use a Pauli gate");
        prop_assert_eq!(chi(&pw, &pa) + chi(&pw, &pb), 1);
    }

    #[test]
    fn sh_gate_sits_on_the_support(pa in non_identity(3)) {
        match select_w(&pa, &pa, 3, None) {
            WSpec::Sh { site } => prop_assert!(pa.axis_at(site).is_some()),
            other => prop_assert!(false, "expected SH, got {other:?}"),
        }
    }
}

fn couplings_strategy() -> impl Strategy<Value = Vec<PauliString>> {
    // up to 7 couplings of weight <= 3 on 7 sites, deduplicated
    prop::collection::vec(
        (0usize..5, prop::collection::vec(1u8..4, 1..4)).prop_map(|(start, axes)| {
            PauliString::from_sites(
                axes.iter()
                    .enumerate()
                    .map(|(k, &a)| (start + k, axis(a).unwrap())),
            )
        }),
        2..8,
    )
    .prop_map(|v| {
        let mut seen = BTreeSet::new();
        v.into_iter()
            .filter(|p| seen.insert(p.clone()))
            .collect::<Vec<_>>()
    })
    .prop_filter("at least two couplings", |v| v.len() >= 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn enlarged_regions_have_no_conflicts(couplings in couplings_strategy()) {
        let k_se = couplings.iter().map(|p| p.weight()).max().unwrap();
        let d0 = (0..couplings.len())
            .flat_map(|a| (0..couplings.len()).map(move |b| (a, b)))
            .map(|(a, b)| conflicting_pairs(a, b, &couplings).len())
            .max()
            .unwrap();
        for a in 0..couplings.len() {
            for b in 0..couplings.len() {
                let region = enlarge_region(a, b, &couplings);
                prop_assert!(conflicting_pairs_in(a, b, &couplings, &region).is_empty());
                let s = couplings[a].support().union(&couplings[b].support());
                let extra = region.len() - s.len();
                let conflicts = conflicting_pairs(a, b, &couplings).len();
                prop_assert!(extra <= conflicts && conflicts <= d0);
                prop_assert!(region.len() <= 2 * k_se + d0);
            }
        }
    }

    #[test]
    fn rounds_are_disjoint_and_bounded(starts in prop::collection::vec((0usize..12, 1usize..4), 1..12)) {
        let regions: Vec<Region> = starts.iter().map(|&(s, w)| Region::from_iter(s..s + w)).collect();
        let colors = color_regions(&regions);
        let rounds = colors.iter().max().unwrap() + 1;
        prop_assert!(rounds <= overlap_degree(&regions) + 1);
        for i in 0..regions.len() {
            for j in 0..i {
                if colors[i] == colors[j] {
                    prop_assert!(regions[i].is_disjoint(&regions[j]));
                }
            }
        }
    }
}

/// Derivative-level observations of `X -> sum_k c_k L_k X R_k` on `region`.
fn map_observations(
    map: &BTreeMap<(PauliString, PauliString), C>,
    region: &Region,
) -> BTreeMap<(PauliString, PauliString), f64> {
    let n = region.iter().max().unwrap() + 1;
    let dim = (1usize << n) as f64;
    let mut out = BTreeMap::new();
    for input in PauliString::all_on(region) {
        let x = input.to_dense(n);
        let mut tx = DMatrix::<C>::zeros(x.nrows(), x.ncols());
        for ((l, r), c) in map {
            tx += (l.to_dense(n) * &x * r.to_dense(n)) * *c;
        }
        for obs in PauliString::all_on(region) {
            let v = (obs.to_dense(n) * &tx).trace() / dim;
            out.insert((input.clone(), obs), v.re);
        }
    }
    out
}

fn hermitian_map(n_sites: usize) -> impl Strategy<Value = BTreeMap<(PauliString, PauliString), C>> {
    prop::collection::vec(
        (
            pauli_on(n_sites),
            pauli_on(n_sites),
            -1.0f64..1.0,
            -1.0f64..1.0,
        ),
        1..5,
    )
    .prop_map(|terms| {
        let mut map = BTreeMap::new();
        for (l, r, re, im) in terms {
            let c = C::new(re, im);
            *map.entry((l.clone(), r.clone()))
                .or_insert(C::new(0.0, 0.0)) += c;
            *map.entry((r, l)).or_insert(C::new(0.0, 0.0)) += c.conj();
        }
        map
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn xi_inversion_is_exact_and_does_not_amplify_noise(
        (sites, map) in (2usize..4).prop_flat_map(|s| (Just(s), hermitian_map(s))),
        noise in prop::collection::vec(-1.0f64..1.0, 64),
        eps in 1e-4f64..1e-2,
    ) {
        let region = Region::from_iter(0..sites);
        let obs = map_observations(&map, &region);
        // bounded perturbation of every observation
        let noisy: BTreeMap<_, f64> = obs
            .iter()
            .enumerate()
            .map(|(k, (key, v))| (key.clone(), v + eps * noise[k % noise.len()]))
            .collect();
        for ((l, r), c) in &map {
            let xi = extract_xi(&obs, &region, l, r).unwrap();
            prop_assert!((xi - c).norm() < 1e-10, "xi({l}, {r}) = {xi} vs {c}");
            let xi_noisy = extract_xi(&noisy, &region, l, r).unwrap();
            prop_assert!((xi_noisy - xi).norm() <= eps * (1.0 + 1e-12));
        }
    }

    #[test]
    fn fits_are_exact_on_polynomials(coeffs in prop::collection::vec(-2.0f64..2.0, 1..5), t_max in 0.05f64..1.0) {
        let deg = coeffs.len() - 1;
        let eval = |t: f64| coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c);
        let u = uniform_grid(1e-3, t_max, 10);
        let c = chebyshev_grid(1e-3, t_max, 10);
        let fu = fit_points(&u, &u.iter().map(|&t| eval(t)).collect::<Vec<_>>(), deg).unwrap();
        let fc = fit_points(&c, &c.iter().map(|&t| eval(t)).collect::<Vec<_>>(), deg).unwrap();
        let mut fact = 1.0;
        for m in 0..=deg {
            if m > 0 {
                fact *= m as f64;
            }
            let want = fact * coeffs[m];
            let tol = 1e-9 * (1.0 + want.abs()) / t_max.powi(m as i32);
            prop_assert!((fu.derivative_at_zero[m] - want).abs() < tol);
            prop_assert!((fu.derivative_at_zero[m] - fc.derivative_at_zero[m]).abs() < tol);
        }
    }

    #[test]
    fn kernel_derivatives_match_numerical_differentiation(
        v in 0.2f64..1.5, phase in -1.0f64..1.0, eps in -1.0f64..1.0, gamma in 0.0f64..2.0, m in 0u32..3,
    ) {
        let spec = KernelSpec::Modes(vec![KernelMode {
            couplings: vec![ModeCoupling { term: 0, re: 1.0, im: 0.0 }, ModeCoupling { term: 1, re: v * phase.cos(), im: v * phase.sin() }],
            epsilon: eps,
            gamma,
        }]);
        let want = kernel_derivative(&spec, 0, 1, m);
        // the t >= 0 branch, continued analytically for the central stencil
        let re = |t: f64| spec.value(0, 1, t).re;
        let im = |t: f64| spec.value(0, 1, t).im;
        let dr = central_derivatives(&re, m as usize, 0.05)[m as usize].value;
        let di = central_derivatives(&im, m as usize, 0.05)[m as usize].value;
        prop_assert!((C::new(dr, di) - want).norm() <= 1e-6 * want.norm().max(1.0));
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), id in any::<u64>(), p in -1.0f64..1.0) {
        let times = uniform_grid(1e-3, 0.1, 5);
        let exact = vec![p; 5];
        let cfg = ShotConfig { shots: 1000, batches: 1, master_seed: seed };
        let a = sample_values(&exact, id, 1.0, &times, &cfg).unwrap();
        let b = sample_values(&exact, id, 1.0, &times, &cfg).unwrap();
        prop_assert_eq!(a.means, b.means);
    }
}
