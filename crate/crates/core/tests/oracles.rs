//! Cross-backend and closed-form oracles.

use memkern::model::FermionChainSpec;
use memkern::numerics::Tolerance;
use memkern::sim_exact::{fermion_chain_dense, DEFAULT_DIM_LIMIT};
use memkern::sim_gaussian::build_majorana_model;

#[test]
fn gaussian_backend_matches_dense_master_equation() {
    let spec = FermionChainSpec::chain(2, 0.2, 0.8, 1.0, 0.9);
    let gauss = build_majorana_model(&spec).unwrap();
    let dense = fermion_chain_dense(&spec, DEFAULT_DIM_LIMIT).unwrap();
    let times: Vec<f64> = (0..=10).map(|k| 0.02 * k as f64).collect();
    let mut worst: f64 = 0.0;
    let m = gauss.n_majoranas();
    for (a, b, c, d) in [
        (1, 2, 3, 2),
        (0, 1, 0, 1),
        (1, 3, 1, 3),
        (0, 4, 2, 5),
        (1, 6, 1, 6),
        (2, 3, 0, 1),
    ] {
        assert!(a < m && b < m && c < m && d < m);
        let g = gauss.observable_trace(a, b, c, d, &times).unwrap();
        let e = dense
            .observable_trace(a, b, c, d, &times, Tolerance::tight())
            .unwrap();
        for (x, y) in g.iter().zip(&e) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst <= 1e-6, "max deviation {worst}");
}
