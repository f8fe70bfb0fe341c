//! Means and covariances of random Ising couplings from ensemble-averaged
//! traces on a ten-site chain.
//!
//! cargo run --release --example ensemble

use std::collections::BTreeMap;

use memkern::fitter::{fit, uniform_grid, FitConfig, Robust};
use memkern::learner::{learn_ensemble, Observation};
use memkern::model::tfim_ensemble;
use memkern::pauli::PauliString;
use memkern::planner::plan_ensemble;
use memkern::sampler::{sample_trace, ShotConfig};
use memkern::sim_exact::{ensemble_traces, EnsembleQuadrature};

fn main() -> memkern::error::Result<()> {
    let model = tfim_ensemble(10, 0.8, 0.2, [[0.6, 0.3], [0.3, 0.7]]);
    let terms: Vec<PauliString> = model.hamiltonian.iter().map(|t| t.pauli.clone()).collect();
    // Z_4, Z_5 and X_4 X_5
    let (z4, z5, xx) = (4, 5, 10 + 4);
    let pairs = [(z4, z4), (z4, z5), (z4, xx), (xx, xx)];
    let plan = plan_ensemble(&model, &pairs);

    let quad = EnsembleQuadrature::new(&model, 12)?;
    let times = uniform_grid(1e-3, 0.03, 10);
    let shots = ShotConfig {
        shots: 1_000_000,
        batches: 1,
        master_seed: 9,
    };
    let cfg = FitConfig {
        degree: 2,
        robust: Robust::None,
    };
    let mut observations = BTreeMap::new();
    for s in plan.hamiltonian.iter().chain(&plan.settings) {
        let exact = ensemble_traces(&model, &quad, &s.prepared_input(), &s.observable, &times)?;
        let trace = sample_trace(&exact, s, &times, &shots)?;
        observations.insert(s.id, Observation::from_fit(&fit(&trace, &cfg)?, &trace));
    }

    let est = learn_ensemble(&plan, &terms, &observations)?;
    let truth = model.ensemble.as_ref().unwrap();
    for k in [z4, xx] {
        println!(
            "lambda[{}] = {:+.3} +- {:.3}  (truth {:+})",
            terms[k], est.lambda[k].value, est.lambda[k].sd, truth.means[k]
        );
    }
    for e in &est.entries {
        println!(
            "Sigma[{}, {}] = {:+.3} +- {:.3}  (truth {:+})",
            terms[e.a], terms[e.b], e.covariance.value, e.covariance.sd, truth.covariance[e.a][e.b]
        );
    }
    Ok(())
}
