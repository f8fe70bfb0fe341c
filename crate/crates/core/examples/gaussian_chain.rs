//! Learn the field, hopping and first two kernel derivatives of a 20-site
//! dissipative free-fermion chain from one simulated experiment.
//!
//! cargo run --release --example gaussian_chain

use memkern::fitter::{fit, uniform_grid, FitConfig, Robust};
use memkern::learner::{
    learn_chain, mode_params_from_kernel, ChainTraceSet, KernelEstimate, Observation,
};
use memkern::model::FermionChainSpec;
use memkern::sampler::{sample_values, ShotConfig};
use memkern::sim_gaussian::build_majorana_model;

fn main() -> memkern::error::Result<()> {
    let spec = FermionChainSpec::chain(20, 0.2, 0.8, 1.0, 0.9);
    let model = build_majorana_model(&spec)?;
    let site = 8;
    let times = uniform_grid(1e-3, 0.1, 10);
    let shots = ShotConfig {
        shots: 1_000_000,
        batches: 1,
        master_seed: 42,
    };
    let cfg = FitConfig {
        degree: 3,
        robust: Robust::None,
    };

    let mut obs = Vec::new();
    for (id, (a, b, c, d)) in ChainTraceSet::at_site(site).all().into_iter().enumerate() {
        // the trace at time t spans a gate-free evolution of length 2t
        let exact: Vec<f64> = times
            .iter()
            .map(|&t| model.linear_trace_closed_form(a, b, c, d, 2.0 * t))
            .collect();
        let trace = sample_values(&exact, id as u64 + 1, 1.0, &times, &shots)?;
        obs.push(Observation::from_fit(&fit(&trace, &cfg)?, &trace));
    }
    let obs: [Observation; 3] = obs.try_into().expect("three traces");
    let est = learn_chain(spec.n, site, &obs, 2.0)?;

    println!(
        "h     = {:.4} +- {:.4}  (truth {})",
        est.field.value, est.field.sd, spec.field
    );
    println!(
        "J     = {:.4} +- {:.4}  (truth {})",
        est.hopping.value, est.hopping.sd, spec.hopping
    );
    println!("K(0)  = {:.3} +- {:.3}", est.k0.value, est.k0.sd);
    println!("K'(0) = {:.3} +- {:.3}", est.k1.value, est.k1.sd);

    let as_kernel = |e: memkern::learner::Estimate, order| KernelEstimate {
        a: site,
        b: site + 2,
        order,
        re: e.value,
        im: 0.0,
        re_sd: e.sd,
        im_sd: 0.0,
    };
    let m = mode_params_from_kernel(as_kernel(est.k0, 0), as_kernel(est.k1, 1))?;
    println!(
        "v = {:.3} +- {:.3}, gamma = {:.2} +- {:.2}, resolved: {}",
        m.v.value, m.v.sd, m.gamma.value, m.gamma.sd, m.resolved
    );
    Ok(())
}
