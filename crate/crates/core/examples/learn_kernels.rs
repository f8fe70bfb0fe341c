//! Full spin pipeline on the two-qubit model: plan, exact traces, sampling,
//! fits, Hamiltonian and kernel inversion with offsets subtracted. Runs once
//! on exact means and once with shot noise; first kernel derivatives need
//! third trace derivatives and so far more shots than the Hamiltonian.
//!
//! cargo run --release --example learn_kernels

use std::collections::BTreeMap;

use memkern::cli::reference_instance;
use memkern::fitter::{fit, uniform_grid, FitConfig, Robust};
use memkern::learner::{learn_kernels, recover_lambda, KernelProblem, Observation};
use memkern::model::kernel_derivative;
use memkern::pauli::PauliString;
use memkern::planner::{plan_model, PlanOptions};
use memkern::sampler::{sample_trace, ShotConfig};
use memkern::sim_exact::{ChannelQuery, PseudomodeEmbedding};

fn main() -> memkern::error::Result<()> {
    let model = reference_instance();
    let plan = plan_model(
        &model,
        &PlanOptions {
            max_kernel_order: 1,
            general_kernels: true,
            ..Default::default()
        },
    );
    let joint = PseudomodeEmbedding::default().build(&model)?;
    let times = uniform_grid(1e-3, 0.05, 12);
    let cfg = FitConfig {
        degree: 4,
        robust: Robust::None,
    };
    for shots in [0, 10_000_000_000] {
        println!(
            "--- {}",
            if shots == 0 {
                "exact means".to_string()
            } else {
                format!("{shots} shots per time")
            }
        );
        let shots = ShotConfig {
            shots,
            batches: 1,
            master_seed: 1,
        };
        run(&model, &plan, &joint, &times, &shots, &cfg)?;
    }
    Ok(())
}

fn run(
    model: &memkern::model::NoiseModel,
    plan: &memkern::planner::Plan,
    joint: &memkern::sim_exact::JointSystem,
    times: &[f64],
    shots: &ShotConfig,
    cfg: &FitConfig,
) -> memkern::error::Result<()> {
    let mut observations = BTreeMap::new();
    for s in plan.hamiltonian.iter().chain(&plan.settings) {
        let exact = joint.channel(&ChannelQuery::from_setting(s), times)?;
        let trace = sample_trace(&exact, s, times, shots)?;
        observations.insert(s.id, Observation::from_fit(&fit(&trace, cfg)?, &trace));
    }

    let lambda = recover_lambda(&plan.hamiltonian, &observations)?;
    for (t, e) in model.hamiltonian.iter().zip(&lambda) {
        println!(
            "lambda[{}] = {:+.5} +- {:.5}  (truth {:+})",
            t.pauli, e.value, e.sd, t.coeff
        );
    }

    let system: Vec<(PauliString, f64)> = model
        .hamiltonian
        .iter()
        .zip(&lambda)
        .map(|(t, e)| (t.pauli.clone(), e.value))
        .collect();
    let couplings: Vec<PauliString> = model.couplings.iter().map(|c| c.pauli.clone()).collect();
    let problem = KernelProblem {
        plan,
        couplings: &couplings,
        system: &system,
        max_kernel_order: 1,
        smooth: false,
        subtract_offsets: true,
    };
    let learned = learn_kernels(&problem, &observations);
    if let Some(f) = &learned.failure {
        println!("kernel inversion failed: {f}");
    }
    for e in &learned.estimates {
        let truth = kernel_derivative(&model.kernel, e.a, e.b, e.order);
        println!(
            "K[{},{}]^({}) = {:+.4}{:+.4}i +- ({:.4}, {:.4})  truth {:+.4}{:+.4}i",
            e.a, e.b, e.order, e.re, e.im, e.re_sd, e.im_sd, truth.re, truth.im
        );
    }
    println!("residual ratio per order: {:?}", learned.residual_ratio);
    Ok(())
}
