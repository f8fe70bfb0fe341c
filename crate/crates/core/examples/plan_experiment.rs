//! Build a measurement plan for a two-qubit model with one damped mode and
//! print its settings per kernel pair and the round schedule.
//!
//! cargo run --example plan_experiment

use memkern::cli::reference_instance;
use memkern::planner::{plan_model, PlanOptions};

fn main() {
    let model = reference_instance();
    let opts = PlanOptions {
        max_kernel_order: 1,
        general_kernels: true,
        ..Default::default()
    };
    let plan = plan_model(&model, &opts);

    println!("{} Hamiltonian settings", plan.hamiltonian.len());
    for s in &plan.hamiltonian {
        println!(
            "  prepare {:<8} measure {}",
            s.prepared_input().to_string(),
            s.observable
        );
    }
    for pair in &plan.pairs {
        let n = plan
            .settings
            .iter()
            .filter(|s| {
                s.purpose
                    == memkern::planner::Purpose::Pair {
                        a: pair.a,
                        b: pair.b,
                    }
            })
            .count();
        println!(
            "pair ({}, {}) on region {:?}: {} targets, {} settings",
            pair.a,
            pair.b,
            pair.region,
            pair.targets.len(),
            n
        );
        for t in &pair.targets {
            println!("  xi({}, {}) under {:?}", t.left, t.right, t.w);
        }
    }
    for (k, round) in plan.schedule.rounds.iter().enumerate() {
        let labels: Vec<&str> = round.iter().map(|g| g.label.as_str()).collect();
        println!("round {k}: {}", labels.join(", "));
    }
}
