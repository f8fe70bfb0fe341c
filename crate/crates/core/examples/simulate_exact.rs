//! Evolve a system plus pseudomode and compare generator derivatives at
//! zero with central finite differences of the simulated trace.
//!
//! cargo run --example simulate_exact

use memkern::cli::reference_instance;
use memkern::pauli::PauliString;
use memkern::planner::WSpec;
use memkern::sim_exact::{ChannelQuery, PseudomodeEmbedding};

fn main() -> memkern::error::Result<()> {
    let model = reference_instance();
    let joint = PseudomodeEmbedding::default().build(&model)?;
    let q = ChannelQuery {
        prepared: "X0".parse::<PauliString>()?,
        observable: "Y0".parse()?,
        w: WSpec::Identity,
    };

    let times: Vec<f64> = (0..=5).map(|k| 0.02 * k as f64).collect();
    for (t, b) in times.iter().zip(joint.channel(&q, &times)?) {
        println!("t = {t:.2}  B = {b:+.6}");
    }

    let exact = joint.channel_derivatives(&q, 4);
    let fd = joint.finite_difference_derivatives(&q, 4, 0.02)?;
    for m in 0..=4 {
        println!(
            "B^({m})(0): generator {:+.8}  finite differences {:+.8}",
            exact[m], fd[m].value
        );
    }
    Ok(())
}
