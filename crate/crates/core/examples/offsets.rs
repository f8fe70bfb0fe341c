//! Dyson-series offsets: the closed-system and lower-order-kernel parts of
//! a trace derivative that have to be removed before kernel inversion.
//!
//! cargo run --example offsets

use memkern::cli::reference_instance;
use memkern::offsets::{dyson_derivative, nested_integral, offset_m, DysonModel, TraceQuery};
use memkern::pauli::PauliString;
use memkern::planner::WSpec;
use memkern::sim_exact::{ChannelQuery, PseudomodeEmbedding};

fn main() -> memkern::error::Result<()> {
    println!(
        "int_0^1 dt1 int_0^t1 dt2 t1^3 t2 = {:.6}",
        nested_integral(&[3, 1], 1.0)
    );

    let model = reference_instance();
    let dyson = DysonModel {
        system: model
            .hamiltonian
            .iter()
            .map(|t| (t.pauli.clone(), t.coeff))
            .collect(),
        couplings: model.couplings.iter().map(|c| c.pauli.clone()).collect(),
        kernel: model.kernel.to_table(2),
    };
    let prepared: PauliString = "Z0".parse()?;
    let observable: PauliString = "Z0".parse()?;
    let q = TraceQuery {
        prepared: prepared.clone(),
        observable: observable.clone(),
        w: WSpec::Identity,
        sign: 1.0,
    };
    let joint = PseudomodeEmbedding::default().build(&model)?;
    let exact = joint.channel_derivatives(
        &ChannelQuery {
            prepared,
            observable,
            w: WSpec::Identity,
        },
        4,
    );
    for m in 2..=4u32 {
        println!(
            "m = {m}: offset {:+.6}  full series {:+.6}  exact derivative {:+.6}",
            offset_m(&dyson, &q, m)?,
            dyson_derivative(&dyson, &q, m).re,
            exact[m as usize]
        );
    }
    Ok(())
}
