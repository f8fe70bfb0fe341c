//! Run a config-driven shot sweep and print the error-versus-shots table,
//! the same path the `memkern run` command takes.
//!
//! cargo run --release --example shot_sweep -- examples/configs/chain_gaussian.toml

use std::path::PathBuf;

use memkern::cli::{cmd_report, cmd_run, Experiment};

fn main() -> memkern::error::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/chain_gaussian.toml")
        });
    let exp = Experiment::load(&path)?;
    println!("config hash {}", exp.config_hash);
    let out = cmd_run(&exp)?;
    for f in &out.failures {
        println!("failed: {f}");
    }
    print!("{}", cmd_report(&exp.output_dir)?);
    Ok(())
}
