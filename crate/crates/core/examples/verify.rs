//! Numerical self-checks: free-fermion dynamics against the dense master
//! equation, offsets against finite differences, and Pauli products against
//! dense matrices.
//!
//! cargo run --release --example verify

fn main() -> memkern::error::Result<()> {
    for c in memkern::cli::cmd_verify()? {
        println!(
            "{} {}: {:.2e} (threshold {:.0e})",
            if c.pass { "ok  " } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    Ok(())
}
