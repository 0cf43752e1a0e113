//! Finite-difference check of every loss gradient, then the same check with
//! the gradient reversal sign deliberately flipped.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seed]
//! ```

use scda::gradcheck::{gradcheck, GradcheckOptions};

fn main() -> scda::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let ok = gradcheck(seed, GradcheckOptions::default())?;
    print!("{}", ok.to_text());
    let faulty = gradcheck(seed, GradcheckOptions { inject_grl_fault: true })?;
    println!("\nwith the reversal sign flipped:");
    print!("{}", faulty.to_text());
    Ok(())
}
