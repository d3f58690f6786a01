//! Finite-difference gradient check of the tiny denoiser, with and without the road encoder.
//!
//! cargo run --release --example grad_check

use blocktraj::config::RunConfig;
use blocktraj::pipeline;

fn main() -> blocktraj::error::Result<()> {
    for use_rne in [true, false] {
        let mut cfg = RunConfig::default();
        cfg.model.use_rne = use_rne;
        let r = pipeline::grad_check(&cfg)?;
        println!("road encoder {use_rne}: {} elements, max relative error {:.2e}", r.checked, r.max_error());
        for (name, err) in &r.groups {
            println!("  {name:<24} {err:.2e}");
        }
        if !r.passes() {
            println!("  failed: {}", r.failures().join(", "));
        }
    }
    Ok(())
}
