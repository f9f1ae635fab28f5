//! Central finite differences against reverse-mode gradients for every op.

use hardnet_mseg::autodiff::gradcheck_suite;

fn main() -> hardnet_mseg::Result<()> {
    for r in gradcheck_suite(7)? {
        println!(
            "{:<26} {:>10.2e} over {:>5} entries  {}",
            r.name,
            r.max_rel_err,
            r.checked,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    Ok(())
}
