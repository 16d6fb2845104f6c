//! Compare analytic gradients of every model component against central
//! finite differences, then corrupt one component to watch the check fail.
//!
//! ```bash
//! cargo run --release --example gradient_check -- [trials]
//! ```

use outcome_align::gradcheck::{run_gradcheck, Component, GradcheckConfig, GRADCHECK_TOLERANCE};

fn main() -> outcome_align::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let config = GradcheckConfig {
        trials,
        ..GradcheckConfig::default()
    };
    for perturb in [None, Some(Component::Rayleigh)] {
        let report = run_gradcheck(&GradcheckConfig { perturb, ..config.clone() })?;
        let label = perturb.map_or("clean".to_string(), |c| format!("corrupted {}", c.name()));
        println!("{label} ({} trials, tolerance {GRADCHECK_TOLERANCE:e})", report.trials);
        for c in &report.components {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            println!("  {verdict} {:<10} max relative discrepancy {:.2e}", c.component.name(), c.max_discrepancy);
        }
    }
    Ok(())
}
