//! Generate a synthetic cohort, inspect one trajectory, and round-trip it
//! through the line-delimited file format.
//!
//! ```bash
//! cargo run --release --example generate_cohort -- [n] [seed]
//! ```

use outcome_align::metrics::gaussian_bayes_auroc;
use outcome_align::synthcohort::{generate_cohort_with_latents, read_cohort_from, write_cohort_to, CohortSpec};

fn main() -> outcome_align::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let spec = CohortSpec {
        n_patients: args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000),
        seed: args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7),
        ..CohortSpec::default()
    };
    let (cohort, latents) = generate_cohort_with_latents(&spec)?;

    let events: Vec<usize> = cohort.trajectories.iter().map(|t| t.events.len()).collect();
    println!("patients      {}", cohort.len());
    println!("prevalence    {:.3} (target {})", cohort.prevalence(), spec.prevalence);
    println!(
        "events/pt     min {} mean {:.1} max {}",
        events.iter().min().unwrap(),
        events.iter().sum::<usize>() as f64 / events.len() as f64,
        events.iter().max().unwrap()
    );
    println!("Bayes AUROC   {:.4} at effect size {}", gaussian_bayes_auroc(spec.effect_size)?, spec.effect_size);

    let first = &cohort.trajectories[0];
    println!("\n{} label={} static={:.3?}", first.patient_id, first.label, first.static_features);
    println!("  latent signal {:.3?}", latents[0].signal);
    for e in first.events.iter().take(5) {
        println!("  t={:>7.2}  feature {:>2}  value {:+.3}", e.time, e.feature_id, e.value);
    }

    let mut buf = Vec::new();
    write_cohort_to(&cohort, &mut buf)?;
    let back = read_cohort_from(buf.as_slice())?;
    println!(
        "\nserialized {} bytes, round trip identical: {}",
        buf.len(),
        back.trajectories == cohort.trajectories
    );
    Ok(())
}
