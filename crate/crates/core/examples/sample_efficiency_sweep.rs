//! Train with and without the regularizer on nested fractions of the training
//! split and print the resulting table.
//!
//! ```bash
//! cargo run --release --example sample_efficiency_sweep -- [epochs]
//! ```

use outcome_align::model::ModelDims;
use outcome_align::synthcohort::{generate_cohort, split_cohort, CohortSpec};
use outcome_align::trainkit::{sweep_sample_efficiency, sweep_to_csv, TrainConfig};

fn main() -> outcome_align::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let cohort = generate_cohort(&CohortSpec::default())?;
    let (train_set, val, _) = split_cohort(&cohort, (0.8, 0.1, 0.1), 0)?;
    let config = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let fractions = [0.1, 0.25, 0.5, 1.0];
    let seeds = [1, 2, 3];
    let rows = sweep_sample_efficiency(&config, &train_set, &val, &ModelDims::default(), &fractions, &seeds)?;
    print!("{}", sweep_to_csv(&rows));

    println!("\nmean validation AUROC");
    println!("fraction  lambda=0  lambda={}", config.objective.lambda);
    for f in fractions {
        let mean = |lambda_on: bool| {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.fraction == f && (r.lambda > 0.0) == lambda_on)
                .map(|r| r.auroc)
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        println!("{f:>8}  {:>8.4}  {:>8.4}", mean(false), mean(true));
    }
    Ok(())
}
