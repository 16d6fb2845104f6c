//! Train with and without the geometry regularizer on the default synthetic
//! cohort and compare held-out discrimination and embedding geometry.
//!
//! ```bash
//! cargo run --release --example train_outcome_aligned -- [epochs] [seed] [lambda]
//! ```

use std::time::Instant;

use outcome_align::metrics::gaussian_bayes_auroc;
use outcome_align::model::ModelDims;
use outcome_align::synthcohort::{generate_cohort, split_cohort, CohortSpec};
use outcome_align::trainkit::{evaluate, train, TrainConfig};

fn main() -> outcome_align::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lambda = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.05);

    let spec = CohortSpec::default();
    let cohort = generate_cohort(&spec)?;
    let (train_set, val, test) = split_cohort(&cohort, (0.8, 0.1, 0.1), 0)?;
    println!(
        "cohort: n={} prevalence={:.3}; Bayes AUROC ceiling {:.4}",
        cohort.len(),
        cohort.prevalence(),
        gaussian_bayes_auroc(spec.effect_size)?
    );

    let dims = ModelDims::default();
    for lambda in [0.0, lambda] {
        let mut config = TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        };
        config.objective.lambda = lambda;
        let start = Instant::now();
        let (params, history) = train(&config, &train_set, &val, cohort.schema, &dims)?;
        println!("\nlambda = {lambda} ({:.1}s)", start.elapsed().as_secs_f64());
        for r in &history.records {
            let m = r.val_metrics.as_ref().unwrap();
            let g = r.val_geometry.as_ref().unwrap();
            println!(
                "  epoch {:>2}  sup {:.4}  batch R {:.3}  val AUROC {:.4}  val R {:.4}",
                r.epoch,
                r.mean_sup,
                r.mean_rdisc.unwrap_or(f64::NAN),
                m.auroc,
                g.rayleigh
            );
        }
        let (m, g) = evaluate(&params, &test, config.objective.epsilon)?;
        println!(
            "  test: AUROC {:.4} AUPRC {:.4} Brier {:.4} ECE {:.4} | gap² {:.3} tr Σw {:.3} R {:.4}",
            m.auroc, m.auprc, m.brier, m.ece, g.mean_gap_sq, g.scatter_trace, g.rayleigh
        );
    }
    Ok(())
}
