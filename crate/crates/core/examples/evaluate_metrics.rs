//! Discrimination and calibration metrics on hand-made scores.
//!
//! ```bash
//! cargo run --example evaluate_metrics
//! ```

use outcome_align::metrics::{auprc, auroc, brier, ece, MetricsReport};
use outcome_align::Error;

fn main() -> outcome_align::Result<()> {
    let labels = [0u8, 0, 1, 0, 1, 1, 0, 1];
    let scores = [0.10, 0.35, 0.40, 0.45, 0.70, 0.80, 0.20, 0.65];

    println!("AUROC {:.4}", auroc(&scores, &labels)?);
    println!("AUPRC {:.4}", auprc(&scores, &labels)?);
    println!("Brier {:.4}", brier(&scores, &labels)?);
    for bins in [1, 4, 10] {
        println!("ECE with {bins:>2} bins {:.4}", ece(&scores, &labels, bins)?);
    }

    // Squashing scores toward 0.5 keeps the ranking and so keeps AUROC,
    // while calibration error moves.
    let squashed: Vec<f64> = scores.iter().map(|s| 0.5 + 0.2 * (s - 0.5)).collect();
    let report = MetricsReport::compute(&squashed, &labels, 10)?;
    print!("\nsquashed scores\n{}", report.to_kv_text());

    match auroc(&[0.3, 0.6], &[1, 1]) {
        Err(Error::MetricUndefined(why)) => println!("\nsingle-class AUROC: undefined ({why})"),
        other => println!("\nunexpected: {other:?}"),
    }
    Ok(())
}
