//! Embedding geometry of two Gaussian clouds: mean gap, within-class scatter,
//! the Rayleigh quotient and the pooled Mahalanobis distance, plus the
//! Bayes AUROC implied by that distance.
//!
//! ```bash
//! cargo run --example geometry_report -- [separation]
//! ```

use outcome_align::metrics::{gaussian_bayes_auroc, geometry_report};
use outcome_align::ndcore::DenseArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> outcome_align::Result<()> {
    let separation: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let (n, d) = (4000, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 3 == 0) as u8;
        labels.push(y);
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            // Only the first axis carries the class; the last one is stretched.
            let shift = if j == 0 && y == 1 { separation } else { 0.0 };
            let stretch = if j == d - 1 { 3.0 } else { 1.0 };
            data.push(shift + stretch * noise);
        }
    }
    let z = DenseArray::from_rows(n, d, data)?;

    let g = geometry_report(&z, &labels, 1e-5)?;
    print!("{}", g.to_kv_text());
    let delta = g.mahalanobis_sq.map(f64::sqrt).unwrap_or(f64::NAN);
    println!("\nMahalanobis distance {delta:.3} (planted {separation})");
    println!("implied Bayes AUROC  {:.4}", gaussian_bayes_auroc(delta)?);
    println!("planted Bayes AUROC  {:.4}", gaussian_bayes_auroc(separation)?);
    Ok(())
}
