//! Fit a feature transform to a planted linear drift and compare it with
//! the closed-form least-squares answer.

use hyperfd::autodiff::seeded_rng;
use hyperfd::transform::{least_squares_oracle, TransformMatrix};

fn main() -> hyperfd::Result<()> {
    let d = 8;
    let n = 3 * d;
    let mut rng = seeded_rng(11);
    let a: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.normal() / (d as f64).sqrt()).collect()).collect();
    let old: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let cur: Vec<Vec<f64>> = old
        .iter()
        .map(|x| (0..d).map(|r| (0..d).map(|c| a[r][c] * x[c]).sum::<f64>() + 1e-3 * rng.normal()).collect())
        .collect();

    let oracle = least_squares_oracle(&old, &cur, 1)?;
    let best = oracle.loss(&old, &cur)?;
    let mut z = TransformMatrix::identity(d, 1);
    println!("{:>6} {:>12} {:>10}", "steps", "loss", "vs best");
    let mut done = 0;
    for steps in [100, 500, 1000, 2500, 5000] {
        z.train(&old, &cur, steps - done, 5e-3)?;
        done = steps;
        let l = z.loss(&old, &cur)?;
        println!("{steps:>6} {l:>12.4e} {:>9.2}%", 100.0 * (l / best - 1.0));
    }

    let planted: Vec<f64> = a.into_iter().flatten().collect();
    let err: f64 = z.z.values().iter().zip(&planted).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = planted.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("|Z - A| / |A| = {:.2e}", err / norm);
    Ok(())
}
