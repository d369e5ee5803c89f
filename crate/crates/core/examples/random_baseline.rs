//! Random search against its closed-form expectations.
//!
//! `cargo run --release --example random_baseline -- 200`

use hyperfd::benchdata::gen_synthetic_world;
use hyperfd::config::RunConfig;
use hyperfd::metrics::{expected_random_rank, mean, run_random, std_dev};

fn main() -> hyperfd::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse().expect("seed count")).unwrap_or(100);
    let cfg = RunConfig::default();
    let settings = cfg.server_settings()?;
    let world = gen_synthetic_world(&cfg.world_spec(), cfg.space)?;

    let mut ranks = Vec::new();
    let mut gains = Vec::new();
    for seed in 0..seeds {
        for r in run_random(&world, &settings, seed)? {
            ranks.push(r.norm_rank);
            gains.push(r.delta_ap);
        }
    }
    let oracle = expected_random_rank(cfg.pool_size, cfg.budget)?;
    let se = std_dev(&ranks) / (ranks.len() as f64).sqrt();
    println!("picks          {}", ranks.len());
    println!("mean rank      {:.3} ± {:.3}", mean(&ranks), se);
    println!("expected rank  {oracle:.3}");
    println!("mean ΔAP       {:+.4}", mean(&gains));
    Ok(())
}
