//! Mean normalized rank of the full method, its ablations and random
//! search over several seeds, with paired tests against the full method.
//!
//! `cargo run --release --example ablations -- seeds=5`

use std::time::Instant;

use hyperfd::benchdata::gen_synthetic_world;
use hyperfd::config::RunConfig;
use hyperfd::metrics::{paired_t_test, run_suite, Method};

fn main() -> hyperfd::Result<()> {
    let mut cfg = RunConfig {
        seeds: 4,
        ..RunConfig::default()
    };
    cfg.methods = [Method::full(), Method::Random].into_iter().chain(Method::ablations()).collect();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments are key=value");
        cfg.set(k, v)?;
    }
    let settings = cfg.server_settings()?;
    let mut world = gen_synthetic_world(&cfg.world_spec(), cfg.space)?;
    if let Some(a) = cfg.augment_spec() {
        world.augment_offline(&a)?;
    }

    let t = Instant::now();
    let reports = run_suite(&world, &cfg.methods, &settings, &cfg.seed_list(), cfg.parallel_seeds)?;
    let full: Vec<f64> = reports[0].seed_ranks().into_iter().map(|(_, r)| r).collect();
    println!("{:<18} {:>8} {:>8} {:>10}", "method", "rank", "ΔAP", "p(full<m)");
    for r in &reports {
        let mine: Vec<f64> = r.seed_ranks().into_iter().map(|(_, r)| r).collect();
        let p = if r.method == reports[0].method || full.len() < 2 {
            f64::NAN
        } else {
            paired_t_test(&full, &mine).map(|t| t.p_less).unwrap_or(f64::NAN)
        };
        println!(
            "{:<18} {:>8.2} {:>8.2} {:>10.4}",
            r.method, r.overall.mean_rank, r.overall.mean_delta_ap, p
        );
    }
    println!("{} seeds in {:.1?}", cfg.seeds, t.elapsed());
    Ok(())
}
