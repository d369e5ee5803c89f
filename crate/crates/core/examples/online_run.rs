//! One seed of the online loop on the default synthetic world, timed.
//!
//! Extra arguments are `key=value` config overrides, e.g.
//! `cargo run --release --example online_run -- hidden=32 seed=3`.

use std::time::Instant;

use hyperfd::benchdata::gen_synthetic_world;
use hyperfd::config::RunConfig;
use hyperfd::metrics::{mean, run_online, run_random, warmed_server};
use hyperfd::protocol::{ranking_ndcg, Transcript};
use hyperfd::autodiff::seeded_rng;

fn main() -> hyperfd::Result<()> {
    let mut cfg = RunConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments are key=value");
        cfg.set(k, v)?;
    }
    let settings = cfg.server_settings()?;

    let t0 = Instant::now();
    let mut world = gen_synthetic_world(&cfg.world_spec(), cfg.space)?;
    if let Some(a) = cfg.augment_spec() {
        world.augment_offline(&a)?;
    }
    println!("world: {} offline, {} tasks ({:.2?})", world.offline.len(), world.tasks().len(), t0.elapsed());

    let t1 = Instant::now();
    let probe = seeded_rng(cfg.seed).derive_str("probe");
    let fresh = hyperfd::protocol::ServerState::new(settings, world.offline.clone(), &seeded_rng(cfg.seed).derive_str("server"))?;
    let before = ranking_ndcg(&fresh.params, &settings.ranker, world.tasks(), &world.benchmark, &probe)?;
    let server = warmed_server(&world, &settings, cfg.seed)?;
    let after = ranking_ndcg(&server.params, &settings.ranker, world.tasks(), &world.benchmark, &probe)?;
    println!("warm-up: task NDCG {before:.4} -> {after:.4} ({:.2?})", t1.elapsed());

    let t2 = Instant::now();
    let mut transcript = Transcript::new();
    let (rows, server) = run_online(&world, server, cfg.seed, &mut transcript)?;
    let online: Vec<f64> = rows.iter().map(|r| r.norm_rank).collect();
    println!(
        "online: mean rank {:.2} over {} tasks, {} messages ({:.2?})",
        mean(&online),
        rows.len(),
        transcript.len(),
        t2.elapsed()
    );
    let end = ranking_ndcg(&server.params, &settings.ranker, world.tasks(), &world.benchmark, &probe)?;
    println!("after all tasks: task NDCG {end:.4}");

    let random: Vec<f64> = run_random(&world, &settings, cfg.seed)?.iter().map(|r| r.norm_rank).collect();
    println!("random: mean rank {:.2}", mean(&random));
    Ok(())
}
