//! Smallest end-to-end use: build a world, warm a server up on the offline
//! benchmark, then let it pick configurations for each new task.

use hyperfd::benchdata::gen_synthetic_world;
use hyperfd::config::RunConfig;
use hyperfd::metrics::{run_online, warmed_server};
use hyperfd::protocol::Transcript;

fn main() -> hyperfd::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("warmup_steps", "300")?;
    let settings = cfg.server_settings()?;
    let mut world = gen_synthetic_world(&cfg.world_spec(), cfg.space)?;
    if let Some(a) = cfg.augment_spec() {
        world.augment_offline(&a)?;
    }

    let server = warmed_server(&world, &settings, cfg.seed)?;
    let (rows, _) = run_online(&world, server, cfg.seed, &mut Transcript::new())?;
    for r in rows {
        println!("{:<10} rank {:>6.2}%  AP {:.3}  {}", r.dataset_id, r.norm_rank, r.ap_test, r.config);
    }
    Ok(())
}
