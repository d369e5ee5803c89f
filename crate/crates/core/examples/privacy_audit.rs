//! Serve a short online run, then audit everything that crossed the wire.
//!
//! Prints the message kinds of the first task and the audit verdict, then
//! plants an image-level payload to show what a violation looks like.

use hyperfd::benchdata::gen_synthetic_world;
use hyperfd::config::RunConfig;
use hyperfd::metrics::{run_online, warmed_server};
use hyperfd::protocol::{audit_privacy, Transcript};

fn main() -> hyperfd::Result<()> {
    let mut cfg = RunConfig::default();
    for (k, v) in [("n_iters", "3"), ("n_trans", "3"), ("warmup_steps", "20"), ("warmup_triplets", "200")] {
        cfg.set(k, v)?;
    }
    let settings = cfg.server_settings()?;
    let world = gen_synthetic_world(&cfg.world_spec(), cfg.space)?;
    let server = warmed_server(&world, &settings, cfg.seed)?;

    let mut transcript = Transcript::new();
    run_online(&world, server, cfg.seed, &mut transcript)?;
    for (kind, n) in transcript.kind_counts(1)? {
        println!("task 1  {kind:<24} {n}");
    }
    let report = audit_privacy(&transcript)?;
    println!("{} messages, {} violations", report.messages, report.violations.len());

    transcript.push_raw(r#"{"task":99,"seq":0,"payload":{"kind":"meta_feature_upload","records":[{"pixels":[0.1,0.2]}]}}"#);
    for v in audit_privacy(&transcript)?.violations {
        println!("line {}: {} ({})", v.line, v.path, v.reason);
    }
    Ok(())
}
