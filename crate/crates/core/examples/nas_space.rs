//! Sample backbones from the architecture space under a FLOPs cap and
//! show what the configuration encoder sees.

use hyperfd::autodiff::seeded_rng;
use hyperfd::space::{arch_to_graph, estimate_flops, nas_space_size, sample_nas, NasArch, RES_360P};

fn describe(a: &NasArch) -> String {
    a.stages()
        .iter()
        .map(|s| s.iter().map(|b| format!("{}x{}", b.expand, b.kernel)).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn main() -> hyperfd::Result<()> {
    println!("space size ~ {:.3e}", nas_space_size());
    let mut rng = seeded_rng(5);
    let cap = 600_000_000;
    for _ in 0..5 {
        let a = sample_nas(&mut rng, Some(cap))?;
        let g = arch_to_graph(&a);
        println!(
            "{:>5.0} MFLOPs, {:>2} blocks, {:>2} nodes: {}",
            estimate_flops(&a, RES_360P)? as f64 / 1e6,
            a.block_count(),
            g.node_count(),
            describe(&a)
        );
    }
    Ok(())
}
