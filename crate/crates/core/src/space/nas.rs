use std::fmt;
use std::str::FromStr;

use crate::autodiff::{RngStream, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub min_depth: usize,
    pub max_depth: usize,
    pub width: usize,
    pub stride: usize,
    /// Stage with a single fixed `(expand, kernel)` block.
    pub fixed: Option<(u8, u8)>,
}

const fn stage(min_depth: usize, max_depth: usize, width: usize, stride: usize) -> StageSpec {
    StageSpec {
        min_depth,
        max_depth,
        width,
        stride,
        fixed: None,
    }
}

pub const NAS_STAGES: [StageSpec; 7] = [
    StageSpec {
        min_depth: 1,
        max_depth: 1,
        width: 8,
        stride: 1,
        fixed: Some((1, 3)),
    },
    stage(1, 3, 12, 2),
    stage(1, 3, 16, 2),
    stage(2, 4, 32, 2),
    stage(3, 4, 48, 1),
    stage(2, 4, 80, 2),
    stage(1, 1, 160, 1),
];

pub const EXPAND_CHOICES: [u8; 2] = [4, 6];
pub const KERNEL_CHOICES: [u8; 3] = [3, 5, 7];

/// Stem convolution ahead of the searchable stages: 3x3, stride 2, 3 -> 16.
pub const STEM_CHANNELS: usize = 16;
pub const STEM_STRIDE: usize = 2;
pub const STEM_KERNEL: usize = 3;

/// 360P frame size, width x height.
pub const RES_360P: (usize, usize) = (640, 360);

pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Block {
    pub expand: u8,
    pub kernel: u8,
}

/// Backbone architecture: the blocks of each of the seven stages.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NasArch {
    stages: Vec<Vec<Block>>,
}

impl NasArch {
    pub fn new(stages: Vec<Vec<Block>>) -> Result<Self> {
        let a = Self { stages };
        a.validate()?;
        Ok(a)
    }

    fn validate(&self) -> Result<()> {
        if self.stages.len() != NAS_STAGES.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} stages, got {}",
                NAS_STAGES.len(),
                self.stages.len()
            )));
        }
        for (s, (blocks, spec)) in self.stages.iter().zip(&NAS_STAGES).enumerate() {
            if blocks.len() < spec.min_depth || blocks.len() > spec.max_depth {
                return Err(Error::InvalidConfig(format!(
                    "stage {} depth {} outside {}..={}",
                    s + 1,
                    blocks.len(),
                    spec.min_depth,
                    spec.max_depth
                )));
            }
            for b in blocks {
                let ok = match spec.fixed {
                    Some((e, k)) => b.expand == e && b.kernel == k,
                    None => EXPAND_CHOICES.contains(&b.expand) && KERNEL_CHOICES.contains(&b.kernel),
                };
                if !ok {
                    return Err(Error::InvalidConfig(format!(
                        "stage {} block e{}k{} not allowed",
                        s + 1,
                        b.expand,
                        b.kernel
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> &[Vec<Block>] {
        &self.stages
    }

    pub fn block_count(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    /// Architecture with every stage at its minimum depth and the given block.
    pub fn uniform_min(block: Block) -> Result<Self> {
        let stages = NAS_STAGES
            .iter()
            .map(|s| {
                let b = s.fixed.map_or(block, |(expand, kernel)| Block { expand, kernel });
                vec![b; s.min_depth]
            })
            .collect();
        Self::new(stages)
    }

    /// Mutable access to blocks for constructing variants; revalidated.
    pub fn with_stage(&self, stage: usize, blocks: Vec<Block>) -> Result<Self> {
        let mut stages = self.stages.clone();
        *stages
            .get_mut(stage)
            .ok_or_else(|| Error::InvalidConfig(format!("no stage {stage}")))? = blocks;
        Self::new(stages)
    }
}

/// Number of distinct architectures: per searchable stage the sum over
/// allowed depths of `6^depth`, multiplied across stages.
pub fn nas_space_size() -> f64 {
    let choices = (EXPAND_CHOICES.len() * KERNEL_CHOICES.len()) as f64;
    NAS_STAGES
        .iter()
        .filter(|s| s.fixed.is_none())
        .map(|s| {
            (s.min_depth..=s.max_depth)
                .map(|d| choices.powi(d as i32))
                .sum::<f64>()
        })
        .product()
}

fn out_extent(x: usize, stride: usize) -> usize {
    x.div_ceil(stride)
}

/// Multiply-accumulate count of the backbone at `resolution = (w, h)`.
///
/// Stem: dense 3x3 stride-2 convolution. Each inverted-residual block
/// contributes a pointwise expansion (skipped at expand ratio 1), a k x k
/// depthwise convolution carrying the stage stride on the first block, and
/// a pointwise projection.
pub fn estimate_flops(a: &NasArch, resolution: (usize, usize)) -> Result<u64> {
    let (mut w, mut h) = resolution;
    if w == 0 || h == 0 {
        return Err(Error::InvalidConfig("resolution must be positive".into()));
    }
    w = out_extent(w, STEM_STRIDE);
    h = out_extent(h, STEM_STRIDE);
    let mut total = (w * h * 3 * STEM_CHANNELS * STEM_KERNEL * STEM_KERNEL) as u64;
    let mut c_in = STEM_CHANNELS;
    for (blocks, spec) in a.stages.iter().zip(&NAS_STAGES) {
        for (i, b) in blocks.iter().enumerate() {
            let stride = if i == 0 { spec.stride } else { 1 };
            let hidden = c_in * b.expand as usize;
            let (wo, ho) = (out_extent(w, stride), out_extent(h, stride));
            if b.expand > 1 {
                total += (w * h * c_in * hidden) as u64;
            }
            let k = b.kernel as usize;
            total += (wo * ho * hidden * k * k) as u64;
            total += (wo * ho * hidden * spec.width) as u64;
            w = wo;
            h = ho;
            c_in = spec.width;
        }
    }
    Ok(total)
}

/// Uniform depth per stage, then uniform `(expand, kernel)` per block;
/// resampled until the estimate at 360P is within `flops_cap`.
pub fn sample_nas(rng: &mut RngStream, flops_cap: Option<u64>) -> Result<NasArch> {
    for _ in 0..MAX_REJECTIONS {
        let stages = NAS_STAGES
            .iter()
            .map(|spec| {
                let depth = spec.min_depth + rng.below(spec.max_depth - spec.min_depth + 1);
                (0..depth)
                    .map(|_| match spec.fixed {
                        Some((expand, kernel)) => Block { expand, kernel },
                        None => Block {
                            expand: EXPAND_CHOICES[rng.below(EXPAND_CHOICES.len())],
                            kernel: KERNEL_CHOICES[rng.below(KERNEL_CHOICES.len())],
                        },
                    })
                    .collect()
            })
            .collect();
        let arch = NasArch { stages };
        match flops_cap {
            None => return Ok(arch),
            Some(cap) if estimate_flops(&arch, RES_360P)? <= cap => return Ok(arch),
            Some(_) => {}
        }
    }
    Err(Error::RejectionExhausted(MAX_REJECTIONS))
}

/// Block nodes and two virtual nodes, with node features and an adjacency
/// where `adj[v][u] = 1` means `u` sends to `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub features: Tensor,
    pub adjacency: Tensor,
}

impl Graph {
    pub fn node_count(&self) -> usize {
        self.features.rows()
    }
}

/// One-hot expand {1,4,6}, kernel {3,5,7}, stage 1..7, and two virtual-node
/// indicators.
pub const NODE_FEATURES: usize = 3 + 3 + 7 + 2;

pub fn arch_to_graph(a: &NasArch) -> Graph {
    let m = a.block_count();
    let n = m + 2;
    let mut feat = vec![0.0; n * NODE_FEATURES];
    let mut adj = vec![0.0; n * n];
    let mut v = 0;
    for (s, blocks) in a.stages.iter().enumerate() {
        for b in blocks {
            let row = &mut feat[v * NODE_FEATURES..(v + 1) * NODE_FEATURES];
            let e = match b.expand {
                1 => 0,
                4 => 1,
                _ => 2,
            };
            let k = KERNEL_CHOICES.iter().position(|&k| k == b.kernel).unwrap_or(0);
            row[e] = 1.0;
            row[3 + k] = 1.0;
            row[6 + s] = 1.0;
            if v + 1 < m {
                adj[(v + 1) * n + v] = 1.0;
            }
            v += 1;
        }
    }
    for virt in 0..2 {
        let node = m + virt;
        feat[node * NODE_FEATURES + 13 + virt] = 1.0;
        for b in 0..m {
            adj[node * n + b] = 1.0;
            adj[b * n + node] = 1.0;
        }
    }
    Graph {
        features: Tensor::matrix(n, NODE_FEATURES, feat).expect("sized above"),
        adjacency: Tensor::matrix(n, n, adj).expect("sized above"),
    }
}

impl fmt::Display for NasArch {
    /// Stages joined by `_`, blocks within a stage by `-`, each block as
    /// `e<expand>k<kernel>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|bs| {
                bs.iter()
                    .map(|b| format!("e{}k{}", b.expand, b.kernel))
                    .collect::<Vec<_>>()
                    .join("-")
            })
            .collect();
        f.write_str(&stages.join("_"))
    }
}

impl FromStr for NasArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: String| Error::ConfigParse {
            input: s.to_string(),
            reason,
        };
        let stages = s
            .split('_')
            .map(|stage| {
                stage
                    .split('-')
                    .map(|blk| {
                        let rest = blk
                            .strip_prefix('e')
                            .ok_or_else(|| err(format!("block `{blk}` must start with `e`")))?;
                        let (e, k) = rest
                            .split_once('k')
                            .ok_or_else(|| err(format!("block `{blk}` lacks `k`")))?;
                        let expand = e.parse().map_err(|_| err(format!("bad expand in `{blk}`")))?;
                        let kernel = k.parse().map_err(|_| err(format!("bad kernel in `{blk}`")))?;
                        Ok(Block { expand, kernel })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        NasArch::new(stages).map_err(|e| err(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    const B: Block = Block {
        expand: 4,
        kernel: 3,
    };

    #[test]
    fn minimal_graph_size() {
        let a = NasArch::uniform_min(B).unwrap();
        assert_eq!(a.block_count(), 11);
        let g = arch_to_graph(&a);
        assert_eq!(g.node_count(), 13);
        // chain edge 0 -> 1
        assert_eq!(g.adjacency.get2(1, 0), 1.0);
        assert_eq!(g.adjacency.get2(0, 1), 0.0);
        // virtual nodes are wired both ways to every block
        for b in 0..11 {
            assert_eq!(g.adjacency.get2(11, b), 1.0);
            assert_eq!(g.adjacency.get2(b, 12), 1.0);
        }
    }

    #[test]
    fn space_size_matches_product() {
        let s2: f64 = 6. + 36. + 216.;
        let s4: f64 = 36. + 216. + 1296.;
        let s5: f64 = 216. + 1296.;
        let expected = s2 * s2 * s4 * s5 * s4 * 6.0;
        assert_eq!(nas_space_size(), expected);
        assert!((nas_space_size() / 1.447e15 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn flops_monotone() {
        let a = NasArch::uniform_min(B).unwrap();
        let base = estimate_flops(&a, RES_360P).unwrap();
        let bigger_k = a
            .with_stage(3, vec![Block { expand: 4, kernel: 5 }, B])
            .unwrap();
        assert!(estimate_flops(&bigger_k, RES_360P).unwrap() > base);
        for s in 1..7 {
            let spec = NAS_STAGES[s];
            if spec.max_depth > spec.min_depth {
                let deeper = a.with_stage(s, vec![B; spec.min_depth + 1]).unwrap();
                assert!(estimate_flops(&deeper, RES_360P).unwrap() > base);
            }
        }
    }

    #[test]
    fn flops_scale_with_resolution() {
        // every map stays even through a total stride of 32 at 1024 x 512
        let a = NasArch::uniform_min(B).unwrap();
        let f1 = estimate_flops(&a, (1024, 512)).unwrap();
        let f2 = estimate_flops(&a, (2048, 1024)).unwrap();
        assert_eq!(f2, 4 * f1);
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = seeded_rng(3);
        for _ in 0..200 {
            let a = sample_nas(&mut rng, None).unwrap();
            assert_eq!(a.to_string().parse::<NasArch>().unwrap(), a);
        }
        assert!("e1k3".parse::<NasArch>().is_err());
    }

    #[test]
    fn impossible_cap_errors() {
        assert!(matches!(
            sample_nas(&mut seeded_rng(0), Some(1)),
            Err(Error::RejectionExhausted(_))
        ));
    }
}
