//! Desk-scale synthetic benchmark worlds with a planted linear latent
//! structure linking dataset features to configuration performance.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::kmeans::{clusters_to_subsets, kmeans_split, KMeansInit, DEFAULT_MAX_ITER, MIN_SUBSET_SIZE};
use super::table::{quantize, BenchmarkTable};
use crate::autodiff::{seeded_rng, sigmoid, RngStream};
use crate::error::{Error, Result};
use crate::metafeat::{gwap_merge, AnchorGroups, DatasetDescriptor, ImageFeatureRecord, LABEL_BLOCK, STAGES};
use crate::space::{encode_hpo_onehot, enumerate_hpo, sample_nas, Config, NasArch, SpaceKind, NAS_STAGES};

pub const CHANNELS: usize = 16;
/// The offline base dataset has this many times more images than a task.
pub const BASE_SCALE: usize = 8;
pub const BASE_CLUSTERS: usize = 6;
pub const BASE_CLUSTER_SPREAD: f64 = 1.2;
/// Spread of per-image latents around their dataset or cluster latent.
pub const IMAGE_SPREAD: f64 = 0.35;
pub const FEATURE_NOISE: f64 = 0.3;
/// Gain of the latent-to-feature maps, relative to unit-variance weights.
pub const FEATURE_SCALE: f64 = 0.3;
pub const NAS_CONFIGS: usize = 400;
pub const CONFIG_JITTER: f64 = 0.3;
pub const GLOBAL_WEIGHT: f64 = 0.5;
pub const AP_OFFSET: f64 = -0.4;
pub const AP_SCALE: f64 = 0.6;
/// Test-AP noise relative to the validation noise scale, in AP units.
pub const TEST_NOISE_RATIO: f64 = 0.1;
pub const BASE_ID: &str = "base";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    /// Offline base plus sequential tasks.
    pub datasets: usize,
    pub images_per_dataset: usize,
    pub latent_dim: usize,
    /// Validation noise on the logit scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            datasets: 12,
            images_per_dataset: 64,
            latent_dim: 4,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.datasets == 0 || self.images_per_dataset == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidConfig("world counts must be at least 1".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::InvalidConfig(format!("noise {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

/// Hidden generative state: everything needed to benchmark new datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureMap {
    /// `[stage][group]` of `C x L` weights and `C` biases.
    weights: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    labels: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
    boxes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub space: SpaceKind,
    /// Base dataset first, then the tasks in arrival order.
    pub datasets: Vec<DatasetDescriptor>,
    /// Offline datasets for warm-up: the base plus any augmented subsets.
    pub offline: Vec<DatasetDescriptor>,
    pub configs: Vec<Config>,
    pub benchmark: BenchmarkTable,
    latents: BTreeMap<String, Vec<f64>>,
    image_latents: Vec<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
    global: Vec<f64>,
}

fn gaussian(rng: &mut RngStream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn affine(w: &[f64], b: &[f64], u: &[f64]) -> Vec<f64> {
    let l = u.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| bias + w[r * l..(r + 1) * l].iter().zip(u).map(|(a, x)| a * x).sum::<f64>())
        .collect()
}

impl FeatureMap {
    fn new(l: usize, rng: &mut RngStream) -> Self {
        let scale = FEATURE_SCALE / (l as f64).sqrt();
        let mut block = |rows: usize| -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
            (0..STAGES)
                .map(|_| {
                    (0..3)
                        .map(|_| (gaussian(rng, rows * l, scale), gaussian(rng, rows, 0.5)))
                        .collect()
                })
                .collect()
        };
        let weights = block(CHANNELS);
        let labels = block(LABEL_BLOCK);
        let boxes = gaussian(rng, l, scale);
        Self { weights, labels, boxes }
    }

    fn record(&self, u: &[f64], rng: &mut RngStream) -> (ImageFeatureRecord, usize) {
        let mut groups = |maps: &[(Vec<f64>, Vec<f64>)], squash: bool| {
            let mut g: Vec<Vec<f64>> = maps
                .iter()
                .map(|(w, b)| {
                    affine(w, b, u)
                        .into_iter()
                        .map(|v| {
                            let v = v + FEATURE_NOISE * rng.normal();
                            if squash {
                                sigmoid(v)
                            } else {
                                v
                            }
                        })
                        .collect()
                })
                .collect();
            let ign = g.pop().unwrap_or_default();
            let neg = g.pop().unwrap_or_default();
            let pos = g.pop().unwrap_or_default();
            AnchorGroups { pos, neg, ign }
        };
        let stages: Vec<AnchorGroups> = self.weights.iter().map(|m| groups(m, false)).collect();
        let labels: Vec<AnchorGroups> = self.labels.iter().map(|m| groups(m, true)).collect();
        let lean: f64 = self.boxes.iter().zip(u).map(|(a, b)| a * b).sum();
        let boxes = 1 + (4.0 * sigmoid(lean + 0.5 * rng.normal())) as usize;
        let to3 = |v: Vec<AnchorGroups>| -> [AnchorGroups; 3] { v.try_into().expect("three stages") };
        (
            ImageFeatureRecord {
                stages: to3(stages),
                labels: Some(to3(labels)),
            },
            boxes,
        )
    }
}

/// 15 values in `[-0.5, 0.5]`: normalized depth, mean expansion and mean
/// kernel of each searchable stage.
fn nas_descriptor(a: &NasArch) -> Vec<f64> {
    let mut out = Vec::new();
    for (spec, blocks) in NAS_STAGES.iter().zip(a.stages()) {
        if spec.fixed.is_some() || spec.min_depth == spec.max_depth {
            continue;
        }
        let n = blocks.len() as f64;
        out.push((n - spec.min_depth as f64) / (spec.max_depth - spec.min_depth) as f64 - 0.5);
        out.push(blocks.iter().map(|b| (b.expand as f64 - 4.0) / 2.0).sum::<f64>() / n - 0.5);
        out.push(blocks.iter().map(|b| (b.kernel as f64 - 3.0) / 4.0).sum::<f64>() / n - 0.5);
    }
    out
}

fn descriptor(c: &Config) -> Vec<f64> {
    match c {
        Config::Hpo(h) => encode_hpo_onehot(h),
        Config::Nas(a) => nas_descriptor(a),
    }
}

fn space_configs(space: SpaceKind, rng: &mut RngStream) -> Result<Vec<Config>> {
    match space {
        SpaceKind::Hpo => Ok(enumerate_hpo().into_iter().map(Config::Hpo).collect()),
        SpaceKind::Nas => {
            let mut seen = BTreeSet::new();
            let mut out = Vec::new();
            let mut attempts = 0;
            while out.len() < NAS_CONFIGS {
                attempts += 1;
                if attempts > 100 * NAS_CONFIGS {
                    return Err(Error::RejectionExhausted(attempts));
                }
                let a = sample_nas(rng, None)?;
                if seen.insert(a.clone()) {
                    out.push(Config::Nas(a));
                }
            }
            out.sort();
            Ok(out)
        }
    }
}

pub fn gen_synthetic_world(spec: &SyntheticWorldSpec, space: SpaceKind) -> Result<SyntheticWorld> {
    spec.validate()?;
    let root = seeded_rng(spec.seed);
    let l = spec.latent_dim;
    let map = FeatureMap::new(l, &mut root.derive_str("feature-map"));
    let configs = space_configs(space, &mut root.derive_str("configs"))?;

    let mut emb_rng = root.derive_str("embeddings");
    let dlen = descriptor(&configs[0]).len();
    let active = match space {
        SpaceKind::Hpo => 6.0,
        SpaceKind::Nas => dlen as f64 / 12.0,
    };
    let mix = gaussian(&mut emb_rng, dlen * l, 1.0 / active.sqrt());
    let mut embeddings = Vec::with_capacity(configs.len());
    let mut global = Vec::with_capacity(configs.len());
    for c in &configs {
        let d = descriptor(c);
        let w: Vec<f64> = (0..l)
            .map(|j| {
                (0..dlen).map(|i| d[i] * mix[i * l + j]).sum::<f64>() + CONFIG_JITTER * emb_rng.normal()
            })
            .collect();
        embeddings.push(w);
        global.push(emb_rng.normal());
    }

    let mut latent_rng = root.derive_str("latents");
    let mut image_rng = root.derive_str("images");
    let centers: Vec<Vec<f64>> = (0..BASE_CLUSTERS)
        .map(|_| gaussian(&mut latent_rng, l, BASE_CLUSTER_SPREAD))
        .collect();
    let mut latents = BTreeMap::new();
    let mut datasets = Vec::with_capacity(spec.datasets);

    let base_n = spec.images_per_dataset * BASE_SCALE;
    let mut image_latents = Vec::with_capacity(base_n);
    let mut records = Vec::with_capacity(base_n);
    let mut boxes = 0;
    for i in 0..base_n {
        let c = &centers[i % BASE_CLUSTERS];
        let u: Vec<f64> = c.iter().map(|v| v + IMAGE_SPREAD * image_rng.normal()).collect();
        let (r, b) = map.record(&u, &mut image_rng);
        records.push(r);
        boxes += b;
        image_latents.push(u);
    }
    latents.insert(BASE_ID.to_string(), mean_of(&image_latents, l));
    datasets.push(DatasetDescriptor::new(BASE_ID, records, boxes)?);

    for t in 1..spec.datasets {
        let id = format!("task-{t:02}");
        let z = gaussian(&mut latent_rng, l, 1.0);
        let mut records = Vec::with_capacity(spec.images_per_dataset);
        let mut boxes = 0;
        for _ in 0..spec.images_per_dataset {
            let u: Vec<f64> = z.iter().map(|v| v + IMAGE_SPREAD * image_rng.normal()).collect();
            let (r, b) = map.record(&u, &mut image_rng);
            records.push(r);
            boxes += b;
        }
        latents.insert(id.clone(), z);
        datasets.push(DatasetDescriptor::new(id, records, boxes)?);
    }

    let mut world = SyntheticWorld {
        spec: *spec,
        space,
        offline: vec![datasets[0].clone()],
        datasets,
        configs,
        benchmark: BenchmarkTable::new(space),
        latents,
        image_latents,
        embeddings,
        global,
    };
    let ids: Vec<String> = world.datasets.iter().map(|d| d.id.clone()).collect();
    for id in ids {
        world.benchmark_dataset(&id)?;
    }
    Ok(world)
}

fn mean_of(rows: &[Vec<f64>], l: usize) -> Vec<f64> {
    let mut m = vec![0.0; l];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter().map(|v| v / rows.len().max(1) as f64).collect()
}

/// Settings for slicing the base dataset into offline sub-datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub ks: Vec<usize>,
    pub inits: Vec<KMeansInit>,
    pub min_size: usize,
    pub max_iter: usize,
    /// Keep at most this many subsets (chosen at random); `None` keeps all.
    pub max_datasets: Option<usize>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            ks: vec![2, 3, 5, 7],
            inits: vec![KMeansInit::PlusPlus, KMeansInit::Random],
            min_size: MIN_SUBSET_SIZE,
            max_iter: DEFAULT_MAX_ITER,
            max_datasets: Some(16),
        }
    }
}

/// Per-image vectors of one clustering view of a dataset.
pub fn feature_view(d: &DatasetDescriptor, view: usize) -> Result<Vec<Vec<f64>>> {
    d.records
        .iter()
        .map(|r| {
            let mut v = Vec::new();
            match view {
                0 => {
                    for g in &r.stages {
                        v.extend(gwap_merge(&g.pos, &g.neg, &g.ign)?);
                    }
                }
                1 | 2 | 3 => {
                    let g = &r.stages[view - 1];
                    v.extend(gwap_merge(&g.pos, &g.neg, &g.ign)?);
                }
                _ => return Err(Error::Invalid(format!("unknown feature view {view}"))),
            }
            Ok(v)
        })
        .collect()
}

pub const FEATURE_VIEWS: usize = 4;

/// A sub-dataset: the member images and a derived descriptor.
pub fn subset_dataset(parent: &DatasetDescriptor, id: &str, members: &[usize]) -> Result<DatasetDescriptor> {
    let records = members.iter().map(|&i| parent.records[i].clone()).collect();
    let share = members.len() as f64 / parent.len() as f64;
    let boxes = ((parent.stats.box_count as f64 * share).round() as usize).max(members.len());
    DatasetDescriptor::new(id, records, boxes)
}

/// Splits a dataset with k-means over every view, k and seeding, keeping
/// distinct subsets of at least `min_size` images.
pub fn augment_dataset(
    parent: &DatasetDescriptor,
    spec: &AugmentSpec,
    rng: &mut RngStream,
) -> Result<Vec<(String, Vec<usize>)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for view in 0..FEATURE_VIEWS {
        let pts = feature_view(parent, view)?;
        for &k in &spec.ks {
            if k > pts.len() {
                continue;
            }
            for &init in &spec.inits {
                let res = kmeans_split(&pts, k, spec.max_iter, init, rng)?;
                let tag = match init {
                    KMeansInit::PlusPlus => "pp",
                    KMeansInit::Random => "rand",
                };
                for (c, members) in clusters_to_subsets(&res.assignments, k, spec.min_size)
                    .into_iter()
                    .enumerate()
                {
                    if members.len() < parent.len() && seen.insert(members.clone()) {
                        out.push((format!("{}-v{view}-k{k}-{tag}-{c}", parent.id), members));
                    }
                }
            }
        }
    }
    if let Some(cap) = spec.max_datasets {
        if out.len() > cap {
            let mut keep = rng.sample_indices(out.len(), cap);
            keep.sort_unstable();
            out = keep.into_iter().map(|i| out[i].clone()).collect();
        }
    }
    Ok(out)
}

impl SyntheticWorld {
    pub fn base(&self) -> &DatasetDescriptor {
        &self.datasets[0]
    }

    pub fn tasks(&self) -> &[DatasetDescriptor] {
        &self.datasets[1..]
    }

    pub fn latent(&self, dataset: &str) -> Option<&[f64]> {
        self.latents.get(dataset).map(Vec::as_slice)
    }

    /// The planted score `z·w_c + g·global_c` that the AP is monotone in.
    pub fn affinity(&self, dataset: &str, config: usize) -> Result<f64> {
        let z = self
            .latents
            .get(dataset)
            .ok_or_else(|| Error::Invalid(format!("unknown dataset `{dataset}`")))?;
        let w = &self.embeddings[config];
        Ok(z.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (z.len() as f64).sqrt()
            + GLOBAL_WEIGHT * self.global[config])
    }

    fn benchmark_dataset(&mut self, id: &str) -> Result<()> {
        let mut rng = seeded_rng(self.spec.seed).derive_str(&format!("ap/{id}"));
        let noise = self.spec.noise;
        for c in 0..self.configs.len() {
            let a = self.affinity(id, c)?;
            let val = sigmoid(AP_OFFSET + AP_SCALE * a + noise * rng.normal());
            let test = val + TEST_NOISE_RATIO * noise * rng.normal();
            let (val, test) = (quantize(val.clamp(0.0, 1.0)), quantize(test.clamp(0.0, 1.0)));
            let text = self.configs[c].to_string();
            self.benchmark.insert(id, &text, val, test)?;
        }
        Ok(())
    }

    /// Adds k-means subsets of the base dataset to the offline pool and
    /// benchmarks them from the mean latent of their member images.
    pub fn augment_offline(&mut self, spec: &AugmentSpec) -> Result<Vec<String>> {
        let mut rng = seeded_rng(self.spec.seed).derive_str("augment");
        let subsets = augment_dataset(&self.datasets[0], spec, &mut rng)?;
        let l = self.spec.latent_dim;
        let mut ids = Vec::new();
        for (id, members) in subsets {
            let lat: Vec<Vec<f64>> = members.iter().map(|&i| self.image_latents[i].clone()).collect();
            self.latents.insert(id.clone(), mean_of(&lat, l));
            let d = subset_dataset(&self.datasets[0], &id, &members)?;
            self.benchmark_dataset(&id)?;
            self.offline.push(d);
            ids.push(id);
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::predicted_positions;

    fn small(noise: f64) -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            datasets: 3,
            images_per_dataset: 8,
            latent_dim: 3,
            noise,
            seed: 5,
        }
    }

    #[test]
    fn deterministic() {
        let a = gen_synthetic_world(&small(0.1), SpaceKind::Hpo).unwrap();
        let b = gen_synthetic_world(&small(0.1), SpaceKind::Hpo).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.configs.len(), 216);
        assert_eq!(a.benchmark.len(), 3 * 216);
        let mut c = small(0.1);
        c.seed = 6;
        assert_ne!(gen_synthetic_world(&c, SpaceKind::Hpo).unwrap().benchmark, a.benchmark);
    }

    #[test]
    fn noiseless_ap_is_monotone_in_affinity() {
        let w = gen_synthetic_world(&small(0.0), SpaceKind::Hpo).unwrap();
        for d in w.tasks() {
            let mut pairs: Vec<(f64, f64)> = (0..w.configs.len())
                .map(|c| {
                    let e = w.benchmark.get(&d.id, &w.configs[c].to_string()).unwrap();
                    assert_eq!(e.ap_val, e.ap_test);
                    (w.affinity(&d.id, c).unwrap(), e.ap_val)
                })
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            assert!(pairs.windows(2).all(|p| p[1].1 >= p[0].1));
        }
    }

    #[test]
    fn equal_latents_give_equal_columns() {
        let mut w = gen_synthetic_world(&small(0.0), SpaceKind::Hpo).unwrap();
        let z = w.latents["task-01"].clone();
        w.latents.insert("twin".into(), z);
        w.benchmark_dataset("twin").unwrap();
        let a: Vec<_> = w.benchmark.rows_for("twin").map(|(_, e)| *e).collect();
        let b: Vec<_> = w.benchmark.rows_for("task-01").map(|(_, e)| *e).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn val_and_test_agree_in_order() {
        let w = gen_synthetic_world(&small(0.1), SpaceKind::Hpo).unwrap();
        for d in w.tasks() {
            let (v, t): (Vec<f64>, Vec<f64>) = w.benchmark.rows_for(&d.id).map(|(_, e)| (e.ap_val, e.ap_test)).unzip();
            let (pv, pt) = (predicted_positions(&v), predicted_positions(&t));
            let n = v.len() as f64;
            let d2: f64 = pv.iter().zip(&pt).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            let rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
            assert!(rho > 0.9, "{rho}");
        }
    }

    #[test]
    fn nas_world_and_augmentation() {
        let mut spec = small(0.1);
        spec.images_per_dataset = 16;
        let mut w = gen_synthetic_world(&spec, SpaceKind::Nas).unwrap();
        assert_eq!(w.configs.len(), NAS_CONFIGS);
        let ids = w
            .augment_offline(&AugmentSpec {
                min_size: 16,
                max_datasets: Some(5),
                ..AugmentSpec::default()
            })
            .unwrap();
        assert!(!ids.is_empty() && ids.len() <= 5);
        assert_eq!(w.offline.len(), ids.len() + 1);
        for id in &ids {
            assert_eq!(w.benchmark.configs_for(id).len(), NAS_CONFIGS);
            assert!(w.offline.iter().any(|d| &d.id == id && d.len() >= 16));
        }
    }

    #[test]
    fn invalid_spec() {
        let mut s = small(0.1);
        s.noise = -1.0;
        assert!(gen_synthetic_world(&s, SpaceKind::Hpo).is_err());
        s.noise = 0.1;
        s.datasets = 0;
        assert!(gen_synthetic_world(&s, SpaceKind::Hpo).is_err());
    }
}
