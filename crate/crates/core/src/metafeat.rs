//! Dataset meta-feature extractor: per-image anchor-group summaries are
//! merged, projected, attended over, and mean-pooled into one embedding.

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    affine, init_affine, init_attention, self_attention_encoder, ParamStore, RngStream, Tape,
    Tensor, Var,
};
use crate::error::{Error, Result};

pub const EXTRACTOR_PREFIX: &str = "extractor";
pub const LABEL_BLOCK: usize = 5;
pub const STAGES: usize = 3;

/// Mean feature vectors of the positive, negative and ignored anchors at one
/// pyramid stage. An empty group is a zero vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGroups {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub ign: Vec<f64>,
}

impl AnchorGroups {
    pub fn zeros(c: usize) -> Self {
        Self {
            pos: vec![0.0; c],
            neg: vec![0.0; c],
            ign: vec![0.0; c],
        }
    }

    fn dim(&self) -> Option<usize> {
        let c = self.pos.len();
        (self.neg.len() == c && self.ign.len() == c).then_some(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatureRecord {
    pub stages: [AnchorGroups; STAGES],
    /// Per stage and group: mean box cx, cy, w, h and the group's anchor fraction.
    pub labels: Option<[AnchorGroups; STAGES]>,
}

impl ImageFeatureRecord {
    pub fn channels(&self) -> usize {
        self.stages[0].pos.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for s in &self.stages {
            if s.dim() != Some(c) {
                return Err(Error::Invalid("anchor groups differ in width".into()));
            }
        }
        if let Some(labels) = &self.labels {
            for s in labels {
                if s.dim() != Some(LABEL_BLOCK) {
                    return Err(Error::Invalid(format!(
                        "label block must have {LABEL_BLOCK} entries"
                    )));
                }
                for g in [&s.pos, &s.neg, &s.ign] {
                    if !(0.0..=1.0).contains(&g[4]) {
                        return Err(Error::Invalid("anchor fraction outside [0, 1]".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub image_count: usize,
    pub box_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub id: String,
    pub records: Vec<ImageFeatureRecord>,
    pub stats: DatasetStats,
}

impl DatasetDescriptor {
    pub fn new(id: impl Into<String>, records: Vec<ImageFeatureRecord>, box_count: usize) -> Result<Self> {
        let id = id.into();
        let stats = DatasetStats {
            image_count: records.len(),
            box_count: box_count.max(1),
        };
        let d = Self { id, records, stats };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.records.first().map_or(0, ImageFeatureRecord::channels)
    }

    pub fn has_labels(&self) -> bool {
        self.records.first().is_some_and(|r| r.labels.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .records
            .first()
            .ok_or_else(|| Error::EmptyDataset(self.id.clone()))?;
        if self.stats.image_count == 0 || self.stats.box_count == 0 {
            return Err(Error::Invalid(format!("dataset `{}` has zero counts", self.id)));
        }
        let (c, labels) = (first.channels(), first.labels.is_some());
        for r in &self.records {
            r.validate()?;
            if r.channels() != c || r.labels.is_some() != labels {
                return Err(Error::Invalid(format!(
                    "dataset `{}` mixes record layouts",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Dataset embedding tagged with the extractor version that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaFeature {
    pub values: Vec<f64>,
    pub version: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub channels: usize,
    pub hidden: usize,
    pub use_labels: bool,
    pub batch_size: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            hidden: 64,
            use_labels: true,
            batch_size: 32,
        }
    }
}

impl ExtractorConfig {
    pub fn image_vector_len(&self) -> usize {
        let seg = self.channels + if self.use_labels { LABEL_BLOCK } else { 0 };
        STAGES * seg + 2
    }
}

/// `(pos + neg + ign) / 3`.
pub fn gwap_merge(pos: &[f64], neg: &[f64], ign: &[f64]) -> Result<Vec<f64>> {
    if pos.len() != neg.len() || pos.len() != ign.len() {
        return Err(Error::Dimension {
            expected: pos.len(),
            actual: if neg.len() != pos.len() { neg.len() } else { ign.len() },
        });
    }
    Ok(pos
        .iter()
        .zip(neg)
        .zip(ign)
        .map(|((a, b), c)| (a + b + c) / 3.0)
        .collect())
}

/// Per stage the merged features (and merged label block when `use_labels`),
/// then `ln(1 + images)`, `ln(1 + boxes)`.
pub fn build_image_vector(
    rec: &ImageFeatureRecord,
    stats: &DatasetStats,
    use_labels: bool,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for k in 0..STAGES {
        let g = &rec.stages[k];
        out.extend(gwap_merge(&g.pos, &g.neg, &g.ign)?);
        if use_labels {
            let l = rec
                .labels
                .as_ref()
                .map(|l| &l[k])
                .ok_or_else(|| Error::Invalid("record has no label blocks".into()))?;
            out.extend(gwap_merge(&l.pos, &l.neg, &l.ign)?);
        }
    }
    out.push((stats.image_count as f64).ln_1p());
    out.push((stats.box_count as f64).ln_1p());
    Ok(out)
}

pub fn init_extractor(store: &mut ParamStore, cfg: &ExtractorConfig, rng: &mut RngStream) -> Result<()> {
    init_affine(
        store,
        &format!("{EXTRACTOR_PREFIX}.in"),
        cfg.image_vector_len(),
        cfg.hidden,
        rng,
    )?;
    init_attention(store, &format!("{EXTRACTOR_PREFIX}.attn"), cfg.hidden, rng)
}

/// `min(batch_size, |d|)` record indices drawn without replacement.
pub fn sample_batch(d: &DatasetDescriptor, batch_size: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if d.is_empty() {
        return Err(Error::EmptyDataset(d.id.clone()));
    }
    Ok(rng.sample_indices(d.len(), batch_size.max(1)))
}

pub fn image_matrix(d: &DatasetDescriptor, indices: &[usize], cfg: &ExtractorConfig) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset(d.id.clone()));
    }
    let rows = indices
        .iter()
        .map(|&i| build_image_vector(&d.records[i], &d.stats, cfg.use_labels))
        .collect::<Result<Vec<_>>>()?;
    let t = Tensor::from_rows(&rows)?;
    if t.cols() != cfg.image_vector_len() {
        return Err(Error::Dimension {
            expected: cfg.image_vector_len(),
            actual: t.cols(),
        });
    }
    Ok(t)
}

/// Records the extractor on `tape` for a precomputed image matrix; returns a
/// `[1 x D]` node.
pub fn extract_from_images(tape: &mut Tape, store: &ParamStore, images: Tensor) -> Result<Var> {
    let x = tape.constant(images);
    let h = affine(tape, store, &format!("{EXTRACTOR_PREFIX}.in"), x)?;
    let h = self_attention_encoder(tape, store, &format!("{EXTRACTOR_PREFIX}.attn"), h)?;
    tape.mean_rows(h)
}

/// Records the extractor on `tape` for the given records of `d`.
pub fn extract_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ExtractorConfig,
    d: &DatasetDescriptor,
    indices: &[usize],
) -> Result<Var> {
    let images = image_matrix(d, indices, cfg)?;
    extract_from_images(tape, store, images)
}

/// Samples a batch, runs the extractor, and tags the result with `version`.
pub fn extract_meta_feature(
    d: &DatasetDescriptor,
    cfg: &ExtractorConfig,
    store: &ParamStore,
    rng: &mut RngStream,
    version: usize,
) -> Result<MetaFeature> {
    let idx = sample_batch(d, cfg.batch_size, rng)?;
    let mut tape = Tape::new();
    let phi = extract_on_tape(&mut tape, store, cfg, d, &idx)?;
    Ok(MetaFeature {
        values: tape.value(phi).values().to_vec(),
        version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, seeded_rng};

    fn record(c: usize, rng: &mut RngStream, labels: bool) -> ImageFeatureRecord {
        let mut g = || AnchorGroups {
            pos: (0..c).map(|_| rng.normal()).collect(),
            neg: (0..c).map(|_| rng.normal()).collect(),
            ign: (0..c).map(|_| rng.normal()).collect(),
        };
        let stages = [g(), g(), g()];
        let labels = labels.then(|| {
            let l = || AnchorGroups {
                pos: vec![0.5, 0.5, 0.1, 0.1, 0.2],
                neg: vec![0.4, 0.6, 0.2, 0.1, 0.5],
                ign: vec![0.0, 0.0, 0.0, 0.0, 0.0],
            };
            [l(), l(), l()]
        });
        ImageFeatureRecord { stages, labels }
    }

    fn dataset(n: usize, c: usize, labels: bool, seed: u64) -> DatasetDescriptor {
        let mut rng = seeded_rng(seed);
        let recs = (0..n).map(|_| record(c, &mut rng, labels)).collect();
        DatasetDescriptor::new("d", recs, 3 * n).unwrap()
    }

    #[test]
    fn gwap_examples() {
        assert_eq!(gwap_merge(&[1., 1.], &[3., 3.], &[5., 5.]).unwrap(), vec![3., 3.]);
        assert_eq!(gwap_merge(&[3., 3.], &[6., 0.], &[0., 0.]).unwrap(), vec![3., 1.]);
        assert!(gwap_merge(&[1.], &[1., 2.], &[1.]).is_err());
    }

    #[test]
    fn image_vector_zero_features() {
        let rec = ImageFeatureRecord {
            stages: [AnchorGroups::zeros(2), AnchorGroups::zeros(2), AnchorGroups::zeros(2)],
            labels: None,
        };
        let stats = DatasetStats {
            image_count: 1,
            box_count: 1,
        };
        let v = build_image_vector(&rec, &stats, false).unwrap();
        let l2 = 2f64.ln();
        assert_eq!(v, vec![0., 0., 0., 0., 0., 0., l2, l2]);
    }

    #[test]
    fn image_vector_with_labels_length() {
        let mut rng = seeded_rng(0);
        let rec = record(2, &mut rng, true);
        let stats = DatasetStats {
            image_count: 4,
            box_count: 9,
        };
        assert_eq!(build_image_vector(&rec, &stats, true).unwrap().len(), 23);
    }

    #[test]
    fn stage_locality() {
        let mut rng = seeded_rng(4);
        let a = record(3, &mut rng, false);
        let mut b = a.clone();
        b.stages[2].neg[1] += 1.0;
        let stats = DatasetStats {
            image_count: 2,
            box_count: 2,
        };
        let va = build_image_vector(&a, &stats, false).unwrap();
        let vb = build_image_vector(&b, &stats, false).unwrap();
        for (i, (x, y)) in va.iter().zip(&vb).enumerate() {
            assert_eq!(x != y, i == 7, "index {i}");
        }
    }

    fn setup(labels: bool) -> (ExtractorConfig, ParamStore) {
        let cfg = ExtractorConfig {
            channels: 4,
            hidden: 8,
            use_labels: labels,
            batch_size: 6,
        };
        let mut store = ParamStore::new();
        init_extractor(&mut store, &cfg, &mut seeded_rng(1)).unwrap();
        (cfg, store)
    }

    #[test]
    fn batch_order_does_not_matter() {
        let (cfg, store) = setup(true);
        let d = dataset(10, 4, true, 3);
        let idx = vec![0, 3, 5, 7, 9, 1];
        let mut rev = idx.clone();
        rev.reverse();
        let run = |ix: &[usize]| {
            let mut t = Tape::new();
            let v = extract_on_tape(&mut t, &store, &cfg, &d, ix).unwrap();
            t.value(v).clone()
        };
        let (a, b) = (run(&idx), run(&rev));
        assert_eq!(a.len(), 8);
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_records_collapse() {
        let (cfg, store) = setup(false);
        let mut d = dataset(1, 4, false, 9);
        let r = d.records[0].clone();
        d.records = vec![r.clone(), r.clone(), r];
        d.stats.image_count = 3;
        let mut t = Tape::new();
        let many = extract_on_tape(&mut t, &store, &cfg, &d, &[0, 1, 2]).unwrap();
        let many = t.value(many).clone();
        let mut t = Tape::new();
        let one = extract_on_tape(&mut t, &store, &cfg, &d, &[0]).unwrap();
        for (x, y) in many.values().iter().zip(t.value(one).values()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn labels_ignored_when_disabled() {
        let (cfg, store) = setup(false);
        let d = dataset(5, 4, true, 2);
        let mut d2 = d.clone();
        for r in &mut d2.records {
            if let Some(l) = &mut r.labels {
                l[0].pos[0] = 0.9;
            }
        }
        let a = extract_meta_feature(&d, &cfg, &store, &mut seeded_rng(5), 0).unwrap();
        let b = extract_meta_feature(&d2, &cfg, &store, &mut seeded_rng(5), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            DatasetDescriptor::new("e", vec![], 1),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn extractor_gradients() {
        let (cfg, store) = setup(true);
        let d = dataset(6, 4, true, 8);
        let rep = finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let phi = extract_on_tape(&mut t, ps, &cfg, &d, &[0, 1, 2, 3])?;
                let l = t.sum_squares(phi)?;
                Ok((t, l))
            },
            &store,
            1e-5,
            50,
            &mut seeded_rng(0),
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
