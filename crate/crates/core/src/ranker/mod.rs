//! Performance ranker: inner-product scores between dataset meta-features
//! and configuration embeddings, with its losses and continual-learning
//! regularizer.

mod loss;
mod ndcg;
mod si;
mod train;

use serde::{Deserialize, Serialize};

pub use loss::{mse_loss, ranking_loss, ranking_loss_value, ranking_pairs, triplet_loss, triplet_loss_value};
pub use ndcg::{dcg, delta_ndcg, delta_ndcg_full, ideal_dcg, ndcg, predicted_positions, relevance};
pub use si::{SiTracker, DEFAULT_XI};
pub use train::{
    apply_update, backward, build_loss, grads_by_name, group_scores, merge_grads, train_step,
    LossGraph, LossSettings, RankLoss, ScoredGroup, StepStats, TripletVars,
};

use crate::autodiff::{ParamStore, RngStream, Tape, Tensor};
use crate::confenc::{encode_configs, init_encoder, EncoderConfig, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::metafeat::{init_extractor, ExtractorConfig, MetaFeature, EXTRACTOR_PREFIX};
use crate::space::{Config, SpaceKind};
use crate::transform::TransformMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankerSpec {
    pub space: SpaceKind,
    pub extractor: ExtractorConfig,
    pub encoder: EncoderConfig,
}

impl RankerSpec {
    pub fn new(space: SpaceKind, extractor: ExtractorConfig, encoder: EncoderConfig) -> Result<Self> {
        if extractor.hidden != encoder.hidden {
            return Err(Error::InvalidConfig(format!(
                "extractor width {} differs from encoder width {}",
                extractor.hidden, encoder.hidden
            )));
        }
        Ok(Self {
            space,
            extractor,
            encoder,
        })
    }

    pub fn hidden(&self) -> usize {
        self.extractor.hidden
    }
}

/// Fresh extractor and encoder parameters in one store.
pub fn init_ranker(spec: &RankerSpec, rng: &mut RngStream) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_extractor(&mut store, &spec.extractor, &mut rng.derive_str("extractor"))?;
    init_encoder(&mut store, spec.space, &spec.encoder, &mut rng.derive_str("encoder"))?;
    Ok(store)
}

pub fn is_extractor_param(name: &str) -> bool {
    name.strip_prefix(EXTRACTOR_PREFIX).is_some_and(|r| r.starts_with('.'))
}

pub fn is_encoder_param(name: &str) -> bool {
    name.strip_prefix(ENCODER_PREFIX).is_some_and(|r| r.starts_with('.'))
}

/// Where an experience triplet's meta-feature comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureRef {
    /// Recomputed with the current extractor whenever needed.
    Live,
    /// Extracted in an earlier task and kept with its extractor version.
    Stored(MetaFeature),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceTriplet {
    pub config: Config,
    pub dataset_id: String,
    pub feature: FeatureRef,
    pub ap: f64,
}

impl ExperienceTriplet {
    pub fn new(config: Config, dataset_id: impl Into<String>, feature: FeatureRef, ap: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ap) {
            return Err(Error::Invalid(format!("AP {ap} outside [0, 1]")));
        }
        Ok(Self {
            config,
            dataset_id: dataset_id.into(),
            feature,
            ap,
        })
    }
}

/// A stored feature mapped into the current space: unchanged for the
/// current version, `Z φ` for a past one.
pub fn project_feature(
    phi: &MetaFeature,
    current_version: usize,
    transforms: &[TransformMatrix],
) -> Result<Vec<f64>> {
    if phi.version == current_version {
        return Ok(phi.values.clone());
    }
    let z = transforms
        .iter()
        .find(|z| z.source_version == phi.version)
        .ok_or(Error::MissingTransform(phi.version))?;
    z.apply(phi)
}

/// `φ^T H(c)` for every config, with `φ` already in the current space.
pub fn score_pool(store: &ParamStore, spec: &RankerSpec, configs: &[Config], phi: &[f64]) -> Result<Vec<f64>> {
    if phi.len() != spec.hidden() {
        return Err(Error::Dimension {
            expected: spec.hidden(),
            actual: phi.len(),
        });
    }
    let mut tape = Tape::new();
    let h = encode_configs(&mut tape, store, &spec.encoder, configs, None)?;
    let p = tape.constant(Tensor::new(vec![phi.len(), 1], phi.to_vec())?);
    let s = tape.matmul(h, p)?;
    Ok(tape.value(s).values().to_vec())
}

/// Score of one config against a meta-feature of any version.
pub fn score(
    store: &ParamStore,
    spec: &RankerSpec,
    config: &Config,
    phi: &MetaFeature,
    current_version: usize,
    transforms: &[TransformMatrix],
) -> Result<f64> {
    let v = project_feature(phi, current_version, transforms)?;
    Ok(score_pool(store, spec, std::slice::from_ref(config), &v)?[0])
}
