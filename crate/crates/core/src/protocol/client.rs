use std::collections::BTreeMap;

use super::message::{arrays_to_params, params_to_arrays, Payload, Transcript, TrialResult, UploadPurpose};
use crate::autodiff::{ParamStore, RngStream, Tape, Tensor, Var};
use crate::benchdata::BenchmarkTable;
use crate::error::{Error, Result};
use crate::metafeat::{extract_on_tape, sample_batch, DatasetDescriptor, ExtractorConfig, MetaFeature};
use crate::ranker::is_extractor_param;

/// A recorded extraction kept on the client so that a gradient with
/// respect to the uploaded feature can later be pushed into `θ_G`.
#[derive(Debug)]
pub struct ExtractionHandle {
    tape: Tape,
    phi: Var,
}

/// The data owner. It holds the dataset and a working copy of the
/// extractor, and only talks to the server through the transcript.
#[derive(Debug)]
pub struct Client<'a> {
    task: usize,
    dataset: &'a DatasetDescriptor,
    benchmark: &'a BenchmarkTable,
    cfg: ExtractorConfig,
    extractor: Option<ParamStore>,
    version: usize,
    rng: RngStream,
}

impl<'a> Client<'a> {
    pub fn new(
        task: usize,
        dataset: &'a DatasetDescriptor,
        benchmark: &'a BenchmarkTable,
        cfg: ExtractorConfig,
        rng: RngStream,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset(dataset.id.clone()));
        }
        Ok(Self {
            task,
            dataset,
            benchmark,
            cfg,
            extractor: None,
            version: 0,
            rng,
        })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset.id
    }

    pub fn receive_extractor(&mut self, payload: &Payload) -> Result<()> {
        match payload {
            Payload::ExtractorDownload { version, params } => {
                self.extractor = Some(arrays_to_params(params)?);
                self.version = *version;
                Ok(())
            }
            other => Err(Error::Invalid(format!("client expected an extractor, got {}", other.kind()))),
        }
    }

    fn extractor(&self) -> Result<&ParamStore> {
        self.extractor
            .as_ref()
            .ok_or_else(|| Error::Invalid("client has no extractor".into()))
    }

    /// Extracts `φ` from a fresh batch and uploads it.
    pub fn extract(&mut self, purpose: UploadPurpose, transcript: &mut Transcript) -> Result<(MetaFeature, ExtractionHandle)> {
        let idx = sample_batch(self.dataset, self.cfg.batch_size, &mut self.rng)?;
        let mut tape = Tape::new();
        let phi = extract_on_tape(&mut tape, self.extractor()?, &self.cfg, self.dataset, &idx)?;
        let feature = MetaFeature {
            values: tape.value(phi).values().to_vec(),
            version: self.version,
        };
        let received = transcript.send(self.task, Payload::meta_feature(&feature, purpose))?;
        let uploaded = match received.payload {
            Payload::MetaFeatureUpload { phi, version, .. } => MetaFeature {
                values: phi.values,
                version,
            },
            _ => unreachable!("upload decodes to an upload"),
        };
        Ok((uploaded, ExtractionHandle { tape, phi }))
    }

    /// `∂L/∂θ_G` given `∂L/∂φ` for a previous extraction.
    pub fn extractor_grads(&self, handle: ExtractionHandle, dphi: &[f64]) -> Result<BTreeMap<String, Tensor>> {
        let ExtractionHandle { mut tape, phi } = handle;
        let shape = tape.value(phi).shape().to_vec();
        let g = Tensor::new(shape, dphi.to_vec())?;
        let weighted = tape.mul_const(phi, g)?;
        let root = tape.sum(weighted)?;
        let grads = tape.backward(root)?;
        Ok(tape.param_grads(&grads).into_iter().collect())
    }

    /// Replaces the working extractor with the server's current values.
    pub fn sync_extractor(&mut self, store: &ParamStore) -> Result<()> {
        let ex = self
            .extractor
            .as_mut()
            .ok_or_else(|| Error::Invalid("client has no extractor".into()))?;
        for (name, v) in store.iter().filter(|(n, _)| is_extractor_param(n)) {
            *ex.get_mut(name)? = v.clone();
        }
        Ok(())
    }

    /// "Trains" every suggested config by benchmark lookup and reports.
    pub fn run_trials(&self, suggestion: &Payload, transcript: &mut Transcript) -> Result<Vec<TrialResult>> {
        let configs = match suggestion {
            Payload::ConfigSuggestion { configs, .. } => configs,
            other => return Err(Error::Invalid(format!("client expected a suggestion, got {}", other.kind()))),
        };
        let mut trials = Vec::with_capacity(configs.len());
        for c in configs {
            let e = self.benchmark.get(&self.dataset.id, c)?;
            trials.push(TrialResult {
                config: c.clone(),
                ap_val: e.ap_val,
                ap_test: e.ap_test,
            });
        }
        match transcript.send(self.task, Payload::TrialReport { trials })?.payload {
            Payload::TrialReport { trials } => Ok(trials),
            _ => unreachable!("report decodes to a report"),
        }
    }

    pub fn upload_extractor(&self, transcript: &mut Transcript) -> Result<Payload> {
        let params = params_to_arrays(self.extractor()?);
        Ok(transcript
            .send(
                self.task,
                Payload::ExtractorUpload {
                    version: self.version,
                    params,
                },
            )?
            .payload)
    }
}
