use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::metafeat::MetaFeature;
use crate::space::SpaceKind;

/// Declared content of a numeric array inside a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArraySchema {
    ModelParameter,
    DatasetMetaFeature,
    /// Image-level content; never allowed across the boundary.
    ImageRecord,
    AnchorGroup,
    ImageVector,
}

impl ArraySchema {
    pub fn is_image_level(self) -> bool {
        matches!(self, ArraySchema::ImageRecord | ArraySchema::AnchorGroup | ArraySchema::ImageVector)
    }

    pub const IMAGE_LEVEL_TAGS: [&'static str; 3] = ["image-record", "anchor-group", "image-vector"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedArray {
    pub schema: ArraySchema,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TaggedArray {
    pub fn from_tensor(schema: ArraySchema, t: &Tensor) -> Self {
        Self {
            schema,
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.values.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub array: TaggedArray,
}

pub fn params_to_arrays(p: &ParamStore) -> Vec<NamedArray> {
    p.iter()
        .map(|(name, t)| NamedArray {
            name: name.to_string(),
            array: TaggedArray::from_tensor(ArraySchema::ModelParameter, t),
        })
        .collect()
}

pub fn arrays_to_params(arrays: &[NamedArray]) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    for a in arrays {
        if a.array.schema != ArraySchema::ModelParameter {
            return Err(Error::Invalid(format!("`{}` is not a model parameter", a.name)));
        }
        p.insert(a.name.clone(), a.array.to_tensor()?)?;
    }
    Ok(p)
}

/// Why a meta-feature was extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UploadPurpose {
    /// Scores the pool before any trial.
    Serve,
    /// Training-step feature of the current dataset.
    Anchor,
    /// Second batch of the current dataset for the triplet term.
    Positive,
    /// Stored with the task's trials for later tasks.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config: String,
    pub ap_val: f64,
    pub ap_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    ExtractorDownload {
        version: usize,
        params: Vec<NamedArray>,
    },
    MetaFeatureUpload {
        version: usize,
        purpose: UploadPurpose,
        phi: TaggedArray,
    },
    ConfigSuggestion {
        space: SpaceKind,
        configs: Vec<String>,
    },
    TrialReport {
        trials: Vec<TrialResult>,
    },
    ExtractorUpload {
        version: usize,
        params: Vec<NamedArray>,
    },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::ExtractorDownload { .. } => "extractor_download",
            Payload::MetaFeatureUpload { .. } => "meta_feature_upload",
            Payload::ConfigSuggestion { .. } => "config_suggestion",
            Payload::TrialReport { .. } => "trial_report",
            Payload::ExtractorUpload { .. } => "extractor_upload",
        }
    }

    pub const KINDS: [&'static str; 5] = [
        "extractor_download",
        "meta_feature_upload",
        "config_suggestion",
        "trial_report",
        "extractor_upload",
    ];

    pub fn meta_feature(phi: &MetaFeature, purpose: UploadPurpose) -> Self {
        Payload::MetaFeatureUpload {
            version: phi.version,
            purpose,
            phi: TaggedArray {
                schema: ArraySchema::DatasetMetaFeature,
                shape: vec![1, phi.values.len()],
                values: phi.values.clone(),
            },
        }
    }
}

/// One client/server message, stamped with the 1-based task index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub task: usize,
    pub seq: usize,
    pub payload: Payload,
}

/// Append-only JSON-lines log of every message of one experiment. Sending
/// returns the receiver's decoded copy, so the two sides share nothing
/// but serialized bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    lines: Vec<String>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, task: usize, payload: Payload) -> Result<Message> {
        let msg = Message {
            task,
            seq: self.lines.len(),
            payload,
        };
        let line = serde_json::to_string(&msg)?;
        let received: Message = serde_json::from_str(&line)?;
        self.lines.push(line);
        Ok(received)
    }

    /// Appends a raw line without validation.
    pub fn push_raw(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn messages(&self) -> Result<Vec<Message>> {
        self.lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Malformed {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
            .collect()
    }

    /// Message count per kind for one task.
    pub fn kind_counts(&self, task: usize) -> Result<BTreeMap<&'static str, usize>> {
        let mut out = BTreeMap::new();
        for m in self.messages()? {
            if m.task == task {
                *out.entry(m.payload.kind()).or_insert(0) += 1;
            }
        }
        Ok(out)
    }

    pub fn extend(&mut self, other: Transcript) {
        self.lines.extend(other.lines);
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Self {
        Self {
            lines: text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_jsonl(&std::fs::read_to_string(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn send_round_trips_and_numbers_lines() {
        let mut t = Transcript::new();
        let phi = MetaFeature {
            values: vec![0.1, 1.0 / 3.0, -2.5e-7],
            version: 2,
        };
        let got = t.send(3, Payload::meta_feature(&phi, UploadPurpose::Serve)).unwrap();
        assert_eq!(got.seq, 0);
        match &got.payload {
            Payload::MetaFeatureUpload { phi: a, version, .. } => {
                assert_eq!(a.values, phi.values);
                assert_eq!(*version, 2);
            }
            other => panic!("{other:?}"),
        }
        let text = t.to_jsonl();
        assert!(text.starts_with("{\"task\":3,\"seq\":0,\"payload\":{\"type\":\"meta_feature_upload\""));
        assert_eq!(Transcript::from_jsonl(&text), t);
        assert_eq!(t.kind_counts(3).unwrap()["meta_feature_upload"], 1);
    }

    #[test]
    fn params_round_trip() {
        let mut p = ParamStore::new();
        p.insert("extractor.w", Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap())
            .unwrap();
        let back = arrays_to_params(&params_to_arrays(&p)).unwrap();
        assert_eq!(back.get("extractor.w").unwrap(), p.get("extractor.w").unwrap());
    }
}
