//! JSON-lines dataset files: a header line with the dataset statistics,
//! then one image record per line as nested arrays.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metafeat::{AnchorGroups, DatasetDescriptor, DatasetStats, ImageFeatureRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dataset_id: String,
    image_count: usize,
    box_count: usize,
    channels: usize,
    labels: bool,
}

/// `[stage][group][value]` with groups ordered positive, negative, ignored.
type Nested = Vec<[Vec<f64>; 3]>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordLine {
    stages: Nested,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Nested>,
}

fn to_nested(groups: &[AnchorGroups; 3]) -> Nested {
    groups
        .iter()
        .map(|g| [g.pos.clone(), g.neg.clone(), g.ign.clone()])
        .collect()
}

fn from_nested(n: Nested, line: usize) -> Result<[AnchorGroups; 3]> {
    let groups: Vec<AnchorGroups> = n
        .into_iter()
        .map(|[pos, neg, ign]| AnchorGroups { pos, neg, ign })
        .collect();
    groups.try_into().map_err(|v: Vec<AnchorGroups>| Error::Malformed {
        line,
        reason: format!("expected 3 stages, found {}", v.len()),
    })
}

pub fn write_dataset<W: Write>(d: &DatasetDescriptor, mut w: W) -> Result<()> {
    let header = Header {
        dataset_id: d.id.clone(),
        image_count: d.stats.image_count,
        box_count: d.stats.box_count,
        channels: d.channels(),
        labels: d.has_labels(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in &d.records {
        let line = RecordLine {
            stages: to_nested(&r.stages),
            labels: r.labels.as_ref().map(to_nested),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: std::io::Read>(r: R) -> Result<DatasetDescriptor> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or(Error::Malformed {
        line: 1,
        reason: "empty dataset file".into(),
    })??;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Malformed {
        line: 1,
        reason: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: n,
            reason: e.to_string(),
        })?;
        let r = ImageFeatureRecord {
            stages: from_nested(rec.stages, n)?,
            labels: rec.labels.map(|l| from_nested(l, n)).transpose()?,
        };
        if r.channels() != header.channels || r.labels.is_some() != header.labels {
            return Err(Error::Malformed {
                line: n,
                reason: "record layout differs from header".into(),
            });
        }
        records.push(r);
    }
    let d = DatasetDescriptor {
        id: header.dataset_id,
        records,
        stats: DatasetStats {
            image_count: header.image_count,
            box_count: header.box_count,
        },
    };
    d.validate()?;
    Ok(d)
}

pub fn save_dataset(d: &DatasetDescriptor, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(d, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DatasetDescriptor> {
    read_dataset(std::fs::File::open(path)?)
}
