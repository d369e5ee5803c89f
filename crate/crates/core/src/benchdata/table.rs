use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::SpaceKind;

pub const BENCHMARK_HEADER: [&str; 5] = ["dataset_id", "space", "config", "ap_val", "ap_test"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub ap_val: f64,
    pub ap_test: f64,
}

/// Lookup table `(dataset id, config id) -> (validation AP, test AP)` for
/// one search space.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    space: SpaceKind,
    entries: BTreeMap<String, BTreeMap<String, BenchmarkEntry>>,
}

/// Rounds to the 6 decimals used in files.
pub fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl BenchmarkTable {
    pub fn new(space: SpaceKind) -> Self {
        Self {
            space,
            entries: BTreeMap::new(),
        }
    }

    pub fn space(&self) -> SpaceKind {
        self.space
    }

    pub fn insert(&mut self, dataset: &str, config: &str, ap_val: f64, ap_test: f64) -> Result<()> {
        for v in [ap_val, ap_test] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!(
                    "AP {v} outside [0, 1] for `{dataset}`/`{config}`"
                )));
            }
        }
        let row = self.entries.entry(dataset.to_string()).or_default();
        if row.contains_key(config) {
            return Err(Error::Invalid(format!(
                "duplicate benchmark key `{dataset}`/`{config}`"
            )));
        }
        row.insert(config.to_string(), BenchmarkEntry { ap_val, ap_test });
        Ok(())
    }

    pub fn get(&self, dataset: &str, config: &str) -> Result<BenchmarkEntry> {
        self.entries
            .get(dataset)
            .and_then(|r| r.get(config))
            .copied()
            .ok_or_else(|| Error::BenchmarkMiss {
                dataset: dataset.to_string(),
                config: config.to_string(),
            })
    }

    pub fn contains(&self, dataset: &str, config: &str) -> bool {
        self.entries.get(dataset).is_some_and(|r| r.contains_key(config))
    }

    pub fn datasets(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Config ids benchmarked on `dataset`, in canonical (sorted) order.
    pub fn configs_for(&self, dataset: &str) -> Vec<&str> {
        self.entries
            .get(dataset)
            .map(|r| r.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    pub fn rows_for(&self, dataset: &str) -> impl Iterator<Item = (&str, &BenchmarkEntry)> {
        self.entries
            .get(dataset)
            .into_iter()
            .flat_map(|r| r.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moves every row of `other` into this table.
    pub fn extend(&mut self, other: &BenchmarkTable) -> Result<()> {
        if other.space != self.space {
            return Err(Error::InvalidConfig("benchmark spaces differ".into()));
        }
        for (d, rows) in &other.entries {
            for (c, e) in rows {
                self.insert(d, c, e.ap_val, e.ap_test)?;
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(BENCHMARK_HEADER)?;
        let space = self.space.to_string();
        for (d, rows) in &self.entries {
            for (c, e) in rows {
                out.write_record([
                    d.as_str(),
                    space.as_str(),
                    c.as_str(),
                    &format!("{:.6}", e.ap_val),
                    &format!("{:.6}", e.ap_test),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr.headers()?.clone();
        if header.iter().ne(BENCHMARK_HEADER) {
            return Err(Error::Malformed {
                line: 1,
                reason: format!("expected header `{}`", BENCHMARK_HEADER.join(",")),
            });
        }
        let mut table: Option<BenchmarkTable> = None;
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |reason: String| Error::Malformed { line, reason };
            if rec.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", rec.len())));
            }
            let space: SpaceKind = rec[1].parse().map_err(|e: Error| bad(e.to_string()))?;
            let t = table.get_or_insert_with(|| BenchmarkTable::new(space));
            if t.space != space {
                return Err(bad("mixed search spaces".into()));
            }
            let num = |s: &str, what: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("{what} `{s}` is not a number")))
            };
            let (v, te) = (num(&rec[3], "ap_val")?, num(&rec[4], "ap_test")?);
            t.insert(&rec[0], &rec[2], v, te).map_err(|e| bad(e.to_string()))?;
        }
        table.ok_or(Error::Malformed {
            line: 1,
            reason: "benchmark has no rows".into(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BenchmarkTable {
        let mut t = BenchmarkTable::new(SpaceKind::Hpo);
        t.insert("b", "crop:0.55_iou:0.5_locw:8.0_negp:2.0_lr:3e-04_sgd", 0.5, 0.25)
            .unwrap();
        t.insert("a", "crop:0.3_iou:0.4_locw:2.0_negp:2.0_lr:3e-04_sgd", 0.123456, 1.0)
            .unwrap();
        t
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let t = sample();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = BenchmarkTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut buf2 = Vec::new();
        back.write_csv(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert!(String::from_utf8(buf).unwrap().starts_with("dataset_id,space,config,ap_val,ap_test\na,hpo,"));
    }

    #[test]
    fn duplicate_and_range_errors() {
        let mut t = sample();
        assert!(t.insert("a", "crop:0.3_iou:0.4_locw:2.0_negp:2.0_lr:3e-04_sgd", 0.1, 0.1).is_err());
        assert!(t.insert("c", "x", 1.5, 0.1).is_err());
        let csv = "dataset_id,space,config,ap_val,ap_test\na,hpo,x,0.1,0.2\na,hpo,x,0.1,0.2\n";
        match BenchmarkTable::read_csv(csv.as_bytes()) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let csv = "dataset_id,space,config,ap_val,ap_test\na,hpo,x,zero,0.2\n";
        assert!(matches!(
            BenchmarkTable::read_csv(csv.as_bytes()),
            Err(Error::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn miss_names_pair() {
        let err = sample().get("zz", "cfg").unwrap_err();
        assert!(err.to_string().contains("zz") && err.to_string().contains("cfg"));
    }
}
