use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{expected_random_best, mean, normalized_rank, std_dev};
use crate::autodiff::{seeded_rng, RngStream};
use crate::benchdata::{BenchmarkTable, SyntheticWorld};
use crate::error::{Error, Result};
use crate::metafeat::DatasetDescriptor;
use crate::protocol::{sample_pool, select_top_b, MethodFlags, ServerSettings, ServerState, Transcript, TrialResult};

pub const REPORT_HEADER: [&str; 7] = ["seed", "dataset_id", "config", "ap_val", "ap_test", "norm_rank", "delta_ap"];

/// A search method: uniform random choice, or the ranker with optional
/// ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Random,
    Ranker(MethodFlags),
}

impl Method {
    pub const NAMES: [&'static str; 9] = [
        "random",
        "hyperfd",
        "no-transform",
        "freeze-extractor",
        "freeze-ranker",
        "latest-data-only",
        "no-si",
        "no-triplet",
        "mse-loss",
    ];

    pub fn full() -> Self {
        Method::Ranker(MethodFlags::default())
    }

    /// Every ablation of the full method, in a fixed order.
    pub fn ablations() -> Vec<Method> {
        Self::NAMES[2..].iter().map(|n| n.parse().expect("known name")).collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Random => f.write_str("random"),
            Method::Ranker(fl) => {
                let set = [
                    (fl.no_transform, "no-transform"),
                    (fl.freeze_extractor, "freeze-extractor"),
                    (fl.freeze_ranker, "freeze-ranker"),
                    (fl.latest_data_only, "latest-data-only"),
                    (fl.no_si, "no-si"),
                    (fl.no_triplet, "no-triplet"),
                    (fl.mse_loss, "mse-loss"),
                ];
                let on: Vec<&str> = set.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
                if on.is_empty() {
                    f.write_str("hyperfd")
                } else {
                    f.write_str(&on.join("+"))
                }
            }
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(Method::Random);
        }
        let mut fl = MethodFlags::default();
        if s == "hyperfd" {
            return Ok(Method::Ranker(fl));
        }
        for part in s.split('+') {
            match part {
                "no-transform" => fl.no_transform = true,
                "freeze-extractor" => fl.freeze_extractor = true,
                "freeze-ranker" => fl.freeze_ranker = true,
                "latest-data-only" => fl.latest_data_only = true,
                "no-si" => fl.no_si = true,
                "no-triplet" => fl.no_triplet = true,
                "mse-loss" => fl.mse_loss = true,
                _ => return Err(Error::InvalidConfig(format!("unknown method `{s}`"))),
            }
        }
        Ok(Method::Ranker(fl))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub dataset_id: String,
    pub config: String,
    pub ap_val: f64,
    pub ap_test: f64,
    pub norm_rank: f64,
    /// Found test AP minus the expected best of a random pick, in AP points.
    pub delta_ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_rank: f64,
    pub std_rank: f64,
    pub mean_delta_ap: f64,
    pub std_delta_ap: f64,
    pub count: usize,
}

impl Aggregate {
    fn of(ranks: &[f64], deltas: &[f64]) -> Self {
        Self {
            mean_rank: mean(ranks),
            std_rank: std_dev(ranks),
            mean_delta_ap: mean(deltas),
            std_delta_ap: std_dev(deltas),
            count: ranks.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub budget: usize,
    pub rows: Vec<ReportRow>,
    pub per_dataset: BTreeMap<String, Aggregate>,
    /// Ranks over all rows; ΔAP summed over datasets within each seed.
    pub overall: Aggregate,
}

impl ExperimentReport {
    pub fn from_rows(method: &str, budget: usize, rows: Vec<ReportRow>) -> Self {
        let mut by_ds: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        let mut by_seed: BTreeMap<u64, f64> = BTreeMap::new();
        for r in &rows {
            let e = by_ds.entry(r.dataset_id.clone()).or_default();
            e.0.push(r.norm_rank);
            e.1.push(r.delta_ap);
            *by_seed.entry(r.seed).or_insert(0.0) += r.delta_ap;
        }
        let per_dataset = by_ds.iter().map(|(k, (a, b))| (k.clone(), Aggregate::of(a, b))).collect();
        let ranks: Vec<f64> = rows.iter().map(|r| r.norm_rank).collect();
        let sums: Vec<f64> = by_seed.into_values().collect();
        let mut overall = Aggregate::of(&ranks, &sums);
        overall.count = rows.len();
        Self {
            method: method.to_string(),
            budget,
            rows,
            per_dataset,
            overall,
        }
    }

    /// Mean normalized rank of each seed, in seed order.
    pub fn seed_ranks(&self) -> Vec<(u64, f64)> {
        let mut m: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            m.entry(r.seed).or_default().push(r.norm_rank);
        }
        m.into_iter().map(|(s, v)| (s, mean(&v))).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.seed.to_string(),
                r.dataset_id.clone(),
                r.config.clone(),
                format!("{:.6}", r.ap_val),
                format!("{:.6}", r.ap_test),
                r.norm_rank.to_string(),
                r.delta_ap.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(method: &str, budget: usize, r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        if rdr.headers()?.iter().ne(REPORT_HEADER) {
            return Err(Error::Malformed {
                line: 1,
                reason: format!("expected header `{}`", REPORT_HEADER.join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| Error::Malformed {
                    line,
                    reason: format!("`{}` is not a number", &rec[i]),
                })
            };
            rows.push(ReportRow {
                seed: rec[0].parse().map_err(|_| Error::Malformed {
                    line,
                    reason: "bad seed".into(),
                })?,
                dataset_id: rec[1].to_string(),
                config: rec[2].to_string(),
                ap_val: num(3)?,
                ap_test: num(4)?,
                norm_rank: num(5)?,
                delta_ap: num(6)?,
            });
        }
        Ok(Self::from_rows(method, budget, rows))
    }
}

fn task_rng(root: &RngStream, dataset: &str) -> RngStream {
    root.derive_str(&format!("task/{dataset}"))
}

/// Task order for one seed.
pub fn task_order(world: &SyntheticWorld, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..world.tasks().len()).collect();
    seeded_rng(seed).derive_str("order").shuffle(&mut order);
    order
}

fn row(benchmark: &BenchmarkTable, seed: u64, dataset: &str, pool: &[&str], best: &TrialResult, budget: usize) -> Result<ReportRow> {
    let tests: Vec<f64> = pool
        .iter()
        .map(|c| benchmark.get(dataset, c).map(|e| e.ap_test))
        .collect::<Result<_>>()?;
    Ok(ReportRow {
        seed,
        dataset_id: dataset.to_string(),
        config: best.config.clone(),
        ap_val: best.ap_val,
        ap_test: best.ap_test,
        norm_rank: normalized_rank(best.ap_test, &tests)?,
        delta_ap: 100.0 * (best.ap_test - expected_random_best(&tests, budget.min(tests.len()))?),
    })
}

/// Random search on the same pools the ranker would see.
pub fn run_random(world: &SyntheticWorld, settings: &ServerSettings, seed: u64) -> Result<Vec<ReportRow>> {
    let root = seeded_rng(seed);
    let mut rows = Vec::new();
    for i in task_order(world, seed) {
        let d = &world.tasks()[i];
        let trng = task_rng(&root, &d.id);
        let pool = sample_pool(&world.benchmark, &d.id, settings.pool_size, &trng)?;
        let picks = select_top_b(&vec![0.0; pool.len()], settings.budget, 0.0, &mut trng.derive_str("select"))?;
        let mut best: Option<TrialResult> = None;
        for p in picks {
            let e = world.benchmark.get(&d.id, pool[p])?;
            if best.as_ref().is_none_or(|b| e.ap_val > b.ap_val) {
                best = Some(TrialResult {
                    config: pool[p].to_string(),
                    ap_val: e.ap_val,
                    ap_test: e.ap_test,
                });
            }
        }
        let best = best.ok_or(Error::EmptyBatch("run_random"))?;
        rows.push(row(&world.benchmark, seed, &d.id, &pool, &best, settings.budget)?);
    }
    Ok(rows)
}

/// Fresh server for `seed`, warmed up on the world's offline datasets.
pub fn warmed_server(world: &SyntheticWorld, settings: &ServerSettings, seed: u64) -> Result<ServerState> {
    let root = seeded_rng(seed);
    let mut server = ServerState::new(*settings, world.offline.clone(), &root.derive_str("server"))?;
    server.warmup(&world.benchmark, &root.derive_str("warmup"))?;
    Ok(server)
}

/// Serves every task in the seed's order from an already warmed server.
pub fn run_online(
    world: &SyntheticWorld,
    mut server: ServerState,
    seed: u64,
    transcript: &mut Transcript,
) -> Result<(Vec<ReportRow>, ServerState)> {
    let root = seeded_rng(seed);
    let mut rows = Vec::new();
    for i in task_order(world, seed) {
        let d: &DatasetDescriptor = &world.tasks()[i];
        let out = server.serve_task(d, &world.benchmark, &task_rng(&root, &d.id), transcript)?;
        let pool: Vec<&str> = out.pool.iter().map(String::as_str).collect();
        rows.push(row(&world.benchmark, seed, &d.id, &pool, &out.best, server.settings.budget)?);
    }
    Ok((rows, server))
}

/// Runs `method` for one seed, sharing `warm` when given.
pub fn run_method(
    world: &SyntheticWorld,
    method: Method,
    settings: &ServerSettings,
    seed: u64,
    warm: Option<&ServerState>,
    transcript: &mut Transcript,
) -> Result<Vec<ReportRow>> {
    match method {
        Method::Random => run_random(world, settings, seed),
        Method::Ranker(flags) => {
            let mut s = *settings;
            s.flags = flags;
            let server = match warm {
                Some(w) if !flags.changes_warmup() => {
                    let mut w = w.clone();
                    w.settings = s;
                    w
                }
                _ => warmed_server(world, &s, seed)?,
            };
            Ok(run_online(world, server, seed, transcript)?.0)
        }
    }
}

/// Every method over every seed; seeds run on up to `parallel` threads
/// and reports keep seed order.
pub fn run_suite(
    world: &SyntheticWorld,
    methods: &[Method],
    settings: &ServerSettings,
    seeds: &[u64],
    parallel: usize,
) -> Result<Vec<ExperimentReport>> {
    Ok(run_suite_logged(world, methods, settings, seeds, parallel, false)?.0)
}

/// [`run_suite`] that also returns one transcript per method and seed
/// (empty unless `keep` is set).
pub fn run_suite_logged(
    world: &SyntheticWorld,
    methods: &[Method],
    settings: &ServerSettings,
    seeds: &[u64],
    parallel: usize,
    keep: bool,
) -> Result<(Vec<ExperimentReport>, Vec<Vec<Transcript>>)> {
    let one_seed = |seed: u64| -> Result<Vec<(Vec<ReportRow>, Transcript)>> {
        let needs_base = methods
            .iter()
            .filter(|m| matches!(m, Method::Ranker(f) if !f.changes_warmup()))
            .count();
        let base = if needs_base > 0 {
            let mut s = *settings;
            s.flags = MethodFlags::default();
            Some(warmed_server(world, &s, seed)?)
        } else {
            None
        };
        methods
            .iter()
            .map(|m| {
                let mut t = Transcript::new();
                let rows = run_method(world, *m, settings, seed, base.as_ref(), &mut t)?;
                Ok((rows, if keep { t } else { Transcript::new() }))
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::Invalid(e.to_string()))?;
    let mut per_seed: Vec<Vec<(Vec<ReportRow>, Transcript)>> =
        pool.install(|| seeds.par_iter().map(|&s| one_seed(s)).collect::<Result<_>>())?;
    let mut reports = Vec::with_capacity(methods.len());
    let mut logs = Vec::with_capacity(methods.len());
    for (k, m) in methods.iter().enumerate() {
        let mut rows = Vec::new();
        let mut ts = Vec::with_capacity(seeds.len());
        for s in per_seed.iter_mut() {
            let (r, t) = std::mem::take(&mut s[k]);
            rows.extend(r);
            ts.push(t);
        }
        reports.push(ExperimentReport::from_rows(&m.to_string(), settings.budget, rows));
        logs.push(ts);
    }
    Ok((reports, logs))
}
