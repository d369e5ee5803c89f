//! The `hyperfd` command line.
//!
//! Configuration resolves in layers: defaults, `HYPERFD_SEED`, the
//! `--config` file, `--set key=value` flags, then `--seed`. Every command
//! that produces files stages them in a sibling directory and moves them
//! into `--out` only once everything succeeded, next to a `manifest.txt`
//! that is itself a config file replaying the run.
//!
//! Exit status is 0 on success, 1 for user errors (bad flags, unreadable
//! or malformed inputs, a failed audit) and 2 for internal errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::autodiff::seeded_rng;
use crate::benchdata::{
    augment_dataset, gen_synthetic_world, load_dataset, save_dataset, subset_dataset, AugmentSpec, BenchmarkTable,
    KMeansInit, SyntheticWorld,
};
use crate::checks::{gradcheck_suites, DEFAULT_COORDS, DEFAULT_EPS, TOLERANCE};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{run_suite_logged, ExperimentReport, Method};
use crate::protocol::{audit_privacy, params_to_arrays, ranking_ndcg, ServerState, Transcript};

pub const SEED_ENV: &str = "HYPERFD_SEED";
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Parser)]
#[command(name = "hyperfd", version, about = "Online AutoML with a continually trained performance ranker")]
struct Cli {
    /// Root seed (falls back to HYPERFD_SEED, then the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "hyperfd-out")]
    out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world: datasets, benchmark table and spec.
    GenSynth,
    /// Split one dataset file into k-means subsets.
    Augment(AugmentArgs),
    /// Warm up a ranker on the offline datasets and save its parameters.
    Warmup(BenchArgs),
    /// Run every configured method over every seed.
    Run(RunArgs),
    /// Re-aggregate report CSVs.
    Report(ReportArgs),
    /// Finite-difference checks of every gradient.
    Gradcheck(GradArgs),
    /// Privacy audit of transcripts.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Dataset file (JSON lines).
    input: PathBuf,
    /// Cluster counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    min_size: Option<usize>,
    /// Keep at most this many subsets; 0 keeps all.
    #[arg(long)]
    max: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Benchmark CSV to use instead of the generated one.
    #[arg(long, value_name = "CSV")]
    benchmark: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    bench: BenchArgs,
    #[arg(long)]
    parallel_seeds: Option<usize>,
    /// Methods, comma separated.
    #[arg(long)]
    methods: Option<String>,
    /// Number of consecutive seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Save one transcript per method and seed.
    #[arg(long)]
    transcripts: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(required = true)]
    csv: Vec<PathBuf>,
    /// Budget recorded in the summary.
    #[arg(long, default_value_t = 4)]
    budget: usize,
}

#[derive(Debug, Args)]
struct GradArgs {
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = DEFAULT_COORDS)]
    coords: usize,
    #[arg(long, default_value_t = TOLERANCE)]
    tol: f64,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[arg(required = true)]
    transcripts: Vec<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidConfig(_)
            | Error::ConfigParse { .. }
            | Error::Malformed { .. }
            | Error::UnknownParam(_)
            | Error::BenchmarkMiss { .. }
            | Error::EmptyDataset(_)
            | Error::PoolTooSmall { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => Failure::User(msg),
            _ => Failure::Internal(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            2
        }
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Failure::User(format!("{SEED_ENV}=`{v}` is not a seed")))?;
    }
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::User(format!("`--set {kv}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> CliResult<i32> {
    let mut cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenSynth => gen_synth(&cfg, &cli.out),
        Command::Augment(a) => augment(&cfg, a, &cli.out),
        Command::Warmup(b) => warmup(&cfg, b, &cli.out),
        Command::Run(r) => {
            if let Some(n) = r.parallel_seeds {
                cfg.set("parallel_seeds", &n.to_string())?;
            }
            if let Some(m) = &r.methods {
                cfg.set("methods", m)?;
            }
            if let Some(n) = r.seeds {
                cfg.set("seeds", &n.to_string())?;
            }
            if r.transcripts {
                cfg.transcripts = true;
            }
            run(&cfg, &r.bench, &cli.out)
        }
        Command::Report(r) => report(r),
        Command::Gradcheck(g) => gradcheck(&cfg, g),
        Command::Audit(a) => audit(a),
    }
}

/// Output files collected in a sibling directory and moved into place on
/// [`Staging::commit`]; dropped uncommitted, nothing reaches `out`.
struct Staging {
    tmp: PathBuf,
    out: PathBuf,
    committed: bool,
}

impl Staging {
    fn new(out: &Path) -> CliResult<Self> {
        let name = out
            .file_name()
            .ok_or_else(|| Failure::User(format!("`{}` is not a directory name", out.display())))?;
        let mut tmp_name = OsString::from(".");
        tmp_name.push(name);
        tmp_name.push(format!(".partial-{}", std::process::id()));
        let tmp = out.with_file_name(tmp_name);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(Error::from)?;
        }
        fs::create_dir_all(&tmp).map_err(Error::from)?;
        Ok(Self {
            tmp,
            out: out.to_path_buf(),
            committed: false,
        })
    }

    fn path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.tmp.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(Error::from)?;
        }
        Ok(p)
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        fs::write(self.path(rel)?, contents).map_err(Error::from)?;
        Ok(())
    }

    fn json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
        text.push('\n');
        self.write(rel, text)
    }

    fn commit(mut self) -> CliResult<()> {
        fs::create_dir_all(&self.out).map_err(Error::from)?;
        for entry in fs::read_dir(&self.tmp).map_err(Error::from)? {
            let entry = entry.map_err(Error::from)?;
            let dest = self.out.join(entry.file_name());
            if dest.is_dir() {
                fs::remove_dir_all(&dest).map_err(Error::from)?;
            }
            fs::rename(entry.path(), dest).map_err(Error::from)?;
        }
        fs::remove_dir_all(&self.tmp).map_err(Error::from)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Replayable manifest: the resolved config, preceded by comments naming
/// the command and the crate version.
pub fn manifest_text(cfg: &RunConfig, command: &str, extra: &[(&str, String)]) -> String {
    let mut s = format!("# hyperfd {}\n# command: {command}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in extra {
        s.push_str(&format!("# {k}: {v}\n"));
    }
    s.push_str(&cfg.to_text());
    s
}

fn build_world(cfg: &RunConfig, bench: Option<&Path>) -> CliResult<SyntheticWorld> {
    cfg.validate()?;
    let supplied = match bench {
        Some(p) => Some(BenchmarkTable::load(p).map_err(|e| Failure::User(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut world = gen_synthetic_world(&cfg.world_spec(), cfg.space)?;
    if let Some(a) = cfg.augment_spec() {
        world.augment_offline(&a)?;
    }
    if let Some(table) = supplied {
        if table.space() != world.space {
            return Err(Failure::User(format!(
                "benchmark is for space `{}`, config says `{}`",
                table.space(),
                world.space
            )));
        }
        for d in world.datasets.iter().chain(&world.offline) {
            if table.configs_for(&d.id).is_empty() {
                return Err(Failure::User(format!("benchmark has no rows for dataset `{}`", d.id)));
            }
        }
        world.benchmark = table;
    }
    Ok(world)
}

fn gen_synth(cfg: &RunConfig, out: &Path) -> CliResult<i32> {
    let world = build_world(cfg, None)?;
    let stage = Staging::new(out)?;
    let mut csv = Vec::new();
    world.benchmark.write_csv(&mut csv)?;
    stage.write("benchmark.csv", csv)?;
    for d in world.datasets.iter().chain(world.offline.iter().skip(1)) {
        save_dataset(d, &stage.path(&format!("datasets/{}.jsonl", d.id))?)?;
    }
    let ids = |ds: &[crate::metafeat::DatasetDescriptor]| ds.iter().map(|d| d.id.clone()).collect::<Vec<_>>();
    stage.json(
        "world.json",
        &json!({
            "spec": world.spec,
            "space": world.space,
            "configs": world.configs.len(),
            "base": world.base().id,
            "tasks": ids(world.tasks()),
            "offline": ids(&world.offline),
            "benchmark_rows": world.benchmark.len(),
        }),
    )?;
    stage.write(MANIFEST, manifest_text(cfg, "gen-synth", &[]))?;
    stage.commit()?;
    println!(
        "{} tasks, {} offline datasets, {} benchmark rows -> {}",
        world.tasks().len(),
        world.offline.len(),
        world.benchmark.len(),
        out.display()
    );
    Ok(0)
}

fn augment(cfg: &RunConfig, a: &AugmentArgs, out: &Path) -> CliResult<i32> {
    let parent = load_dataset(&a.input).map_err(|e| Failure::User(format!("{}: {e}", a.input.display())))?;
    let mut spec = AugmentSpec::default();
    if let Some(ks) = &a.ks {
        spec.ks = ks.clone();
    }
    if let Some(m) = a.min_size {
        spec.min_size = m;
    }
    spec.max_datasets = match a.max {
        Some(0) => None,
        Some(m) => Some(m),
        None => (cfg.augment_max > 0).then_some(cfg.augment_max),
    };
    spec.inits = vec![KMeansInit::PlusPlus, KMeansInit::Random];
    let mut rng = seeded_rng(cfg.seed).derive_str("augment");
    let subsets = augment_dataset(&parent, &spec, &mut rng)?;
    let stage = Staging::new(out)?;
    let mut members = BTreeMap::new();
    for (id, m) in &subsets {
        save_dataset(&subset_dataset(&parent, id, m)?, &stage.path(&format!("{id}.jsonl"))?)?;
        members.insert(id.clone(), m.clone());
    }
    stage.json("subsets.json", &json!({ "parent": parent.id, "spec": spec, "members": members }))?;
    stage.write(
        MANIFEST,
        manifest_text(cfg, "augment", &[("input", a.input.display().to_string())]),
    )?;
    stage.commit()?;
    println!("{} subsets of `{}` -> {}", subsets.len(), parent.id, out.display());
    Ok(0)
}

fn bench_note(b: &BenchArgs) -> Vec<(&'static str, String)> {
    b.benchmark
        .iter()
        .map(|p| ("benchmark", p.display().to_string()))
        .collect()
}

fn warmup(cfg: &RunConfig, b: &BenchArgs, out: &Path) -> CliResult<i32> {
    let settings = cfg.server_settings()?;
    let world = build_world(cfg, b.benchmark.as_deref())?;
    let root = seeded_rng(cfg.seed);
    let mut server = ServerState::new(settings, world.offline.clone(), &root.derive_str("server"))?;
    let probe = root.derive_str("probe");
    let before = ranking_ndcg(&server.params, &settings.ranker, world.tasks(), &world.benchmark, &probe)?;
    let stats = server.warmup(&world.benchmark, &root.derive_str("warmup"))?;
    let after = ranking_ndcg(&server.params, &settings.ranker, world.tasks(), &world.benchmark, &probe)?;

    let stage = Staging::new(out)?;
    stage.json("params.json", &params_to_arrays(&server.params))?;
    stage.json(
        "warmup.json",
        &json!({
            "seed": cfg.seed,
            "steps": stats.len(),
            "final": stats.last(),
            "task_ndcg_before": before,
            "task_ndcg_after": after,
        }),
    )?;
    stage.write(MANIFEST, manifest_text(cfg, "warmup", &bench_note(b)))?;
    stage.commit()?;
    println!("warm-up: {} steps, task NDCG {before:.4} -> {after:.4}", stats.len());
    Ok(0)
}

#[derive(Serialize)]
struct MethodSummary<'a> {
    method: &'a str,
    file: String,
    rows: usize,
    mean_rank: f64,
    std_rank: f64,
    mean_delta_ap: f64,
    std_delta_ap: f64,
    per_dataset: &'a BTreeMap<String, crate::metrics::Aggregate>,
}

fn summary_entry(r: &ExperimentReport, file: String) -> MethodSummary<'_> {
    MethodSummary {
        method: &r.method,
        file,
        rows: r.rows.len(),
        mean_rank: r.overall.mean_rank,
        std_rank: r.overall.std_rank,
        mean_delta_ap: r.overall.mean_delta_ap,
        std_delta_ap: r.overall.std_delta_ap,
        per_dataset: &r.per_dataset,
    }
}

/// File name of a method's report.
pub fn report_file(method: &Method) -> String {
    format!("report-{method}.csv")
}

/// The report CSV with the config overrides as leading `#` lines.
pub fn report_csv(r: &ExperimentReport, overrides: &[(String, String)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for (k, v) in overrides {
        buf.extend_from_slice(format!("# {k} = {v}\n").as_bytes());
    }
    r.write_csv(&mut buf)?;
    Ok(buf)
}

fn run(cfg: &RunConfig, b: &BenchArgs, out: &Path) -> CliResult<i32> {
    let settings = cfg.server_settings()?;
    let world = build_world(cfg, b.benchmark.as_deref())?;
    let seeds = cfg.seed_list();
    let (reports, logs) = run_suite_logged(
        &world,
        &cfg.methods,
        &settings,
        &seeds,
        cfg.parallel_seeds,
        cfg.transcripts,
    )?;

    let stage = Staging::new(out)?;
    let overrides = cfg.overrides();
    let mut methods = Vec::new();
    for (m, r) in cfg.methods.iter().zip(&reports) {
        let file = report_file(m);
        stage.write(&file, report_csv(r, &overrides)?)?;
        methods.push(summary_entry(r, file));
    }
    if cfg.transcripts {
        for (m, ts) in cfg.methods.iter().zip(&logs) {
            for (seed, t) in seeds.iter().zip(ts) {
                t.save(&stage.path(&format!("transcripts/{m}-seed{seed}.jsonl"))?)?;
            }
        }
    }
    let overrides: BTreeMap<_, _> = overrides.into_iter().collect();
    stage.json(
        "summary.json",
        &json!({
            "version": env!("CARGO_PKG_VERSION"),
            "seeds": seeds,
            "budget": settings.budget,
            "overrides": overrides,
            "methods": methods,
        }),
    )?;
    stage.write(MANIFEST, manifest_text(cfg, "run", &bench_note(b)))?;
    stage.commit()?;

    println!("{:<24} {:>8} {:>8} {:>10}", "method", "rank", "±", "ΔAP/seed");
    for r in &reports {
        println!(
            "{:<24} {:>8.2} {:>8.2} {:>10.2}",
            r.method, r.overall.mean_rank, r.overall.std_rank, r.overall.mean_delta_ap
        );
    }
    println!("{} seeds -> {}", seeds.len(), out.display());
    Ok(0)
}

fn report(a: &ReportArgs) -> CliResult<i32> {
    let mut out = Vec::new();
    for path in &a.csv {
        let method = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(|s| s.strip_prefix("report-").unwrap_or(s).to_string())
            .unwrap_or_default();
        let file = fs::File::open(path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
        let r = ExperimentReport::read_csv(&method, a.budget, file)
            .map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
        out.push(serde_json::to_value(summary_entry(&r, path.display().to_string())).map_err(Error::from)?);
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "budget": a.budget, "methods": out })).map_err(Error::from)?
    );
    Ok(0)
}

fn gradcheck(cfg: &RunConfig, g: &GradArgs) -> CliResult<i32> {
    let suites = gradcheck_suites(g.eps, g.coords, cfg.seed)?;
    let mut max = 0.0f64;
    let mut failed = 0;
    for s in &suites {
        let ok = s.passes(g.tol);
        failed += usize::from(!ok);
        max = max.max(s.max_rel_error);
        println!(
            "{:<20} {:>12.3e} {:>6} checked {:>4} skipped  {}",
            s.name,
            s.max_rel_error,
            s.checked,
            s.skipped,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {max:.3e} (tolerance {:.0e})", g.tol);
    Ok(if failed == 0 { 0 } else { 2 })
}

fn audit(a: &AuditArgs) -> CliResult<i32> {
    let mut dirty = 0;
    for path in &a.transcripts {
        let t = Transcript::load(path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
        let r = audit_privacy(&t)?;
        println!(
            "{}: {} messages, {} violations",
            path.display(),
            r.messages,
            r.violations.len()
        );
        for v in &r.violations {
            println!("  line {} {}: {}", v.line, v.path, v.reason);
        }
        dirty += usize::from(!r.passed());
    }
    Ok(if dirty == 0 { 0 } else { 1 })
}
