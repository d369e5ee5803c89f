use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
datasets = 4
images_per_dataset = 16
augment_max = 3
pool_size = 40
warmup_steps = 10
warmup_triplets = 100
n_iters = 2
n_trans = 2
seeds = 2
hidden = 8
";

fn hyperfd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperfd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HYPERFD_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

#[test]
fn gradcheck_passes_and_prints_the_worst_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hyperfd(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("max relative error")).unwrap();
    let v: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(v <= 1e-4);
}

#[test]
fn run_is_reproducible_and_replays_from_its_manifest() {
    let dir = setup();
    let p = dir.path();
    let run = |out: &str, cfg: &str| {
        let o = hyperfd(&["--config", cfg, "--out", out, "run", "--transcripts"], p);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a", "small.cfg");
    run("b", "small.cfg");
    run("c", "a/manifest.txt");
    for f in ["report-hyperfd.csv", "report-random.csv"] {
        let a = fs::read(p.join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(p.join("b").join(f)).unwrap(), "{f}");
        assert_eq!(a, fs::read(p.join("c").join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(p.join("a/report-hyperfd.csv")).unwrap();
    assert!(csv.starts_with("# hidden = 8\n"));
    assert!(csv.contains("seed,dataset_id,config,ap_val,ap_test,norm_rank,delta_ap\n"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("a/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["overrides"]["n_iters"], "2");
    assert!(p.join("a/transcripts/hyperfd-seed1.jsonl").exists());

    let o = hyperfd(&["audit", "a/transcripts/hyperfd-seed0.jsonl", "a/transcripts/hyperfd-seed1.jsonl"], p);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 violations"));

    let o = hyperfd(&["report", "a/report-hyperfd.csv", "a/report-random.csv"], p);
    assert_eq!(o.status.code(), Some(0));
    let again: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let by_name = |v: &serde_json::Value, m: &str| {
        v["methods"].as_array().unwrap().iter().find(|e| e["method"] == m).unwrap().clone()
    };
    for m in ["hyperfd", "random"] {
        let (a, b) = (by_name(&again, m), by_name(&summary, m));
        assert_eq!(a["mean_rank"], b["mean_rank"]);
        assert_eq!(a["mean_delta_ap"], b["mean_delta_ap"]);
        assert_eq!(a["per_dataset"], b["per_dataset"]);
    }
}

#[test]
fn missing_benchmark_fails_without_leaving_files() {
    let dir = setup();
    let o = hyperfd(&["--config", "small.cfg", "--out", "out", "run", "--benchmark", "nope.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.csv"));
    let left: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("small.cfg")]);
}

#[test]
fn bad_input_is_a_user_error() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(hyperfd(&["run", "--bogus"], p).status.code(), Some(1));
    assert_eq!(hyperfd(&["--set", "hidden=many", "gradcheck"], p).status.code(), Some(1));
    assert_eq!(hyperfd(&["--config", "absent.cfg", "gradcheck"], p).status.code(), Some(1));
    fs::write(p.join("bad.cfg"), "hidden 8\n").unwrap();
    let o = hyperfd(&["--config", "bad.cfg", "gen-synth"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    assert_eq!(hyperfd(&["report", "small.cfg"], p).status.code(), Some(1));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = setup();
    let p = dir.path();
    let seed_of = |out: &str| {
        let m = fs::read_to_string(p.join(out).join("manifest.txt")).unwrap();
        m.lines().find(|l| l.starts_with("seed ")).unwrap().to_string()
    };
    let o = Command::new(env!("CARGO_BIN_EXE_hyperfd"))
        .args(["--config", "small.cfg", "--out", "env", "gen-synth"])
        .current_dir(p)
        .env("HYPERFD_SEED", "41")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(seed_of("env"), "seed = 41");
    let o = Command::new(env!("CARGO_BIN_EXE_hyperfd"))
        .args(["--config", "small.cfg", "--out", "flag", "--seed", "7", "gen-synth"])
        .current_dir(p)
        .env("HYPERFD_SEED", "41")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(seed_of("flag"), "seed = 7");
}

#[test]
fn generated_world_feeds_run_augment_and_warmup() {
    let dir = setup();
    let p = dir.path();
    let ok = |args: &[&str]| {
        let o = hyperfd(args, p);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(&["--config", "small.cfg", "--out", "world", "gen-synth"]);
    let world: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("world/world.json")).unwrap()).unwrap();
    assert_eq!(world["tasks"].as_array().unwrap().len(), 3);
    assert!(p.join("world/datasets/task-01.jsonl").exists());

    ok(&["--config", "small.cfg", "--out", "plain", "run", "--seeds", "1"]);
    ok(&["--config", "small.cfg", "--out", "given", "run", "--seeds", "1", "--benchmark", "world/benchmark.csv"]);
    assert_eq!(
        fs::read(p.join("plain/report-hyperfd.csv")).unwrap(),
        fs::read(p.join("given/report-hyperfd.csv")).unwrap()
    );

    ok(&["--out", "parts", "augment", "world/datasets/base.jsonl", "--ks", "2,3", "--max", "0"]);
    let subsets: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("parts/subsets.json")).unwrap()).unwrap();
    let members = subsets["members"].as_object().unwrap();
    assert!(!members.is_empty());
    for id in members.keys() {
        assert!(p.join("parts").join(format!("{id}.jsonl")).exists());
    }

    let o = ok(&["--config", "small.cfg", "--out", "warm", "warmup"]);
    assert!(stdout(&o).contains("task NDCG"));
    let params: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("warm/params.json")).unwrap()).unwrap();
    assert!(params.as_array().unwrap().len() > 4);
}

#[test]
fn audit_flags_a_planted_image_payload() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let line = r#"{"task":0,"seq":0,"payload":{"kind":"meta_feature_upload","records":[{"stages":[]}]}}"#;
    fs::write(p.join("t.jsonl"), format!("{line}\n")).unwrap();
    let o = hyperfd(&["audit", "t.jsonl"], p);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("violations") && !text.contains(" 0 violations"), "{text}");
}
