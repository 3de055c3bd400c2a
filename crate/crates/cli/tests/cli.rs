//! The `codebias` binary driven as a subprocess on a tiny corpus.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use codebias_cli::run::{sha256_hex, RunManifest};

const BIN: &str = env!("CARGO_BIN_EXE_codebias");
const ECHO: &str = env!("CARGO_BIN_EXE_codebias-echo-adapter");

/// Small enough that a one-epoch train finishes in seconds.
const TINY: &str = "\
[corpus]
n_samples = 320
filler_samples = 64
recovery_samples = 16
holdout_samples = 16

[train]
epochs = 1

[edit]
max_steps = 2
";

fn codebias(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--run-root")
        .arg(root)
        .args(args)
        .env_remove("CODEBIAS_RUN_ROOT")
        .output()
        .expect("spawn codebias")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[track_caller]
fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\n{}{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn file_hash(p: &Path) -> String {
    sha256_hex(&std::fs::read(p).unwrap())
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    model: PathBuf,
}

/// One generate and train shared by every test here.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let data = root.join("data");
        ok(codebias(&root, &["--config", s(&config), "--out", s(&data), "generate"]));
        let train = root.join("train");
        ok(codebias(&root, &["--config", s(&config), "--out", s(&train), "train", "--data", s(&data)]));
        Fixture {
            model: train.join("model.ckpt"),
            _tmp: tmp,
            root,
            config,
            data,
        }
    })
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = codebias(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let missing = tmp.path().join("nowhere/professions.tsv");
    let o = codebias(tmp.path(), &["generate", "--professions", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));

    let o = codebias(tmp.path(), &["--set", "train.epochs=\"many\"", "generate"]);
    assert_eq!(o.status.code(), Some(2));

    let o = codebias(tmp.path(), &["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("locate"));
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        ok(codebias(tmp.path(), &["--out", s(&out), "generate", "--seed", seed]));
        (file_hash(&out.join("dataset.jsonl")), file_hash(&out.join("corpus/train.jsonl")))
    };
    let a = gen("a", "5");
    assert_eq!(a, gen("b", "5"));
    assert_ne!(a.0, gen("c", "6").0);
}

#[test]
fn eval_twice_is_identical() {
    let f = fixture();
    let run = |name: &str| {
        let out = f.root.join(name);
        ok(codebias(
            &f.root,
            &["--out", s(&out), "eval", "--data", s(&f.data), "--model", s(&f.model)],
        ));
        std::fs::read_to_string(out.join("eval.csv")).unwrap()
    };
    let a = run("eval-a");
    assert_eq!(a, run("eval-b"));
    assert!(a.lines().count() == 4, "{a}");
}

#[test]
fn single_case_eval_reports_that_case() {
    let f = fixture();
    let out = f.root.join("eval-one");
    let o = ok(codebias(
        &f.root,
        &[
            "--out", s(&out), "eval", "--data", s(&f.data), "--model", s(&f.model), "--splits", "test", "--limit", "1",
        ],
    ));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval_test.json")).unwrap()).unwrap();
    assert_eq!(summary["cases"], 1, "{summary}");
    assert!(stdout(&o).contains("FB-Score"), "{}", stdout(&o));
}

#[test]
fn full_locate_needs_no_work_and_mismatched_masks_are_refused() {
    let f = fixture();
    let out = f.root.join("locate-full");
    let o = ok(codebias(
        &f.root,
        &["--out", s(&out), "locate", "--data", s(&f.data), "--model", s(&f.model), "--level", "full"],
    ));
    assert!(stdout(&o).contains("needs no locating"));
    assert!(!out.join("report_layer.json").exists());

    let row = f.root.join("locate-row-mismatch");
    ok(codebias(&f.root, &["--out", s(&row), "locate", "--data", s(&f.data), "--model", s(&f.model)]));
    let mut mask: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(row.join("mask.json")).unwrap()).unwrap();
    mask["arch_hash"] = "0000".into();
    let bad = f.root.join("bad-mask.json");
    std::fs::write(&bad, mask.to_string()).unwrap();
    let o = codebias(
        &f.root,
        &["edit", "--data", s(&f.data), "--model", s(&f.model), "--mask", s(&bad)],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
}

#[test]
fn every_granularity_edits_and_leaves_the_base_alone() {
    let f = fixture();
    let before = file_hash(&f.model);
    let neuron = f.root.join("locate-neuron");
    ok(codebias(
        &f.root,
        &["--out", s(&neuron), "locate", "--data", s(&f.data), "--model", s(&f.model), "--level", "neuron"],
    ));
    let mut edits = Vec::new();
    for level in ["full", "layer", "module", "row", "neuron"] {
        let loc = f.root.join(format!("locate-from-{level}"));
        ok(codebias(
            &f.root,
            &[
                "--out", s(&loc), "locate", "--data", s(&f.data), "--model", s(&f.model), "--level", level, "--from",
                s(&neuron),
            ],
        ));
        let out = f.root.join(format!("edit-{level}"));
        ok(codebias(
            &f.root,
            &[
                "--config",
                s(&f.config),
                "--out",
                s(&out),
                "edit",
                "--data",
                s(&f.data),
                "--model",
                s(&f.model),
                "--mask",
                s(&loc.join("mask.json")),
            ],
        ));
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("edit_report.json")).unwrap()).unwrap();
        assert_eq!(report["mask_level"], level);
        edits.push(out);
    }
    assert_eq!(file_hash(&f.model), before);

    // reuse never recomputes: the reports match the neuron run's
    for level in ["layer", "module", "row"] {
        let name = format!("report_{level}.json");
        assert_eq!(
            file_hash(&f.root.join(format!("locate-from-{level}")).join(&name)),
            file_hash(&neuron.join(&name))
        );
    }

    let table = f.root.join("report-all");
    let mut args = vec!["--out", s(&table), "report"];
    args.extend(edits.iter().map(|p| s(p)));
    let o = ok(codebias(&f.root, &args));
    let csv = std::fs::read_to_string(table.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7, "{csv}\n{}", stdout(&o));
}

#[test]
fn report_detects_tampering() {
    let f = fixture();
    let out = f.root.join("edit-tamper");
    ok(codebias(
        &f.root,
        &["--config", s(&f.config), "--out", s(&out), "edit", "--data", s(&f.data), "--model", s(&f.model)],
    ));
    ok(codebias(&f.root, &["report", s(&out)]));
    std::fs::write(out.join("comparison.csv"), "label,reliability_fb\nforged,0\n").unwrap();
    let o = codebias(&f.root, &["report", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stdout(&o).contains("MODIFIED: comparison.csv"), "{}", stdout(&o));
}

fn probe_with(root: &Path, adapter: &[&str], sets: &[&str]) -> Output {
    let mut args = vec![];
    for set in sets {
        args.extend(["--set", set]);
    }
    args.extend(["probe", "--prompt", "def f(nurse):"]);
    args.extend(adapter);
    codebias(root, &args)
}

fn probe_json(root: &Path, o: &Output) -> serde_json::Value {
    let line = stderr(o).lines().find_map(|l| l.strip_prefix("run directory: ").map(str::to_string)).unwrap();
    let dir = if Path::new(&line).is_absolute() { PathBuf::from(line) } else { root.join(line) };
    serde_json::from_str(&std::fs::read_to_string(dir.join("probe.json")).unwrap()).unwrap()
}

#[test]
fn echo_adapter_over_stdio() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let even = format!("{ECHO} --he 0.5 --she 0.5");
    let o = ok(probe_with(root, &["--adapter-cmd", &even], &[]));
    let p = probe_json(root, &o);
    assert_eq!((p["p_he"].as_f64(), p["p_she"].as_f64()), (Some(0.5), Some(0.5)));

    for (mode, needle) in [("missing", "she"), ("range", "1.5"), ("garbage", "not json"), ("wrong-id", "id")] {
        let cmd = format!("{ECHO} --mode {mode}");
        let o = probe_with(root, &["--adapter-cmd", &cmd], &["adapter.timeout_ms=2000"]);
        assert_eq!(o.status.code(), Some(1), "{mode}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{mode}: {}", stderr(&o));
    }

    // the first request is dropped; the retry answers
    let cmd = format!("{ECHO} --mode stall-first --he 0.3 --she 0.6");
    let o = ok(probe_with(root, &["--adapter-cmd", &cmd], &["adapter.timeout_ms=300"]));
    assert_eq!(probe_json(root, &o)["p_he"].as_f64(), Some(0.3));
    let o = probe_with(root, &["--adapter-cmd", &cmd], &["adapter.timeout_ms=300", "adapter.max_retries=0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http_echo(args: &[&str]) -> (Server, String) {
    let mut child = Command::new(ECHO)
        .args(args)
        .args(["--http", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    (Server(child), format!("http://{}", line.trim()))
}

#[test]
fn echo_adapter_over_http() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (_server, url) = http_echo(&["--he", "0.25", "--she", "0.75"]);
    let o = ok(probe_with(root, &["--adapter-url", &url], &[]));
    let p = probe_json(root, &o);
    assert_eq!((p["p_he"].as_f64(), p["p_she"].as_f64()), (Some(0.25), Some(0.75)));

    let (_bad, url) = http_echo(&["--mode", "range"]);
    let o = probe_with(root, &["--adapter-url", &url], &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let (_stall, url) = http_echo(&["--mode", "stall-first"]);
    let o = probe_with(root, &["--adapter-url", &url], &["adapter.timeout_ms=500", "adapter.max_retries=0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("timed out"), "{}", stderr(&o));
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[corpus]\nseed = 11\nrecovery_samples = 20\n").unwrap();
    let out = tmp.path().join("g");
    ok(codebias(
        tmp.path(),
        &["--config", s(&cfg), "--set", "corpus.seed=12", "--out", s(&out), "generate"],
    ));
    let written: toml::Table = std::fs::read_to_string(out.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(written["corpus"]["seed"].as_integer(), Some(12));
    assert_eq!(written["corpus"]["recovery_samples"].as_integer(), Some(20));
    assert_eq!(written["corpus"]["holdout_samples"].as_integer(), Some(128));

    let o = codebias(tmp.path(), &["--config", s(&tmp.path().join("absent.toml")), "generate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("env-root");
    let o = Command::new(BIN)
        .args(["generate", "--seed", "1"])
        .env("CODEBIAS_RUN_ROOT", &root)
        .current_dir(tmp.path())
        .output()
        .unwrap();
    ok(o);
    let runs: Vec<_> = std::fs::read_dir(&root).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let dir = runs[0].as_ref().unwrap().path();
    let m = RunManifest::load(&dir).unwrap();
    assert_eq!(m.command, "generate");
    assert!(m.verify(&dir).unwrap().is_empty());
    assert!(!tmp.path().join("runs").exists());
}
