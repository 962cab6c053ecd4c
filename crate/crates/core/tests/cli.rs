use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_affinity-xrl");

/// A small but complete configuration, passed through environment overrides.
const TINY: &[(&str, &str)] = &[
    ("AXRL_ENV__HORIZON", "24"),
    ("AXRL_BINS__MATURITY_BINS", "2"),
    ("AXRL_TRAIN__EPISODES", "1"),
    ("AXRL_TRAIN__BATCH_SIZE", "8"),
    ("AXRL_TRAIN__HIDDEN", "[8]"),
    ("AXRL_EXPLAIN__SAMPLE_SEEDS", "2"),
];

fn run(out: &Path, args: &[&str], extra_env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).arg("--out").arg(out);
    for (k, v) in TINY.iter().chain(extra_env) {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn count(dir: &Path, suffix: &str) -> usize {
    std::fs::read_dir(dir).map_or(0, |it| {
        it.filter_map(Result::ok)
            .filter(|e| e.file_name().to_string_lossy().ends_with(suffix))
            .count()
    })
}

fn snapshot(out: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in [
        "data",
        "indicators",
        "checkpoints",
        "logs",
        "traces",
        "surrogates",
        "dot",
        "actions",
        "reports",
    ] {
        let mut entries: Vec<_> = std::fs::read_dir(out.join(sub))
            .unwrap()
            .filter_map(Result::ok)
            .collect();
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            files.push((
                format!("{sub}/{}", e.file_name().to_string_lossy()),
                std::fs::read(e.path()).unwrap(),
            ));
        }
    }
    files
}

#[test]
fn run_all_writes_every_artifact_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let first = run(&out, &["run-all"], &[]);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = stdout(&first);
    assert_eq!(text.matches("lambda=1 ").count(), 5, "{text}");

    assert_eq!(count(&out.join("indicators"), ".csv"), 3);
    assert_eq!(count(&out.join("data"), "_prices.csv"), 4);
    assert_eq!(count(&out.join("checkpoints"), ".json"), 5);
    assert_eq!(count(&out.join("surrogates"), ".surrogate"), 5);
    assert_eq!(count(&out.join("dot"), ".dot"), 5);
    assert_eq!(count(&out.join("actions"), ".csv"), 10);
    assert_eq!(count(&out.join("reports"), ".csv"), 3);
    let matrix = std::fs::read_to_string(out.join("actions/openness_agent.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 1 + 24);
    assert!(std::fs::read_dir(&out).unwrap().all(|e| !e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .ends_with(".tmp")));

    let before = snapshot(&out);
    let again = run(&out, &["run-all"], &[]);
    assert!(again.status.success());
    assert!(stdout(&again).contains("skipped"));
    assert_eq!(snapshot(&out), before);

    let forced = run(&out, &["run-all", "--force"], &[]);
    assert!(forced.status.success(), "{}", stderr(&forced));
    assert!(!stdout(&forced).contains("skipped"));
    assert_eq!(snapshot(&out), before);
}

#[test]
fn stages_compose_and_seed_flag_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let seed = if out == &a { "1" } else { "2" };
        for stage in ["ingest", "train", "explain"] {
            let o = run(out, &[stage, "--seed", seed, "--workers", "2"], &[]);
            assert!(o.status.success(), "{stage}: {}", stderr(&o));
        }
    }
    let ca = std::fs::read(a.join("checkpoints/neuroticism.json")).unwrap();
    let cb = std::fs::read(b.join("checkpoints/neuroticism.json")).unwrap();
    assert_ne!(ca, cb);
}

#[test]
fn explain_before_train_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert!(run(&out, &["ingest"], &[]).status.success());
    let o = run(&out, &["explain"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train"), "{}", stderr(&o));
}

#[test]
fn validation_errors_exit_with_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let o = run(&out, &["ingest"], &[("AXRL_WORKERS", "0")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`workers`"), "{}", stderr(&o));

    let cfg = dir.path().join("config.toml");
    std::fs::write(
        &cfg,
        "[data.rate]\ncsv = \"missing.csv\"\nsynth_fallback = false\n",
    )
    .unwrap();
    let o = run(&out, &["ingest", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.rate.csv"), "{}", stderr(&o));

    let o = run(&out, &["ingest", "--no-such-flag"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &dir.path().join("out"),
        &["print-config", "--seed", "9"],
        &[],
    );
    assert!(o.status.success());
    let cfg = affinity_xrl::config::PipelineConfig::from_toml_str(&stdout(&o)).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.env.horizon, 24);
    assert_eq!(cfg.prototypes.len(), 5);
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/default.toml");
    let cfg = affinity_xrl::config::PipelineConfig::load(Some(&path), Vec::new()).unwrap();
    assert_eq!(cfg, affinity_xrl::config::PipelineConfig::default());
}
