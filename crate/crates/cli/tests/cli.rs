//! End-to-end tests of the binary: exit codes, artifact layout, stage
//! gating, and byte-level idempotence, all on a deliberately tiny task.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
[run]
output_dir = "run"

[data]
classes = 3
train_per_class = 24
test_per_class = 8
channels = 1
height = 10
width = 10
noise = 0.3
seed = 11

[model]
family = "custom"
stage_widths = [8]
convs_per_stage = [1]
fc_hidden = []
init_seed = 3

[train]
epochs = 3
batch_size = 16
learning_rate = 0.01
momentum = 0.9
seed = 2

[prune.step1]
fraction_per_iteration = 0.25
finetune_epochs = 1
budget_points = 30.0
min_filters = 2
max_iterations = 1
seed = 100

[prune.step2]
fraction_per_iteration = 0.5
finetune_epochs = 1
budget_points = 40.0
min_filters = 2
max_iterations = 1
seed = 200

[system]
gamma = 4.0
rate = "137.5 kB/s"
budget_points = 40.0
partitions = "endpoints"
use_codec = false

[sweep]
rates = ["1.1 Mbps", "5.85 Mbps"]
gammas = [2.0, 8.0]
"#;

struct Fixture {
    #[allow(dead_code)]
    tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Fixture {
    fn new(config_text: &str) -> Fixture {
        let tmp = tempfile::tempdir().expect("tempdir");
        let config = tmp.path().join("run.toml");
        std::fs::write(&config, config_text).expect("write config");
        let out = tmp.path().join("run");
        Fixture { tmp, config, out }
    }

    fn run(&self, subcommand: &str) -> Output {
        Command::new(env!("CARGO_BIN_EXE_prunepart"))
            .arg("--config")
            .arg(&self.config)
            .arg("--output")
            .arg(&self.out)
            .arg(subcommand)
            .output()
            .expect("binary runs")
    }

    fn run_ok(&self, subcommand: &str) -> String {
        let out = self.run(subcommand);
        assert!(
            out.status.success(),
            "`{subcommand}` failed\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    }
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `dir`, as (relative path, bytes), sorted.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                walk(root, &path, acc);
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                acc.push((
                    rel.to_string_lossy().into_owned(),
                    std::fs::read(&path).expect("readable file"),
                ));
            }
        }
    }
    let mut acc = Vec::new();
    walk(dir, dir, &mut acc);
    acc.sort_by(|a, b| a.0.cmp(&b.0));
    acc
}

#[test]
fn pipeline_runs_end_to_end_and_emits_all_artifacts() {
    let fx = Fixture::new(TINY_CONFIG);
    for stage in ["train", "prune1", "prune2", "profile", "plan", "sweep", "simulate", "report"] {
        fx.run_ok(stage);
    }
    for artifact in [
        "manifest.toml",
        "catalog/index.toml",
        "catalog/original.model",
        "train_log.csv",
        "profiles/original.tsv",
        "plan.toml",
        "sweep.csv",
        "sweep.md",
        "trace.csv",
        "report.md",
        "layer_data.csv",
        "latency_breakdown.csv",
        "accuracy_vs_fraction.csv",
        "transmission_vs_accuracy.csv",
    ] {
        assert!(fx.out.join(artifact).exists(), "missing artifact {artifact}");
    }

    // Every table carries the config digest; the manifest records it too.
    let manifest = std::fs::read_to_string(fx.out.join("manifest.toml")).unwrap();
    let digest_line = manifest
        .lines()
        .find(|l| l.starts_with("config_digest"))
        .expect("manifest has config digest");
    let digest = digest_line.split('"').nth(1).expect("quoted digest");
    assert_eq!(digest.len(), 64);
    for table in ["train_log.csv", "sweep.csv", "layer_data.csv", "trace.csv"] {
        let text = std::fs::read_to_string(fx.out.join(table)).unwrap();
        assert!(
            text.starts_with(&format!("# config {digest}")),
            "{table} lacks the config digest"
        );
    }
    let report = std::fs::read_to_string(fx.out.join("report.md")).unwrap();
    assert!(report.contains(digest), "report.md lacks the config digest");
    assert!(report.contains("## Selected plan"));
    assert!(report.contains("## Link-rate sweep"));

    // The trace validated the plan.
    let trace = std::fs::read_to_string(fx.out.join("trace.csv")).unwrap();
    assert!(trace.contains("validated: every component within 1.0%"));
}

#[test]
fn stages_out_of_order_name_the_missing_prerequisite() {
    let fx = Fixture::new(TINY_CONFIG);
    let out = fx.run("plan");
    assert_eq!(exit_code(&out), 3);
    assert!(stderr(&out).contains("run `prunepart profile` first"), "{}", stderr(&out));

    let out = fx.run("prune2");
    assert_eq!(exit_code(&out), 3);
    assert!(stderr(&out).contains("run `prunepart prune1` first"), "{}", stderr(&out));
}

#[test]
fn invalid_configs_exit_2_with_a_parse_location() {
    let fx = Fixture::new("[data]\nclasses = \"many\"\n");
    let out = fx.run("train");
    assert_eq!(exit_code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("line"), "no location in: {msg}");

    // Unknown fields are rejected, not silently ignored.
    let fx = Fixture::new("[train]\nepoochs = 3\n");
    let out = fx.run("train");
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("epoochs"), "{}", stderr(&out));

    // Rates must carry a unit.
    let bad_rate = TINY_CONFIG.replace("\"137.5 kB/s\"", "\"137500\"");
    let fx = Fixture::new(&bad_rate);
    let out = fx.run("train");
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("unit"), "{}", stderr(&out));

    // A config error beats stage state: nothing was created.
    assert!(!fx.out.exists());
}

#[test]
fn unreachable_accuracy_floor_exits_4() {
    let fx = Fixture::new(&TINY_CONFIG.replace(
        "budget_points = 40.0\npartitions",
        "budget_points = 40.0\nfloor_absolute = 1.5\npartitions",
    ));
    for stage in ["train", "prune1", "prune2", "profile"] {
        fx.run_ok(stage);
    }
    let out = fx.run("plan");
    assert_eq!(exit_code(&out), 4);
    assert!(stderr(&out).contains("accuracy floor"), "{}", stderr(&out));
    assert!(!fx.out.join("plan.toml").exists());
}

#[test]
fn completed_stages_skip_and_change_no_bytes() {
    let fx = Fixture::new(TINY_CONFIG);
    for stage in ["train", "prune1", "prune2", "profile", "plan", "sweep", "simulate", "report"] {
        fx.run_ok(stage);
    }
    let before = snapshot(&fx.out);
    for stage in ["train", "prune1", "prune2", "profile", "plan", "sweep", "simulate", "report"] {
        let stdout = fx.run_ok(stage);
        assert!(
            stdout.contains("up to date"),
            "`{stage}` did not skip: {stdout}"
        );
    }
    let after = snapshot(&fx.out);
    assert_eq!(
        before.iter().map(|(p, _)| p).collect::<Vec<_>>(),
        after.iter().map(|(p, _)| p).collect::<Vec<_>>(),
        "file set changed"
    );
    for ((path, a), (_, b)) in before.iter().zip(&after) {
        assert_eq!(a, b, "bytes changed in {path}");
    }
}

#[test]
fn editing_a_stage_config_invalidates_downstream_stages() {
    let fx = Fixture::new(TINY_CONFIG);
    for stage in ["train", "prune1", "prune2", "profile", "plan"] {
        fx.run_ok(stage);
    }

    // A system change re-plans without retraining…
    std::fs::write(
        &fx.config,
        TINY_CONFIG.replace("gamma = 4.0", "gamma = 9.0"),
    )
    .unwrap();
    let stdout = fx.run_ok("train");
    assert!(stdout.contains("up to date"), "train should survive a [system] edit");
    let stdout = fx.run_ok("plan");
    assert!(!stdout.contains("up to date"), "plan must re-run after a [system] edit");

    // …while a training change stales the whole chain.
    std::fs::write(
        &fx.config,
        TINY_CONFIG.replace("epochs = 3", "epochs = 4"),
    )
    .unwrap();
    let out = fx.run("prune1");
    assert_eq!(exit_code(&out), 3);
    assert!(stderr(&out).contains("stale"), "{}", stderr(&out));
    assert!(stderr(&out).contains("train"), "{}", stderr(&out));
    fx.run_ok("train");
    fx.run_ok("prune1");
}

#[test]
fn plan_flag_overrides_change_the_outcome_like_config_edits() {
    let fx = Fixture::new(TINY_CONFIG);
    for stage in ["train", "prune1", "prune2", "profile", "plan"] {
        fx.run_ok(stage);
    }
    let first = std::fs::read_to_string(fx.out.join("plan.toml")).unwrap();
    assert!(first.contains("gamma = 4.0"));

    // An override re-plans (different digest) and lands in the artifact.
    let out = Command::new(env!("CARGO_BIN_EXE_prunepart"))
        .arg("--config")
        .arg(&fx.config)
        .arg("--output")
        .arg(&fx.out)
        .args(["plan", "--gamma", "9.0", "--rate", "5.85 Mbps"])
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{}", stderr(&out));
    let second = std::fs::read_to_string(fx.out.join("plan.toml")).unwrap();
    assert!(second.contains("gamma = 9.0"));
    assert!(second.contains("5.85 Mbps"));
}

#[test]
fn overridden_plan_stales_downstream_stages_instead_of_skipping() {
    let fx = Fixture::new(TINY_CONFIG);
    for stage in ["train", "prune1", "prune2", "profile", "plan", "simulate"] {
        fx.run_ok(stage);
    }

    // Re-plan under flag overrides; the recorded plan no longer matches the
    // config file, so the old simulation must not pass itself off as current.
    let out = Command::new(env!("CARGO_BIN_EXE_prunepart"))
        .arg("--config")
        .arg(&fx.config)
        .arg("--output")
        .arg(&fx.out)
        .args(["plan", "--gamma", "9.0"])
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{}", stderr(&out));

    let sim = fx.run("simulate");
    assert_eq!(sim.status.code(), Some(3), "{}", stderr(&sim));
    let err = stderr(&sim);
    assert!(err.contains("plan"), "names the stale stage: {err}");
    assert!(err.contains("stale"), "says why: {err}");

    // Re-planning under the plain config heals the chain.
    fx.run_ok("plan");
    fx.run_ok("simulate");
}
