//! End-to-end runs of the compiled binary: offline pipeline determinism on
//! the shipped demo fixtures, idempotent reruns, protocol-hash isolation,
//! exit-code classification, and a live generate stage against a mock
//! backend.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relaudit::client::mock::{MockResponse, MockServer};

const OFFLINE_STAGES: [&str; 7] = [
    "sample", "render", "score", "repair", "metrics", "spread", "report",
];

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_relaudit")
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

fn run_cli(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_stage(stage: &str, config: &Path, run_dir: &Path) -> Output {
    run_cli(&[
        stage,
        "--config",
        config.to_str().unwrap(),
        "--run-dir",
        run_dir.to_str().unwrap(),
    ])
}

fn assert_ok(output: &Output, what: &str) {
    assert!(
        output.status.success(),
        "{what} failed with {:?}\nstdout: {}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
}

fn demo_config(dir: &Path, vpr_threshold: f64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("audit.toml");
    let text = format!(
        r#"[run]
seed = 42
sample_size = 100
vpr_threshold = {vpr_threshold}

[corpus]
examples = "{examples}"
transcripts = "{transcripts}"
recorded_answers = "{answers}"

[cells]
models = ["llama-3.2-3b"]
datasets = ["arc_challenge"]

[templates]
task_type = "reasoning"
"#,
        examples = fixture("arc_demo/examples.jsonl").display(),
        transcripts = fixture("arc_demo/transcripts").display(),
        answers = fixture("arc_demo/recorded_answers.jsonl").display(),
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn run_offline_pipeline(config: &Path, run_dir: &Path) {
    for stage in OFFLINE_STAGES {
        let output = run_stage(stage, config, run_dir);
        assert_ok(&output, stage);
    }
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap_or_else(|e| panic!("read {}: {e}", dir.display()))
        .map(|entry| {
            let entry = entry.unwrap();
            assert!(
                entry.file_type().unwrap().is_file(),
                "unexpected subdirectory {}",
                entry.path().display()
            );
            (
                entry.file_name().to_string_lossy().into_owned(),
                std::fs::read(entry.path()).unwrap(),
            )
        })
        .collect()
}

// ─── offline determinism ───

#[test]
fn offline_pipeline_is_deterministic_and_byte_identical() {
    let work = tempfile::tempdir().unwrap();
    let config = demo_config(work.path(), 0.80);
    let run_a = work.path().join("run_a");
    let run_b = work.path().join("run_b");
    run_offline_pipeline(&config, &run_a);
    run_offline_pipeline(&config, &run_b);

    let report_a = dir_contents(&run_a.join("report"));
    let report_b = dir_contents(&run_b.join("report"));
    assert!(!report_a.is_empty(), "report stage wrote nothing");
    assert_eq!(
        report_a.keys().collect::<Vec<_>>(),
        report_b.keys().collect::<Vec<_>>(),
        "report file sets differ between identical runs"
    );
    for (name, bytes) in &report_a {
        assert_eq!(
            bytes, &report_b[name],
            "report file {name} differs between identical runs"
        );
    }

    assert_eq!(
        std::fs::read(run_a.join("metrics/cells.json")).unwrap(),
        std::fs::read(run_b.join("metrics/cells.json")).unwrap(),
        "cell metrics differ between identical runs"
    );
    assert_eq!(
        std::fs::read(run_a.join("spread/spread.json")).unwrap(),
        std::fs::read(run_b.join("spread/spread.json")).unwrap(),
        "spread records differ between identical runs"
    );
}

#[test]
fn rerun_with_same_config_is_a_noop() {
    let work = tempfile::tempdir().unwrap();
    let config = demo_config(work.path(), 0.80);
    let run_dir = work.path().join("run");
    run_offline_pipeline(&config, &run_dir);

    let cells_before = std::fs::read(run_dir.join("metrics/cells.json")).unwrap();
    for stage in OFFLINE_STAGES {
        let output = run_stage(stage, &config, &run_dir);
        assert_ok(&output, stage);
        let stdout = String::from_utf8_lossy(&output.stdout);
        assert!(
            stdout.contains("up to date"),
            "{stage} reran instead of skipping: {stdout}"
        );
    }
    assert_eq!(
        cells_before,
        std::fs::read(run_dir.join("metrics/cells.json")).unwrap(),
        "a no-op rerun rewrote artifacts"
    );
}

// ─── protocol isolation ───

#[test]
fn vpr_threshold_changes_only_verbal_gating() {
    let work = tempfile::tempdir().unwrap();
    let config_pass = demo_config(&work.path().join("pass"), 0.80);
    let config_gate = demo_config(&work.path().join("gate"), 0.95);
    let run_pass = work.path().join("run_pass");
    let run_gate = work.path().join("run_gate");
    for stage in ["sample", "render", "score", "repair", "metrics"] {
        assert_ok(&run_stage(stage, &config_pass, &run_pass), stage);
        assert_ok(&run_stage(stage, &config_gate, &run_gate), stage);
    }

    let load = |run_dir: &Path| -> Vec<serde_json::Value> {
        serde_json::from_slice(&std::fs::read(run_dir.join("metrics/cells.json")).unwrap())
            .unwrap()
    };
    let cells_pass = load(&run_pass);
    let cells_gate = load(&run_gate);
    assert_eq!(cells_pass.len(), 5, "demo corpus has five cells");
    assert_eq!(cells_pass.len(), cells_gate.len());

    // Every field except the verbal gate must be identical; the demo cells
    // all sit at VPR 0.90, which passes 0.80 and fails 0.95.
    let ungated = [
        "cell",
        "n_examples",
        "accuracy",
        "ece_token_raw",
        "ece_token_norm",
        "mean_token_conf_raw",
        "mean_token_conf_norm",
        "n_degenerate",
        "n_no_topk",
        "n_no_prediction",
        "vpr",
    ];
    for (cell_pass, cell_gate) in cells_pass.iter().zip(&cells_gate) {
        for field in ungated {
            assert_eq!(
                cell_pass[field], cell_gate[field],
                "{field} changed with the vpr threshold"
            );
        }
        assert_eq!(cell_pass["vpr"], serde_json::json!(0.9));
        assert!(
            cell_pass["verbal"].is_object(),
            "VPR 0.90 >= 0.80 keeps verbal metrics: {cell_pass}"
        );
        assert!(
            cell_pass["verbal_exclusion_reason"].is_null(),
            "passing cells carry no exclusion reason"
        );
        assert!(
            cell_gate["verbal"].is_null(),
            "VPR 0.90 < 0.95 gates verbal metrics: {cell_gate}"
        );
        assert!(
            cell_gate["verbal_exclusion_reason"].is_string(),
            "gated cells state why"
        );
    }
}

#[test]
fn changed_protocol_refuses_existing_artifacts() {
    let work = tempfile::tempdir().unwrap();
    let config = demo_config(work.path(), 0.80);
    let run_dir = work.path().join("run");
    for stage in ["sample", "render", "score"] {
        assert_ok(&run_stage(stage, &config, &run_dir), stage);
    }

    // Same run dir, different protocol: the stage must refuse, not mix.
    let other = demo_config(&work.path().join("other"), 0.95);
    let output = run_stage("repair", &other, &run_dir);
    assert_eq!(output.status.code(), Some(2), "protocol mix is a data error");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("mix protocols"), "stderr: {stderr}");

    // A seed override also changes the protocol hash.
    let output = run_cli(&[
        "score",
        "--config",
        config.to_str().unwrap(),
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("mix protocols"), "stderr: {stderr}");
}

// ─── exit codes ───

#[test]
fn exit_codes_classify_failures() {
    let work = tempfile::tempdir().unwrap();
    let config = demo_config(work.path(), 0.80);
    let run_dir = work.path().join("run");

    // Usage errors exit 1: unknown flag, missing config, bad enum value.
    let output = run_cli(&["sample", "--definitely-not-a-flag"]);
    assert_eq!(output.status.code(), Some(1));
    let output = run_cli(&["sample"]);
    assert_eq!(output.status.code(), Some(1));
    let output = run_cli(&[
        "report",
        "--config",
        config.to_str().unwrap(),
        "--run-dir",
        run_dir.to_str().unwrap(),
        "--format",
        "pdf",
    ]);
    assert_eq!(output.status.code(), Some(1));

    // Data errors exit 2: unreadable config, missing upstream artifacts.
    let output = run_cli(&[
        "sample",
        "--config",
        "/nonexistent/audit.toml",
        "--run-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    let output = run_stage("metrics", &config, &work.path().join("fresh"));
    assert_eq!(output.status.code(), Some(2));

    // The demo config ships no [sizes], so the panel is empty: data error.
    run_offline_pipeline(&config, &run_dir);
    let output = run_stage("panel", &config, &run_dir);
    assert_eq!(output.status.code(), Some(2));

    // Help exits 0.
    let output = run_cli(&["--help"]);
    assert_eq!(output.status.code(), Some(0));
}

// ─── live generate against a mock backend ───

fn mock_config(dir: &Path, base_url: &str, retry_limit: u32) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("audit.toml");
    let text = format!(
        r#"[run]
seed = 42
sample_size = 6

[corpus]
examples = "{examples}"

[cells]
models = ["llama-3.2-3b"]
datasets = ["arc_challenge"]

[templates]
task_type = "reasoning"

[backend]
base_url = "{base_url}"
timeout_secs = 10
max_in_flight = 4
retry_limit = {retry_limit}
"#,
        examples = fixture("arc_demo/examples.jsonl").display(),
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn generate_feeds_the_offline_stages_through_a_live_backend() {
    let server = MockServer::respond_with(|request| {
        let prompt = request["prompt"].as_str().unwrap_or("");
        if prompt.ends_with("Final answer:") {
            // Constrained re-ask issued by the repair stage.
            MockResponse::completion(" B")
        } else if prompt.contains("confidence") {
            // Verbal elicitation turn.
            MockResponse::completion(" 0.8")
        } else {
            MockResponse::completion_with_topk(
                " B. The premise pins the outcome.",
                &[(" B", -0.22), (" C", -2.3)],
            )
        }
    });
    let work = tempfile::tempdir().unwrap();
    let config = mock_config(work.path(), &server.url(), 0);
    let run_dir = work.path().join("run");
    for stage in [
        "sample", "render", "generate", "score", "repair", "metrics", "spread", "report",
    ] {
        let output = run_stage(stage, &config, &run_dir);
        assert_ok(&output, stage);
    }

    let transcripts: Vec<_> = std::fs::read_dir(run_dir.join("transcripts"))
        .unwrap()
        .collect();
    assert_eq!(transcripts.len(), 5, "one transcript file per variant");

    let cells: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(run_dir.join("metrics/cells.json")).unwrap())
            .unwrap();
    assert_eq!(cells.len(), 5);
    for cell in &cells {
        assert_eq!(cell["n_examples"], serde_json::json!(6));
        assert_eq!(cell["n_no_topk"], serde_json::json!(0));
        assert_eq!(cell["vpr"], serde_json::json!(1.0));
    }

    // Rerunning the live stage under the same protocol issues no requests.
    let before = server.request_count();
    let output = run_stage("generate", &config, &run_dir);
    assert_ok(&output, "generate rerun");
    assert!(
        String::from_utf8_lossy(&output.stdout).contains("up to date"),
        "generate reran instead of skipping"
    );
    assert_eq!(server.request_count(), before, "rerun hit the backend");
}

#[test]
fn unreachable_backend_is_a_backend_error() {
    let work = tempfile::tempdir().unwrap();
    // Nothing listens on port 9 (discard); connections are refused.
    let config = mock_config(work.path(), "http://127.0.0.1:9", 0);
    let run_dir = work.path().join("run");
    for stage in ["sample", "render"] {
        assert_ok(&run_stage(stage, &config, &run_dir), stage);
    }
    let output = run_stage("generate", &config, &run_dir);
    assert_eq!(
        output.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}
