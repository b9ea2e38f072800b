//! End-to-end command-line behavior: exit codes, artifacts, report rendering.

use std::path::{Path, PathBuf};

use mmp::cli::{render_eval_reports, run, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use mmp::EvalReport;

fn mmp(args: &[&str]) -> i32 {
    let mut argv = vec!["mmp"];
    argv.extend_from_slice(args);
    run(argv)
}

/// Small-but-real configuration so the smoke pipeline stays fast.
fn tiny_sets() -> Vec<String> {
    [
        "data.feature_lens=12,12,12",
        "data.latent_width=8",
        "data.classes=3",
        "data.samples=300",
        "model.tokens=3,3,3",
        "model.native_widths=8,8,8",
        "model.common_width=16",
        "model.heads=2",
        "train.epochs=2",
        "train.batch_size=50",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .collect()
}

fn run_tiny(subcmd: &[&str], out: &Path) -> i32 {
    let sets = tiny_sets();
    let mut argv: Vec<&str> = subcmd.to_vec();
    argv.extend(sets.iter().map(String::as_str));
    argv.push("--out");
    let out_str = out.to_str().unwrap();
    argv.push(out_str);
    mmp(&argv)
}

fn find_file(root: &Path, name: &str) -> Option<PathBuf> {
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).ok()?.flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|f| f == name) {
                return Some(p);
            }
        }
    }
    None
}

// ── exit codes ─────────────────────────────────────────────────────────

#[test]
fn version_and_help_exit_zero() {
    assert_eq!(mmp(&["--version"]), EXIT_OK);
    assert_eq!(mmp(&["--help"]), EXIT_OK);
    assert_eq!(mmp(&["train", "--help"]), EXIT_OK);
}

#[test]
fn unknown_flags_and_commands_exit_two() {
    assert_eq!(mmp(&["--bogus"]), EXIT_USAGE);
    assert_eq!(mmp(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(mmp(&[]), EXIT_USAGE);
    assert_eq!(mmp(&["train"]), EXIT_USAGE); // missing --data
}

#[test]
fn bad_config_values_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        mmp(&["gen-data", "--set", "data.bogus_key=1", "--out", out]),
        EXIT_USAGE
    );
    assert_eq!(
        mmp(&["gen-data", "--set", "data.samples", "--out", out]),
        EXIT_USAGE
    );
    assert_eq!(
        mmp(&["gen-data", "--set", "model.heads=3", "--out", out]),
        EXIT_USAGE // common width not divisible by heads
    );
}

#[test]
fn missing_files_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        mmp(&["train", "--data", "/nonexistent/x.mmpd", "--out", out]),
        EXIT_RUNTIME
    );
    assert_eq!(
        mmp(&["report", "/nonexistent/report.json"]),
        EXIT_RUNTIME
    );
}

// ── smoke pipeline ─────────────────────────────────────────────────────

#[test]
fn gen_train_eval_pipeline_produces_parseable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    assert_eq!(run_tiny(&["gen-data"], out), EXIT_OK);
    let data = find_file(out, "dataset.mmpd").expect("dataset written");
    assert!(find_file(out, "config.resolved").is_some());

    let data_s = data.to_str().unwrap();
    assert_eq!(run_tiny(&["train", "--data", data_s], out), EXIT_OK);
    let ckpt = find_file(out, "checkpoint.mmpc").expect("checkpoint written");
    let history = find_file(out, "history.csv").expect("history written");
    let lines: Vec<String> = std::fs::read_to_string(&history)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 3); // header + 2 epochs
    assert_eq!(lines[0], "epoch,task_loss,alignment_loss,val_accuracy");

    let ckpt_s = ckpt.to_str().unwrap();
    assert_eq!(
        run_tiny(&["eval", "--data", data_s, "--checkpoint", ckpt_s], out),
        EXIT_OK
    );
    let report_path = find_file(out, "report.json").expect("report written");
    let report = EvalReport::from_json(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.scenarios.len(), 7);
    for sc in &report.scenarios {
        assert_eq!(sc.accuracy.len(), 3);
        for acc in sc.accuracy.values() {
            assert!((0.0..=1.0).contains(acc));
        }
        assert_eq!(sc.logit_cosine.is_some(), !sc.masked.is_empty());
    }
    let csv = std::fs::read_to_string(find_file(out, "report.csv").unwrap()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "scenario,mode,seed,metric,value");

    // Rendering the written report succeeds and exits clean.
    assert_eq!(mmp(&["report", report_path.to_str().unwrap()]), EXIT_OK);
}

#[test]
fn identical_runs_write_identical_reports() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for out in [dir_a.path(), dir_b.path()] {
        assert_eq!(run_tiny(&["gen-data"], out), EXIT_OK);
        let data = find_file(out, "dataset.mmpd").unwrap();
        let data_s = data.to_str().unwrap();
        assert_eq!(run_tiny(&["train", "--data", data_s], out), EXIT_OK);
        let ckpt = find_file(out, "checkpoint.mmpc").unwrap();
        assert_eq!(
            run_tiny(
                &["eval", "--data", data_s, "--checkpoint", ckpt.to_str().unwrap()],
                out
            ),
            EXIT_OK
        );
    }
    let read = |root: &Path, name: &str| std::fs::read(find_file(root, name).unwrap()).unwrap();
    assert_eq!(read(dir_a.path(), "dataset.mmpd"), read(dir_b.path(), "dataset.mmpd"));
    assert_eq!(
        read(dir_a.path(), "checkpoint.mmpc"),
        read(dir_b.path(), "checkpoint.mmpc")
    );
    assert_eq!(read(dir_a.path(), "report.json"), read(dir_b.path(), "report.json"));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(run_tiny(&["gen-data"], out), EXIT_OK);
    let data = find_file(out, "dataset.mmpd").unwrap();
    let data_s = data.to_str().unwrap();
    assert_eq!(run_tiny(&["train", "--data", data_s], out), EXIT_OK);
    let ckpt = find_file(out, "checkpoint.mmpc").unwrap();
    let bytes = std::fs::read(&ckpt).unwrap();

    // Bad magic.
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    std::fs::write(&ckpt, &bad).unwrap();
    assert_eq!(
        run_tiny(&["eval", "--data", data_s, "--checkpoint", ckpt.to_str().unwrap()], out),
        EXIT_RUNTIME
    );

    // Truncated payload.
    std::fs::write(&ckpt, &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(
        run_tiny(&["eval", "--data", data_s, "--checkpoint", ckpt.to_str().unwrap()], out),
        EXIT_RUNTIME
    );
}

#[test]
fn mismatched_dataset_is_rejected_as_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(run_tiny(&["gen-data"], out), EXIT_OK);
    let data = find_file(out, "dataset.mmpd").unwrap();
    // Default config expects 64-wide features; the tiny dataset has 12.
    assert_eq!(
        mmp(&["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        EXIT_USAGE
    );
}

// ── report rendering ───────────────────────────────────────────────────

#[test]
fn duplicate_seed_reports_render_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(run_tiny(&["gen-data"], out), EXIT_OK);
    let data = find_file(out, "dataset.mmpd").unwrap();
    let data_s = data.to_str().unwrap();
    assert_eq!(run_tiny(&["train", "--data", data_s], out), EXIT_OK);
    let ckpt = find_file(out, "checkpoint.mmpc").unwrap();
    assert_eq!(
        run_tiny(&["eval", "--data", data_s, "--checkpoint", ckpt.to_str().unwrap()], out),
        EXIT_OK
    );
    let report =
        EvalReport::from_json(&std::fs::read_to_string(find_file(out, "report.json").unwrap()).unwrap())
            .unwrap();

    let single = render_eval_reports(std::slice::from_ref(&report));
    let doubled = render_eval_reports(&[report.clone(), report.clone()]);
    assert!(single.contains("1 seed"));
    assert!(doubled.contains("2 seeds"));
    // Same run twice: every mean carries an exactly-zero spread.
    for line in doubled.lines().skip(2).take(7) {
        assert!(line.contains("± 0"), "expected zero std in {line:?}");
    }
    assert_eq!(doubled, render_eval_reports(&[report.clone(), report]));

    // The merged CSV from `report` covers both inputs.
    let rp = find_file(out, "report.json").unwrap();
    let csv_out = out.join("merged.csv");
    assert_eq!(
        mmp(&[
            "report",
            rp.to_str().unwrap(),
            rp.to_str().unwrap(),
            "--csv",
            csv_out.to_str().unwrap(),
        ]),
        EXIT_OK
    );
    let merged = std::fs::read_to_string(&csv_out).unwrap();
    let single_rows = report_csv_rows(&rp);
    assert_eq!(merged.lines().count() - 1, 2 * single_rows);
    assert!(single.lines().count() >= 8);
}

fn report_csv_rows(report_path: &Path) -> usize {
    let report = EvalReport::from_json(&std::fs::read_to_string(report_path).unwrap()).unwrap();
    report.to_csv().lines().count() - 1
}

#[test]
fn garbage_report_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("report.json");
    std::fs::write(&p, "{\"neither\": \"kind\"}").unwrap();
    assert_eq!(mmp(&["report", p.to_str().unwrap()]), EXIT_RUNTIME);
}

// ── ablate smoke ───────────────────────────────────────────────────────

#[test]
fn ablate_writes_full_ladder_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let sets = tiny_sets();
    let mut argv: Vec<&str> = vec!["ablate", "--set", "eval.seeds=1,2,3"];
    argv.extend(sets.iter().map(String::as_str));
    argv.push("--out");
    argv.push(out.to_str().unwrap());
    assert_eq!(mmp(&argv), EXIT_OK);
    let report = mmp::AblationReport::from_json(
        &std::fs::read_to_string(find_file(out, "report.json").unwrap()).unwrap(),
    )
    .unwrap();
    assert_eq!(report.tags.len(), 4);
    assert_eq!(report.seeds, vec![1, 2, 3]);
    assert!(!report.ordering_detail.is_empty());
}
