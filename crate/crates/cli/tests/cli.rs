use ssvep_adapt::evalx::{parse_report_csv, PLOT_HEADER, REPORT_HEADER};
use ssvep_adapt_cli::*;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const TINY: &[&str] = &[
    "--profile", "desk",
    "--stim.num_targets", "4",
    "--synth.subjects", "3",
    "--synth.blocks", "2",
    "--synth.fs", "128",
    "--synth.duration", "0.5",
    "--segment.window", "0.5",
    "--train.epochs_stage1", "2",
    "--train.epochs_stage2", "2",
    "--train.batch_size", "8",
    "--train.pseudo_threshold", "0.3",
];

fn cli(sub: &str, out: &Path, extra: &[&str]) -> i32 {
    let mut argv: Vec<String> = vec!["ssvep-adapt".into(), sub.into(), "--out".into(), out.display().to_string()];
    argv.extend(TINY.iter().map(|s| s.to_string()));
    argv.extend(extra.iter().map(|s| s.to_string()));
    run(argv)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    out
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(cli("synth", &a, &["--seed", "4"]), EXIT_OK);
    assert_eq!(cli("synth", &b, &["--seed", "4"]), EXIT_OK);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 3 + 1);
    assert_eq!(fa, fb);
    assert!(a.join(RESOLVED_CONFIG).exists());
    let c = tmp.path().join("c");
    assert_eq!(cli("synth", &c, &["--seed", "5"]), EXIT_OK);
    assert_ne!(files(&c), fa);
}

#[test]
fn exit_codes_from_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_ssvep-adapt");
    let status = |args: &[&str]| Command::new(bin).args(args).status().unwrap().code().unwrap();
    let out = s(&tmp.path().join("o"));
    assert_eq!(status(&["synth", "--out", &out, "--train.pseudo_threshold", "1.5"]), EXIT_CONFIG);
    assert_eq!(status(&["synth", "--out", &out, "--bogus", "1"]), EXIT_CONFIG);
    assert_eq!(status(&["eval", "--out", &out, "--input", "/nonexistent/x.ssvep"]), EXIT_IO);
    let junk = tmp.path().join("junk.ssvep");
    fs::write(&junk, b"not a container at all").unwrap();
    assert_eq!(status(&["preprocess", "--out", &out, "--input", &s(&junk)]), EXIT_FORMAT);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "synth.blocks = many\n").unwrap();
    assert_eq!(status(&["synth", "--out", &out, "--config", &s(&cfg)]), EXIT_CONFIG);
    assert_eq!(status(&["--help"]), EXIT_OK);
}

#[test]
fn channel_mismatch_is_a_shape_error() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    assert_eq!(cli("synth", &raw, &["--synth.channels", "4"]), EXIT_OK);
    let out = tmp.path().join("pre");
    assert_eq!(cli("preprocess", &out, &["--input", &s(&raw)]), EXIT_SHAPE);
}

#[test]
fn full_pipeline_runs_and_leaves_inputs_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    assert_eq!(cli("synth", &d("raw"), &[]), EXIT_OK);
    let raw_before = files(&d("raw"));
    assert_eq!(cli("preprocess", &d("pre"), &["--input", &s(&d("raw"))]), EXIT_OK);
    assert_eq!(files(&d("raw")), raw_before);
    assert_eq!(cli("align", &d("ali"), &["--input", &s(&d("pre"))]), EXIT_OK);
    assert_eq!(fs::read_dir(d("ali").join("refs")).unwrap().count(), 3);

    let src = [s(&d("ali").join("S01.ssvep")), s(&d("ali").join("S02.ssvep"))];
    let tgt = s(&d("ali").join("S03.ssvep"));
    let pre_before = files(&d("ali"));
    assert_eq!(cli("pretrain", &d("pt"), &["--source", &src[0], "--source", &src[1], "--target", &tgt]), EXIT_OK);
    let log = fs::read_to_string(d("pt").join("pretrain_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,cls_loss,adv_loss,total_loss"));
    assert_eq!(log.lines().count(), 1 + 2);

    let ckpt = s(&d("pt").join("checkpoint.ssvep"));
    assert_eq!(cli("adapt", &d("ad"), &["--checkpoint", &ckpt, "--target", &tgt]), EXIT_OK);
    let log = fs::read_to_string(d("ad").join("pseudo_labels.csv")).unwrap();
    assert!(log.starts_with("epoch,cls_loss,con_loss,total_loss,accepted,accept_rate,pseudo_accuracy\n"));
    assert_eq!(log.lines().count(), 1 + 2);
    assert!(d("ad").join("teacher.ssvep").exists());

    let student = s(&d("ad").join("student.ssvep"));
    assert_eq!(cli("eval", &d("ev"), &["--checkpoint", &student, "--target", &tgt]), EXIT_OK);
    let report = fs::read_to_string(d("ev").join("report.csv")).unwrap();
    assert!(report.starts_with(REPORT_HEADER));
    assert!(report.lines().nth(1).unwrap().starts_with("checkpoint,S03,0.5,"));
    assert_eq!(files(&d("ali")), pre_before);

    assert_eq!(cli("report", &d("rep"), &["--input", &s(&d("ev").join("report.csv"))]), EXIT_OK);
    let plot = fs::read_to_string(d("rep").join("plot_data.csv")).unwrap();
    assert_eq!(plot.lines().next(), Some(PLOT_HEADER));
    assert_eq!(plot.lines().count(), 1 + 2);
}

#[test]
fn fbcca_scores_clean_data_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    let clean = ["--synth.noise_sigma", "0", "--synth.latency_jitter", "0"];
    assert_eq!(cli("synth", &d("raw"), &clean), EXIT_OK);
    assert_eq!(cli("preprocess", &d("pre"), &["--input", &s(&d("raw"))]), EXIT_OK);
    assert_eq!(cli("eval", &d("ev"), &["--input", &s(&d("pre")), "--eval.pipeline", "fbcca"]), EXIT_OK);
    let agg = parse_report_csv(&fs::read_to_string(d("ev").join("report.csv")).unwrap()).unwrap();
    assert_eq!(agg.len(), 1);
    assert_eq!(agg[0].mean_accuracy, 1.0);
}

#[test]
fn component_ablation_has_six_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    assert_eq!(cli("synth", &d("raw"), &[]), EXIT_OK);
    assert_eq!(cli("preprocess", &d("pre"), &["--input", &s(&d("raw"))]), EXIT_OK);
    let args = ["--input", &s(&d("pre")), "--grid", "components", "--train.epochs_stage1", "1", "--train.epochs_stage2", "1"];
    assert_eq!(cli("ablate", &d("ab"), &args), EXIT_OK);
    assert!(!d("ab").join("ablation_alignment.csv").exists());
    let csv = fs::read_to_string(d("ab").join("ablation_components.csv")).unwrap();
    let agg = parse_report_csv(&csv).unwrap();
    assert_eq!(agg.len(), 6);
    assert_eq!(csv.lines().count(), 1 + 6 * (3 + 2));
}

#[test]
fn resolved_config_reloads_to_the_same_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    assert_eq!(cli("synth", &a, &["--seed", "11"]), EXIT_OK);
    let dumped = fs::read_to_string(a.join(RESOLVED_CONFIG)).unwrap();
    assert!(dumped.contains("seed = 11"));
    let b = tmp.path().join("b");
    let argv = ["ssvep-adapt", "synth", "--out", &s(&b), "--config", &s(&a.join(RESOLVED_CONFIG))];
    assert_eq!(run(argv), EXIT_OK);
    assert_eq!(fs::read_to_string(b.join(RESOLVED_CONFIG)).unwrap(), dumped);
    assert_eq!(files(&a), files(&b));
}
