use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn crosscity(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crosscity")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = crosscity(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "channels = 4,6,8,8\npretrain_steps = 20\npretrain_lr = 1e-3\nsteps = 6\nlr = 1e-3\nbatch_size = 2\nramp_g_steps = 2\nramp_class_steps = 2\nsuperpixels = 16\n";

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn full_workflow_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let (src, tgt, pri) = (root.join("src"), root.join("tgt"), root.join("priors"));

    ok(&["synth", "--style", "source", "--count", "6", "--out", p(&src), "--width", "32", "--height", "32", "--seed", "1"]);
    ok(&["--seed", "2", "synth", "--style", "target", "--count", "5", "--eval-count", "3", "--pairs", "--out", p(&tgt), "--width", "32", "--height", "32"]);
    assert_eq!(fs::read_dir(src.join("train")).unwrap().count(), 6);
    assert_eq!(fs::read_to_string(src.join("classes.txt")).unwrap().lines().count(), 6);

    let out = ok(&["extract-prior", "--pairs", p(&tgt), "--out", p(&pri), "--k", "3", "--superpixels", "16", "--tau", "0.8", "--config", p(&cfg)]);
    assert!(out.contains("wrote 5 masks"));
    let masks: Vec<_> = fs::read_dir(&pri).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(masks.len(), 5);
    assert!(fs::read(&masks[0]).unwrap().starts_with(b"P5"));

    let pre = root.join("pre");
    ok(&["pretrain", "--config", p(&cfg), "--data", p(&src), "--out", p(&pre)]);
    assert!(fs::read_to_string(pre.join("params.txt")).unwrap().contains("features.conv0.weight"));
    assert_eq!(fs::read_to_string(pre.join("train.log")).unwrap().lines().count(), 20);

    let adapted = root.join("adapted");
    let adapt = |out: &Path| {
        ok(&["--test-mode", "--config", p(&cfg), "adapt", "--source", p(&src), "--target", p(&tgt), "--init", p(&pre), "--priors", p(&pri), "--out", p(out)])
    };
    adapt(&adapted);
    let log = fs::read_to_string(adapted.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().all(|l| l.starts_with("step=") && l.contains(" lambda_class=") && l.contains(" clamps=")));
    assert!(fs::read_to_string(adapted.join("params.txt")).unwrap().contains("disc_global."));

    let again = root.join("again");
    adapt(&again);
    assert_eq!(dir_bytes(&adapted), dir_bytes(&again));

    let report = root.join("report.txt");
    let table = ok(&["eval", "--model", p(&adapted), "--data", p(&tgt), "--out", p(&report), "--disc-source", p(&src), "--disc-target", p(&tgt)]);
    assert!(table.contains("mIoU") || table.contains("miou"));
    let acc: f64 = table.lines().find_map(|l| l.strip_prefix("disc_accuracy=")).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().last().unwrap().starts_with("miou="));

    let emb = root.join("emb.txt");
    ok(&["export-embeddings", "--model", p(&adapted), "--data", p(&src), "--domain", "source", "--out", p(&emb)]);
    let first = fs::read_to_string(&emb).unwrap().lines().next().unwrap().to_string();
    assert!(first.starts_with("source "));
    assert_eq!(first.split(' ').count(), 2 + 8);
    let pseudo = root.join("pseudo.txt");
    ok(&["export-embeddings", "--model", p(&adapted), "--data", p(&tgt), "--split", "train", "--pseudo", "--domain", "target", "--out", p(&pseudo)]);
    assert!(fs::read_to_string(&pseudo).unwrap().lines().all(|l| l.starts_with("target ")));
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--style", "target", "--count", "2", "--pairs", "--out", p(d), "--width", "32", "--height", "32", "--seed", "7"]);
    }
    let ids: Vec<_> = fs::read_dir(a.join("train")).unwrap().map(|e| e.unwrap().file_name()).collect();
    for id in ids {
        assert_eq!(dir_bytes(&a.join("train").join(&id)), dir_bytes(&b.join("train").join(&id)));
    }
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    assert_eq!(crosscity(&[]).status.code(), Some(1));
    assert_eq!(crosscity(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(crosscity(&["synth", "--style", "mars", "--count", "1", "--out", "x"]).status.code(), Some(1));
    assert_eq!(crosscity(&["eval", "--model", "m", "--data", "d", "--disc-source", "s"]).status.code(), Some(1));
    assert_eq!(crosscity(&["--help"]).status.code(), Some(0));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    assert_eq!(crosscity(&["pretrain", "--data", p(&missing), "--out", p(&tmp.path().join("o"))]).status.code(), Some(2));
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "learning_speed = 3\n").unwrap();
    let out = crosscity(&["--config", p(&bad), "synth", "--style", "source", "--count", "1", "--out", p(&tmp.path().join("s"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_speed"));
    assert_eq!(crosscity(&["--threads", "0", "synth", "--style", "source", "--count", "1", "--out", "x"]).status.code(), Some(2));

    let data = tmp.path().join("unpaired");
    ok(&["synth", "--style", "target", "--count", "1", "--out", p(&data), "--width", "32", "--height", "32"]);
    assert_eq!(crosscity(&["extract-prior", "--pairs", p(&data), "--out", p(&tmp.path().join("pr"))]).status.code(), Some(2));
}

#[test]
fn shipped_benchmark_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.cfg");
    let tmp = tempfile::tempdir().unwrap();
    ok(&["--config", p(&path), "synth", "--style", "source", "--count", "1", "--out", p(&tmp.path().join("s")), "--width", "32", "--height", "32"]);
}
