mod common;

use std::fs;
use std::path::Path;

use common::{mownet, run_dir, stderr, stdout};
use mownet::cli::{RunManifest, MANIFEST_FILE};
use mownet::data::{load_dataset, save_dataset, Dataset, OrdinalSample};
use mownet::trainer::TrainConfig;

const SMALL: &[&str] = &["--epochs", "2", "--hidden", "6", "--weightnet-hidden", "8", "--batch-size", "8", "--alpha", "0.05", "--beta", "0.05"];

fn small_dataset(dir: &Path) -> String {
    let path = dir.join("small.ds");
    let p = path.to_str().unwrap().to_string();
    let o = mownet(dir, &["gen-data", "--out", &p, "--n-per-class", "30", "--dim", "4", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    p
}

fn train(dir: &Path, ds: &str, extra: &[&str]) -> std::process::Output {
    let mut args = vec!["train", "--dataset", ds];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    mownet(&dir.join("runs"), &args)
}

#[test]
fn gen_data_is_deterministic_and_defaults_to_1500_samples() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ds");
    let b = dir.path().join("b.ds");
    for p in [&a, &b] {
        let o = mownet(dir.path(), &["gen-data", "--seed", "7", "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.len(), 1500);
    assert_eq!(ds.dim(), 16);
    let manifest = RunManifest::read(Path::new(&format!("{}.manifest.json", a.display()))).unwrap();
    assert_eq!(manifest.command, "gen-data");
    assert_eq!(manifest.seed, 7);
}

#[test]
fn invalid_generator_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.ds");
    let o = mownet(dir.path(), &["gen-data", "--n-per-class", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--n-per-class"));
    assert!(!out.exists());
    let o = mownet(dir.path(), &["gen-data", "--score-noise=-1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--score-noise"));
    let o = mownet(dir.path(), &["train", "--dataset", "x", "--method", "svm"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mownet(dir.path(), &["train", "--dataset", "/nonexistent.ds"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn both_methods_train_and_emit_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    for method in ["ce", "mow"] {
        let o = train(dir.path(), &ds, &["--method", method]);
        assert!(o.status.success(), "{method}: {}", stderr(&o));
        let run = run_dir(&o);
        for f in ["report.txt", "report.csv", "embeddings.csv", "trace.csv", MANIFEST_FILE] {
            assert!(run.join(f).exists(), "{method}: missing {f}");
        }
        for e in 0..=2 {
            assert!(run.join(format!("ckpt_epoch_{e}.bin")).exists());
        }
        let manifest = RunManifest::read(&run.join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.mode, method);
        let cfg: TrainConfig = serde_json::from_value(manifest.config.clone()).unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.hidden_dims, vec![6]);
        let text = fs::read_to_string(run.join(MANIFEST_FILE)).unwrap();
        assert_eq!(serde_json::from_str::<RunManifest>(&text).unwrap(), manifest);
        assert!(stdout(&o).contains("Accuracy"));
        let embeddings = fs::read_to_string(run.join("embeddings.csv")).unwrap();
        // 90 samples, 20% held out
        assert_eq!(embeddings.lines().count(), 1 + 18);
        assert!(embeddings.starts_with("dim_0,dim_1,dim_2,dim_3,dim_4,dim_5,label\n"));
    }
}

#[test]
fn zero_epochs_is_a_valid_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let o = mownet(
        &dir.path().join("runs"),
        &["train", "--dataset", &ds, "--method", "mow", "--epochs", "0", "--hidden", "6"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir(&o);
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
    assert!(run.join("ckpt_epoch_0.bin").exists());
    assert!(!run.join("ckpt_epoch_1.bin").exists());
    assert!(run.join("report.csv").exists());
}

#[test]
fn oversized_k_is_a_capacity_error_naming_the_class() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = Dataset::new(2);
    for (score, n) in [(1.5, 40), (3.0, 5), (4.5, 40)] {
        for i in 0..n {
            ds.push(OrdinalSample::new(vec![i as f64, score], score).unwrap()).unwrap();
        }
    }
    let path = dir.path().join("thin.ds");
    save_dataset(&path, &ds).unwrap();
    let o = mownet(
        &dir.path().join("runs"),
        &["train", "--dataset", path.to_str().unwrap(), "--k", "10", "--epochs", "1"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("class 1 (unsure)"), "{}", stderr(&o));
}

#[test]
fn eval_reproduces_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let o = train(dir.path(), &ds, &["--method", "mow"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = run_dir(&o);
    let ckpt = run.join("ckpt_epoch_2.bin");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let e = mownet(&dir.path().join("runs"), &["eval", "--dataset", &ds, "--checkpoint", ckpt.to_str().unwrap()]);
        assert!(e.status.success(), "{}", stderr(&e));
        let edir = run_dir(&e);
        outputs.push((
            fs::read(edir.join("report.csv")).unwrap(),
            fs::read(edir.join("embeddings.csv")).unwrap(),
            fs::read(edir.join("report.txt")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].0, fs::read(run.join("report.csv")).unwrap());
    assert_eq!(outputs[0].1, fs::read(run.join("embeddings.csv")).unwrap());
    assert_eq!(outputs[0].2, fs::read(run.join("report.txt")).unwrap());
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"NOTACKPT and some bytes").unwrap();
    let o = mownet(dir.path(), &["eval", "--dataset", &ds, "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("format error"));
    let mut truncated = b"MOWCKPT1".to_vec();
    truncated.extend_from_slice(&100u32.to_le_bytes());
    fs::write(&bad, truncated).unwrap();
    let o = mownet(dir.path(), &["eval", "--dataset", &ds, "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn sweep_medians_match_individual_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let mut args = vec!["sweep-k", "--dataset", ds.as_str(), "--k", "1,2", "--seeds", "3"];
    args.extend_from_slice(SMALL);
    let o = mownet(&dir.path().join("runs"), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = run_dir(&o);
    let agg = csv_rows(&sweep.join("sweep_k.csv"));
    assert_eq!(agg.len(), 2);
    for row in &agg {
        let k: usize = row[0].parse().unwrap();
        assert_eq!(row[1], "3");
        // accuracy column, recomputed from the per-run reports
        let accs: Vec<f64> = (42..45)
            .map(|s| csv_rows(&sweep.join(format!("k{k}-seed{s}/report.csv")))[0][1].parse().unwrap())
            .collect();
        let got: f64 = row[2].parse().unwrap();
        assert_eq!(got, median(accs));
    }
    assert!(RunManifest::read(&sweep.join(MANIFEST_FILE)).is_ok());
}

#[test]
fn single_run_sweep_equals_that_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let mut args = vec!["sweep-k", "--dataset", ds.as_str(), "--k", "2", "--seeds", "1"];
    args.extend_from_slice(SMALL);
    let o = mownet(&dir.path().join("runs"), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = run_dir(&o);
    let agg = &csv_rows(&sweep.join("sweep_k.csv"))[0];
    let t = train(dir.path(), &ds, &["--method", "mow", "--k", "2"]);
    let report = &csv_rows(&run_dir(&t).join("report.csv"))[0];
    assert_eq!(agg[2..], report[1..]);
}

#[test]
fn gradcheck_passes_and_catches_an_injected_sign_flip() {
    let dir = tempfile::tempdir().unwrap();
    let ok = mownet(dir.path(), &["gradcheck", "--trials", "5"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("all 20 cases passed"));
    let bad = mownet(dir.path(), &["gradcheck", "--trials", "3", "--inject-sign-flip"]);
    assert_eq!(bad.status.code(), Some(5));
    assert!(stdout(&bad).contains("FAIL through-vs-decomposed"));
    let none = mownet(dir.path(), &["gradcheck", "--trials", "0"]);
    assert_eq!(none.status.code(), Some(0));
    assert!(stderr(&none).contains("warning"));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "epochs = 1\nbatch-size = 5\nmos = batch\nhypergrad = decomposed\n").unwrap();
    let o = mownet(
        &dir.path().join("runs"),
        &["train", "--dataset", &ds, "--config", conf.to_str().unwrap(), "--batch-size", "9", "--hidden", "4"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = RunManifest::read(&run_dir(&o).join(MANIFEST_FILE)).unwrap();
    let cfg: TrainConfig = serde_json::from_value(m.config).unwrap();
    assert_eq!(cfg.epochs, 1);
    assert_eq!(cfg.batch_size, 9);
    assert_eq!(cfg.mos_mode, mownet::trainer::MosMode::BatchShared);
    assert_eq!(cfg.hypergrad_mode, mownet::trainer::HypergradMode::Decomposed);
    assert_eq!(cfg.alpha, TrainConfig::default().alpha);

    fs::write(&conf, "learning-rate = 3\n").unwrap();
    let o = mownet(&dir.path().join("runs"), &["train", "--dataset", &ds, "--config", conf.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reruns_never_overwrite_and_honour_the_run_root() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let a = train(dir.path(), &ds, &["--method", "ce", "--crosscheck"]);
    let b = train(dir.path(), &ds, &["--method", "ce"]);
    let (ra, rb) = (run_dir(&a), run_dir(&b));
    assert_ne!(ra, rb);
    assert!(ra.starts_with(dir.path().join("runs")));
    assert_eq!(fs::read(ra.join("ckpt_epoch_2.bin")).unwrap(), fs::read(rb.join("ckpt_epoch_2.bin")).unwrap());
    let manifests = fs::read_dir(&ra).unwrap().filter(|e| e.as_ref().unwrap().file_name() == MANIFEST_FILE).count();
    assert_eq!(manifests, 1);
}

#[test]
fn crosscheck_mode_trains() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path());
    let o = train(dir.path(), &ds, &["--method", "mow", "--crosscheck", "--hypergrad", "decomposed", "--outer-opt", "adam"]);
    assert!(o.status.success(), "{}", stderr(&o));
}
