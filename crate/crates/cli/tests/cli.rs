use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sclera_cli::{run, RunConfig};
use sclera_core::evalkit::MetricsReport;
use sclera_core::imgproc::{load_image, save_image, RasterImage};
use sclera_core::synthcohort::{read_manifest, RAW_SIZE};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const TINY: &str = r#"
seed = 11
counts = [6, 6, 6]
working_size = 32
branch_channels = [2, 4, 4]
embed_dim = 4
fusion_dim = 8
fusion_layers = 1
fusion_heads = 2
epochs = 2
mrfo_pop = 4
mrfo_iters = 3
k = 3
bootstrap = 50
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn sclera(args: &[&str]) -> i32 {
    run(std::iter::once("sclera").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// sha256 over every file's relative path and bytes.
fn dir_digest(root: &Path) -> String {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut files = BTreeMap::new();
    walk(root, root, &mut files);
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update(name.as_bytes());
        h.update(&bytes);
    }
    format!("{:x}", h.finalize())
}

fn count_files(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext)).count()
}

/// synth + preprocess with the tiny config; returns (tmp, config, cohort, prep).
fn prepared(extra: &str) -> (TempDir, PathBuf, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &format!("{TINY}{extra}"));
    let (cohort, prep) = (tmp.path().join("cohort"), tmp.path().join("prep"));
    assert_eq!(sclera(&["synth", "--config", path(&cfg), "--out", path(&cohort)]), 0);
    assert_eq!(sclera(&["preprocess", "--config", path(&cfg), "--input", path(&cohort), "--out", path(&prep)]), 0);
    (tmp, cfg, cohort, prep)
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    for (name, text) in [
        ("noseed.toml", "counts = [5, 5, 5]\n"),
        ("unknown.toml", "seed = 1\nlearning_rate = 0.1\n"),
        ("heads.toml", "seed = 1\nfusion_dim = 63\nfusion_heads = 4\n"),
        ("syntax.toml", "seed = \n"),
        ("k.toml", "seed = 1\nk = 2\n"),
    ] {
        let cfg = write_config(tmp.path(), name, text);
        assert_eq!(sclera(&["synth", "--config", path(&cfg), "--out", path(&out)]), 2, "{name}");
    }
    let missing = tmp.path().join("absent.toml");
    assert_eq!(sclera(&["synth", "--config", path(&missing), "--out", path(&out)]), 2);
    assert_eq!(sclera(&["synth", "--out", path(&out)]), 2);
    assert!(!out.exists());
}

#[test]
fn defaults_parse_with_only_a_seed() {
    let cfg = RunConfig::parse("seed = 3\n").unwrap();
    assert_eq!(cfg.counts, [150, 140, 155]);
    assert_eq!((cfg.k, cfg.bootstrap, cfg.epochs), (5, 1000, 60));
    assert_eq!(cfg.saliency_block(), 2);
    assert_eq!(cfg.model_config(), sclera_core::model::ModelConfig::default());
}

#[test]
fn default_synth_writes_full_cohort_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", "seed = 2024\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(sclera(&["synth", "--config", path(&cfg), "--out", path(&a)]), 0);
    assert_eq!(sclera(&["synth", "--config", path(&cfg), "--out", path(&b)]), 0);
    assert_eq!(read_manifest(&a).unwrap().records.len(), 445);
    assert_eq!(count_files(&a.join("images"), "pgm"), 2225);
    assert_eq!(dir_digest(&a), dir_digest(&b));
}

#[test]
fn unwritable_output_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY);
    let file = write_config(tmp.path(), "plain", "x");
    assert_eq!(sclera(&["synth", "--config", path(&cfg), "--out", path(&file.join("cohort"))]), 3);
    assert_eq!(sclera(&["preprocess", "--config", path(&cfg), "--input", path(&tmp.path().join("none")), "--out", path(&tmp.path().join("p"))]), 3);
}

#[test]
fn preprocess_excludes_failing_participants() {
    let (_tmp, _cfg, cohort, prep) = prepared("corrupt = [\"P0004\"]\n");
    let kept = read_manifest(&prep).unwrap();
    assert_eq!(kept.records.len(), 17);
    assert!(kept.get("P0004").is_none());
    let qc = std::fs::read_to_string(prep.join("qc_failures.csv")).unwrap();
    let rows: Vec<&str> = qc.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("P0004,straight,"));
    // every view, including the excluded participant's, is still written
    assert_eq!(count_files(&prep.join("vesselness"), "pgm"), 90);
    let v = load_image(&prep.join("vesselness/P0001_up.pgm")).unwrap();
    assert_eq!((v.width(), v.height(), v.channels()), (32, 32, 1));
    assert_eq!(read_manifest(&cohort).unwrap().records.len(), 18);
}

#[test]
fn constant_image_gives_zero_vesselness_and_qc_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY);
    let (cohort, prep) = (tmp.path().join("cohort"), tmp.path().join("prep"));
    assert_eq!(sclera(&["synth", "--config", path(&cfg), "--out", path(&cohort)]), 0);
    let flat = RasterImage::new(RAW_SIZE, RAW_SIZE, 1, vec![150; RAW_SIZE * RAW_SIZE]).unwrap();
    save_image(&flat, &cohort.join("images/P0002_left.pgm")).unwrap();
    assert_eq!(sclera(&["preprocess", "--config", path(&cfg), "--input", path(&cohort), "--out", path(&prep)]), 0);
    let v = load_image(&prep.join("vesselness/P0002_left.pgm")).unwrap();
    assert!(v.data().iter().all(|&b| b == 0));
    let qc = std::fs::read_to_string(prep.join("qc_failures.csv")).unwrap();
    assert!(qc.lines().any(|l| l.starts_with("P0002,left,")), "{qc}");
    assert!(read_manifest(&prep).unwrap().get("P0002").is_none());
}

#[test]
fn train_eval_writes_report_plots_and_is_reproducible() {
    let five = TINY.replace("k = 3\n", "k = 5\n").replace("counts = [6, 6, 6]", "counts = [10, 10, 10]");
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &five);
    let (cohort, prep) = (tmp.path().join("cohort"), tmp.path().join("prep"));
    assert_eq!(sclera(&["synth", "--config", path(&cfg), "--out", path(&cohort)]), 0);
    assert_eq!(sclera(&["preprocess", "--config", path(&cfg), "--input", path(&cohort), "--out", path(&prep)]), 0);
    let n = read_manifest(&prep).unwrap().records.len() as u64;

    let (a, b) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    assert_eq!(sclera(&["train-eval", "--config", path(&cfg), "--input", path(&prep), "--out", path(&a)]), 0);
    assert_eq!(sclera(&["train-eval", "--config", path(&cfg), "--input", path(&prep), "--out", path(&b)]), 0);
    assert_eq!(dir_digest(&a), dir_digest(&b));

    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.auc_ovr.len(), 3);
    assert_eq!(report.classification.confusion.len(), 3);
    assert_eq!(report.classification.confusion.iter().flatten().sum::<u64>(), n);
    assert_eq!(report.bootstrap_resamples, 50);

    let table = std::fs::read_to_string(a.join("fold_table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 1 + 5 + 1);
    assert!(rows[6].starts_with("mean ± SD,"));
    for f in ["roc.csv", "roc.svg", "scatter.svg", "bland_altman.csv", "bland_altman.svg", "fold_table.svg", "predictions.csv", "folds.csv"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    for i in 0..5 {
        for ext in ["ckpt", "json", "mask"] {
            assert!(a.join(format!("models/fold{i}.{ext}")).is_file());
        }
        let h = std::fs::read_to_string(a.join(format!("history/fold{i}.csv"))).unwrap();
        assert_eq!(h.lines().count(), 3);
    }
    // diagonal plus one curve per class
    let svg = std::fs::read_to_string(a.join("roc.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
}

#[test]
fn diverging_training_exits_5() {
    let (tmp, _cfg, _cohort, prep) = prepared("");
    let cfg = write_config(tmp.path(), "hot.toml", &format!("{}\nlr = 1e300\n", TINY));
    let out = tmp.path().join("run");
    assert_eq!(sclera(&["train-eval", "--config", path(&cfg), "--input", path(&prep), "--out", path(&out)]), 5);
}

#[test]
fn leakage_maps_to_exit_4() {
    let e: sclera_cli::CliError = sclera_core::model::ModelError::LeakageDetected { id: "P0001".into() }.into();
    assert_eq!(e.exit_code(), 4);
    let e: sclera_cli::CliError = sclera_core::model::ModelError::NonFiniteLoss { epoch: 3 }.into();
    assert_eq!(e.exit_code(), 5);
}

#[test]
fn ablation_emits_four_variants_on_shared_folds() {
    let (tmp, cfg, _cohort, prep) = prepared("");
    let out = tmp.path().join("abl");
    assert_eq!(sclera(&["ablate", "--config", path(&cfg), "--input", path(&prep), "--out", path(&out)]), 0);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["single_view", "multiview", "multiview_mrfo", "full"]);
    let mut digests = Vec::new();
    for r in &rows {
        let mgdl: f64 = r[1].parse().unwrap();
        let mmol: f64 = r[2].parse().unwrap();
        assert!((mmol - mgdl / 18.016).abs() < 1e-12);
        let text = std::fs::read_to_string(out.join(format!("reports/{}.json", r[0]))).unwrap();
        let rep: MetricsReport = serde_json::from_str(&text).unwrap();
        assert!((rep.regression.mae - mgdl).abs() < 1e-9);
        digests.push(rep.fold_digest);
    }
    assert!(digests.windows(2).all(|w| w[0] == w[1]));
    let svg = std::fs::read_to_string(out.join("ablation.svg")).unwrap();
    for r in &rows {
        let mmol: f64 = r[2].parse().unwrap();
        assert!(svg.contains(&format!(">{mmol:.3}<")), "bar label {mmol:.3}");
    }
}

#[test]
fn saliency_writes_ten_overlays_per_participant() {
    let (tmp, cfg, _cohort, prep) = prepared("");
    let run_dir = tmp.path().join("run");
    assert_eq!(sclera(&["train-eval", "--config", path(&cfg), "--input", path(&prep), "--out", path(&run_dir)]), 0);
    let (a, b) = (tmp.path().join("sal_a"), tmp.path().join("sal_b"));
    let common = ["--config", path(&cfg), "--input", path(&prep), "--checkpoint", path(&run_dir)];
    let args = |out: &Path| {
        let mut v = vec!["saliency"];
        v.extend(common);
        v.extend(["--participants", "P0001,P0005", "--out", path(out)].iter().copied().map(|s| -> &str { s }));
        v.iter().map(|s| s.to_string()).collect::<Vec<_>>()
    };
    let run_args = |v: Vec<String>| run(std::iter::once("sclera".to_string()).chain(v));
    assert_eq!(run_args(args(&a)), 0);
    assert_eq!(run_args(args(&b)), 0);
    assert_eq!(dir_digest(&a), dir_digest(&b));
    for id in ["P0001", "P0005"] {
        let d = a.join("saliency").join(id);
        assert_eq!(count_files(&d, "ppm"), 10);
        assert_eq!(count_files(&d, "csv"), 10);
        let img = load_image(&d.join("up_gradcampp.ppm")).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (128, 128, 3));
    }
    let bytes = std::fs::read(a.join("saliency/P0001/straight_gradcam.ppm")).unwrap();
    assert_eq!(&bytes[..2], b"P6");

    // a single checkpoint stem works too
    let stem = run_dir.join("models/fold0");
    let c = tmp.path().join("sal_c");
    let code = sclera(&["saliency", "--config", path(&cfg), "--input", path(&prep), "--checkpoint", path(&stem), "--participants", "P0002", "--out", path(&c)]);
    assert_eq!(code, 0);

    let bad = sclera(&["saliency", "--config", path(&cfg), "--input", path(&prep), "--checkpoint", path(&run_dir), "--participants", "P9999", "--out", path(&c)]);
    assert_eq!(bad, 2);
}
