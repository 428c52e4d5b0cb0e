use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use contbern::data::{idx_images_bytes, idx_labels_bytes, Dataset};
use contbern::numerics::RandomStream;
use contbern::vae::{self, LikelihoodKind, Vae};
use contbern_cli::RunSummary;
use ndarray::Array2;

fn run(args: &[&str], mnist: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_contbern"));
    cmd.args(args);
    if let Some(dir) = mnist {
        cmd.env(contbern_cli::MNIST_DIR_ENV, dir);
    }
    cmd.output().expect("spawn contbern")
}

fn ok(args: &[&str], mnist: Option<&Path>) -> RunSummary {
    let out = run(args, mnist);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary JSON")
}

fn fails(args: &[&str], mnist: Option<&Path>) -> String {
    let out = run(args, mnist);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    assert!(out.stdout.is_empty(), "no summary on failure");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: ") || err.starts_with("error:"), "diagnostic: {err}");
    err
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    (h, r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny labelled IDX set: 40 images of 4×4, two visually distinct classes.
fn fake_mnist(dir: &Path) -> PathBuf {
    let mut st = RandomStream::new(1);
    let values = Array2::from_shape_fn((40, 16), |(i, j)| {
        let on = if i % 2 == 0 { j < 8 } else { j >= 8 };
        let base: f64 = if on { 0.9 } else { 0.1 };
        ((base + 0.1 * st.normal()).clamp(0.0, 1.0) * 255.0).round() / 255.0
    });
    let labels: Vec<u32> = (0..40).map(|i| (i % 2) as u32).collect();
    let data = Dataset::new(values, Some(labels.clone())).unwrap().with_image_shape(4, 4).unwrap();
    std::fs::create_dir_all(dir).unwrap();
    for (img, lab) in [(contbern_cli::TRAIN_IMAGES, contbern_cli::TRAIN_LABELS), (contbern_cli::TEST_IMAGES, contbern_cli::TEST_LABELS)] {
        std::fs::write(dir.join(img), idx_images_bytes(&data)).unwrap();
        std::fs::write(dir.join(lab), idx_labels_bytes(&labels).unwrap()).unwrap();
    }
    dir.to_path_buf()
}

#[test]
fn dist_table_contents() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let summary = ok(&["dist-table", "--grid", "201", "--out", s(&out)], None);
    assert_eq!(summary.command, "dist-table");
    assert_eq!(summary.outputs, vec![out.display().to_string()]);
    let (h, rows) = csv_rows(&out);
    assert_eq!(h, ["lambda", "log_C", "mean", "variance", "entropy"]);
    assert_eq!(rows.len(), 201);
    let f = |r: &Vec<String>, i: usize| r[i].parse::<f64>().unwrap();
    let mid = &rows[100];
    assert_eq!(f(mid, 0), 0.5);
    assert!((f(mid, 1) - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(f(mid, 2), 0.5);
    assert!((f(mid, 3) - 1.0 / 12.0).abs() < 1e-15);
    assert!(f(mid, 4).abs() < 1e-15);
    for i in 0..201 {
        assert!((f(&rows[i], 1) - f(&rows[200 - i], 1)).abs() < 1e-10);
    }
    for w in rows.windows(2) {
        assert!(f(&w[1], 2) > f(&w[0], 2));
    }
    fails(&["dist-table", "--grid", "1", "--out", s(&out)], None);
}

#[test]
fn summary_goes_to_file_when_requested() {
    let dir = tempfile::tempdir().unwrap();
    let sum = dir.path().join("sum.json");
    let out = run(&["--summary", s(&sum), "dist-table", "--grid", "3", "--out", s(&dir.path().join("t.csv"))], None);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let parsed: RunSummary = serde_json::from_slice(&std::fs::read(sum).unwrap()).unwrap();
    assert_eq!(parsed.config["grid"], 3);
}

#[test]
fn em_experiment_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("em.csv");
    let summary = ok(&["em-experiment", "--ks", "1,2", "--dims", "6", "--n", "400", "--reps", "2", "--kl-samples", "500", "--out", s(&out)], None);
    let (h, rows) = csv_rows(&out);
    assert_eq!(h[..5], ["k", "rep", "variant", "kl", "kl_se"]);
    assert_eq!(rows.len(), 2 * 2 * 3);
    // At K = 1 the corrected fit is the CB fit, scored on the same draws.
    let kl = |k: &str, rep: &str, v: &str| rows.iter().find(|r| r[0] == k && r[1] == rep && r[2] == v).unwrap()[3].clone();
    assert_eq!(kl("1", "0", "cb"), kl("1", "0", "bernoulli_corrected"));
    assert!(summary.metrics["per_k"]["2"]["bernoulli"]["mean_kl"].as_f64().unwrap() > 0.0);
    fails(&["em-experiment", "--k-min", "3", "--k-max", "2", "--out", s(&out)], None);
}

#[test]
fn train_knn_sample_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = fake_mnist(&dir.path().join("mnist"));
    let run_dir = dir.path().join("run");
    let common = ["--subset", "40", "--eval-subset", "10", "--latent", "2", "--hidden", "6", "--batch", "8", "--seed", "4"];
    let mut args = vec!["train-vae", "--likelihood", "cb", "--epochs", "0", "--out-dir", s(&run_dir)];
    args.extend(common);
    let summary = ok(&args, Some(&mnist));
    assert_eq!(summary.metrics["inception_score"], "metric not implemented");
    let (h, rows) = csv_rows(&run_dir.join("metrics.csv"));
    assert_eq!(h, ["epoch", "elbo_proper", "elbo_improper", "iwll", "wall_seconds"]);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][3], "");
    let ckpt = run_dir.join("checkpoint.bin");
    let init = vae::read_checkpoint(&ckpt).unwrap();
    assert_eq!(init.data_dim(), 16);

    let mut args = vec![
        "train-vae",
        "--likelihood",
        "bernoulli",
        "--norm-const",
        "off",
        "--epochs",
        "3",
        "--iw-k",
        "4",
        "--iw-rows",
        "5",
        "--out-dir",
        s(&run_dir),
    ];
    args.extend(common);
    ok(&args, Some(&mnist));
    let (_, rows) = csv_rows(&run_dir.join("metrics.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows[3][3].parse::<f64>().unwrap().is_finite());
    let (_, cross) = csv_rows(&run_dir.join("cross_eval.csv"));
    assert_eq!(cross.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["model", "mu_inverse"]);

    let knn = dir.path().join("knn.json");
    let a = ok(&["knn-eval", "--checkpoint", s(&ckpt), "--k", "5", "--out", s(&knn)], Some(&mnist));
    let first = std::fs::read(&knn).unwrap();
    let b = ok(&["knn-eval", "--checkpoint", s(&ckpt), "--k", "5", "--out", s(&knn)], Some(&mnist));
    assert_eq!(first, std::fs::read(&knn).unwrap());
    assert_eq!(a.metrics["accuracy"], b.metrics["accuracy"]);
    let err = fails(&["knn-eval", "--checkpoint", s(&ckpt), "--k", "41", "--out", s(&knn)], Some(&mnist));
    assert!(err.contains("training size"), "{err}");

    let pgm = dir.path().join("grid.pgm");
    ok(&["sample", "--checkpoint", s(&ckpt), "--n", "3", "--mode", "draws", "--tiles", "--out", s(&pgm)], None);
    let grid = std::fs::read(&pgm).unwrap();
    assert!(grid.starts_with(b"P5\n12 4\n255\n"));
    let tile = std::fs::read(dir.path().join("grid_002.pgm")).unwrap();
    assert!(tile.starts_with(b"P5\n4 4\n255\n") && tile.len() == 11 + 16);

    fails(&["train-vae", "--likelihood", "cb", "--gamma", "0.7", "--out-dir", s(&run_dir)], Some(&mnist));
    fails(&["train-vae", "--likelihood", "cb", "--out-dir", s(&run_dir)], Some(&dir.path().join("missing")));
}

#[test]
fn gaussian_training_writes_model_row_only() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = fake_mnist(&dir.path().join("mnist"));
    let out = dir.path().join("g");
    ok(
        &[
            "train-vae",
            "--likelihood",
            "gaussian",
            "--norm-const",
            "off",
            "--epochs",
            "1",
            "--subset",
            "20",
            "--eval-subset",
            "5",
            "--latent",
            "2",
            "--hidden",
            "4",
            "--out-dir",
            s(&out),
        ],
        Some(&mnist),
    );
    let (_, cross) = csv_rows(&out.join("cross_eval.csv"));
    assert_eq!(cross.len(), 1);
    let model = vae::read_checkpoint(out.join("checkpoint.bin")).unwrap();
    assert_eq!(model.kind, LikelihoodKind::Gaussian);
    assert!(!model.include_norm_const);
}

#[test]
fn zero_decoder_samples_are_gray() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("z.bin");
    vae::write_checkpoint(&ckpt, &Vae::zeros(784, 3, 5, LikelihoodKind::Cb, true)).unwrap();
    let out = dir.path().join("z.pgm");
    ok(&["sample", "--checkpoint", s(&ckpt), "--n", "2", "--out", s(&out)], None);
    let b = std::fs::read(&out).unwrap();
    let header = b"P5\n56 28\n255\n";
    assert!(b.starts_with(header));
    assert!(b[header.len()..].iter().all(|p| *p == 128));
    fails(&["sample", "--checkpoint", s(&dir.path().join("nope.bin")), "--out", s(&out)], None);
}

#[test]
fn warp_byte_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let mnist = fake_mnist(&dir.path().join("mnist"));
    let input = mnist.join(contbern_cli::TEST_IMAGES);
    let original = std::fs::read(&input).unwrap();
    let out = dir.path().join("w.idx");
    let header = 16;
    for (gamma, check) in [
        ("0", Box::new(|b: &[u8], o: &[u8]| b == o) as Box<dyn Fn(&[u8], &[u8]) -> bool>),
        ("-0.5", Box::new(|b: &[u8], _: &[u8]| b[header..].iter().all(|p| *p == 0 || *p == 255))),
        ("0.5", Box::new(|b: &[u8], _: &[u8]| b[header..].iter().all(|p| *p == 128))),
    ] {
        ok(&["warp", "--in", s(&input), "--gamma", gamma, "--out", s(&out)], None);
        let b = std::fs::read(&out).unwrap();
        assert_eq!(b[..header], original[..header]);
        assert!(check(&b, &original), "gamma {gamma}");
    }
    fails(&["warp", "--in", s(&dir.path().join("missing")), "--gamma", "0", "--out", s(&out)], None);
    fails(&["warp", "--in", s(&input), "--gamma", "0.6", "--out", s(&out)], None);
}
