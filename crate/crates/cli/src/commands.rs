use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ndarray::Array2;
use serde_json::{json, Value};

use contbern::data::{load_idx_images, load_idx_labels, warp_dataset, write_idx_images, Dataset, WarpGamma};
use contbern::distribution::{CBParam, LAMBDA_EPS};
use contbern::estimation::{correct_with_mu_inverse, em_fit, kl_mc, knn_classify, sample_mixture, synth_mixture, EmConfig, EmVariant};
use contbern::numerics::RandomStream;
use contbern::vae::{self, LikelihoodKind, Readout, TrainConfig};

use crate::output::{num, pgm_bytes, write_file, RunSummary, Table};
use crate::{mnist_file, path_str, DistTableArgs, EmArgs, KnnArgs, SampleArgs, SampleMode, Switch, TrainArgs, WarpArgs};
use crate::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};

pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const CROSS_EVAL_CSV: &str = "cross_eval.csv";

/// Grid point `i` of `n` over `[ε, 1−ε]`, exactly symmetric about ½.
fn grid_lambda(i: usize, n: usize) -> f64 {
    let last = n - 1;
    if 2 * i == last {
        0.5
    } else if 2 * i > last {
        1.0 - grid_lambda(last - i, n)
    } else {
        LAMBDA_EPS + (1.0 - 2.0 * LAMBDA_EPS) * (i as f64 / last as f64)
    }
}

pub fn dist_table(a: &DistTableArgs) -> Result<RunSummary> {
    ensure!(a.grid >= 2, "--grid must be at least 2, got {}", a.grid);
    let mut t = Table::new(&["lambda", "log_C", "mean", "variance", "entropy"]);
    for i in 0..a.grid {
        let p = CBParam::clamped(grid_lambda(i, a.grid));
        t.push(vec![num(p.lambda()), num(p.log_norm_const()), num(p.mean()), num(p.variance()), num(p.entropy())]);
    }
    t.write(&a.out)?;
    let mut s = RunSummary::new("dist-table", json!({ "grid": a.grid, "out": path_str(&a.out) }), None);
    s.output(&a.out);
    s.metric("rows", a.grid);
    Ok(s)
}

fn k_values(a: &EmArgs) -> Result<Vec<usize>> {
    let ks = match &a.ks {
        Some(ks) => ks.clone(),
        None => {
            ensure!(a.k_min >= 1 && a.k_min <= a.k_max, "need 1 ≤ --k-min ≤ --k-max");
            (a.k_min..=a.k_max).collect()
        }
    };
    ensure!(!ks.is_empty() && ks.iter().all(|k| *k >= 1), "K values must be positive");
    Ok(ks)
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn em_experiment(a: &EmArgs) -> Result<RunSummary> {
    let ks = k_values(a)?;
    ensure!(a.reps >= 1 && a.dims >= 1 && a.n >= 1 && a.kl_samples >= 1, "sizes must be positive");
    let root = RandomStream::new(a.seed);
    let mut t = Table::new(&["k", "rep", "variant", "kl", "kl_se", "iterations", "converged"]);
    let mut per_k = serde_json::Map::new();
    for &k in &ks {
        let mut kls: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 3];
        for rep in 0..a.reps {
            let cell = root.substream(k as u64).substream(rep as u64);
            let truth = synth_mixture(k, a.dims, &mut cell.substream(0))?;
            let data = sample_mixture(&truth, a.n, &mut cell.substream(1));
            let config =
                |variant| EmConfig { max_iters: a.max_iters, loglik_tol: a.tol, variant, init_seed: cell.substream(2).seed(), restarts: a.restarts };
            let cb = em_fit(&data, k, &config(EmVariant::Cb)).with_context(|| format!("EM (cb) at K = {k}"))?;
            let bern = em_fit(&data, k, &config(EmVariant::Bernoulli)).with_context(|| format!("EM (bernoulli) at K = {k}"))?;
            let corrected = correct_with_mu_inverse(&bern.mixture);
            let fits = [(&cb.mixture, &cb), (&bern.mixture, &bern), (&corrected, &bern)];
            for (vi, (variant, (mixture, run))) in EmVariant::ALL.iter().zip(fits).enumerate() {
                // Same evaluation draws for every variant.
                let est = kl_mc(&truth, mixture, a.kl_samples, &mut cell.substream(3))?;
                kls[vi].push((est.value, est.std_error));
                t.push(vec![
                    k.to_string(),
                    rep.to_string(),
                    variant.name().into(),
                    num(est.value),
                    num(est.std_error),
                    run.iterations.to_string(),
                    run.converged.to_string(),
                ]);
            }
        }
        let mut entry = serde_json::Map::new();
        for (variant, vals) in EmVariant::ALL.iter().zip(&kls) {
            let values: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let (mean, se) = mean_and_se(&values);
            let pooled = vals.iter().map(|v| v.1 * v.1).sum::<f64>().sqrt() / vals.len() as f64;
            entry.insert(variant.name().into(), json!({ "mean_kl": mean, "se_between_reps": se, "se_mc_pooled": pooled }));
        }
        per_k.insert(k.to_string(), Value::Object(entry));
    }
    t.write(&a.out)?;
    let mut s = RunSummary::new(
        "em-experiment",
        json!({
            "ks": ks, "dims": a.dims, "n": a.n, "reps": a.reps, "kl_samples": a.kl_samples,
            "max_iters": a.max_iters, "tol": a.tol, "restarts": a.restarts, "out": path_str(&a.out),
        }),
        Some(a.seed),
    );
    s.output(&a.out);
    s.metric("per_k", Value::Object(per_k));
    Ok(s)
}

fn load_warped(path: &Path, gamma: WarpGamma, limit: usize) -> Result<Dataset> {
    let data = load_idx_images(path).with_context(|| format!("loading {}", path.display()))?;
    ensure!(!data.is_empty(), "{} holds no images", path.display());
    Ok(warp_dataset(&data.head(limit.min(data.len())), gamma))
}

fn breakdown_row(readout: &str, e: &vae::ElboBreakdown) -> Vec<String> {
    vec![readout.into(), num(e.elbo_proper()), num(e.elbo_improper()), num(e.recon), num(e.kl), num(e.log_c_sum)]
}

pub fn train_vae(a: &TrainArgs) -> Result<RunSummary> {
    let gamma = WarpGamma::new(a.gamma)?;
    ensure!(a.subset >= 1 && a.eval_subset >= 1, "--subset and --eval-subset must be positive");
    let kind: LikelihoodKind = a.likelihood.into();
    let include = a.norm_const == Switch::On;
    let train_path = mnist_file(&a.train_images, TRAIN_IMAGES);
    let test_path = mnist_file(&a.test_images, TEST_IMAGES);
    let train = load_warped(&train_path, gamma, a.subset)?;
    let test = load_warped(&test_path, gamma, a.eval_subset)?;

    let config = TrainConfig {
        latent_dim: a.latent,
        hidden: a.hidden,
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
        kind,
        include_norm_const: include,
        iw_samples: a.iw_k,
        iw_rows: a.iw_rows,
    };
    let out = vae::train(&train, &config)?;

    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let metrics_path = a.out_dir.join(METRICS_CSV);
    let ckpt_path = a.out_dir.join(CHECKPOINT);
    let cross_path = a.out_dir.join(CROSS_EVAL_CSV);

    let mut m = Table::new(&["epoch", "elbo_proper", "elbo_improper", "iwll", "wall_seconds"]);
    for r in &out.metrics {
        m.push(vec![r.epoch.to_string(), num(r.elbo_proper), num(r.elbo_improper), r.iwll.map(num).unwrap_or_default(), num(r.wall_seconds)]);
    }
    m.write(&metrics_path)?;
    vae::write_checkpoint(&ckpt_path, &out.vae).with_context(|| format!("writing {}", ckpt_path.display()))?;

    // Held-out scores with shared noise, so models trained with the same seed are paired.
    let eval = vae::eval_stream(a.seed);
    let model = vae::evaluate(&out.vae, &test, &eval, Readout::Model)?;
    let mut cross = Table::new(&["readout", "elbo_proper", "elbo_improper", "recon", "kl", "log_c_sum"]);
    cross.push(breakdown_row("model", &model));
    let corrected = if kind == LikelihoodKind::Gaussian {
        None
    } else {
        let c = vae::evaluate(&out.vae, &test, &eval, Readout::MuInverse)?;
        cross.push(breakdown_row("mu_inverse", &c));
        Some(c)
    };
    cross.write(&cross_path)?;

    let mut s = RunSummary::new(
        "train-vae",
        json!({
            "likelihood": kind.name(), "norm_const": include, "gamma": a.gamma, "epochs": a.epochs,
            "subset": train.len(), "eval_subset": test.len(), "latent": a.latent, "hidden": a.hidden,
            "batch": a.batch, "lr": a.lr, "iw_k": a.iw_k, "iw_rows": a.iw_rows,
            "train_images": path_str(&train_path), "test_images": path_str(&test_path), "out_dir": path_str(&a.out_dir),
        }),
        Some(a.seed),
    );
    for p in [&metrics_path, &ckpt_path, &cross_path] {
        s.output(p);
    }
    let last = out.metrics.last().expect("initial row");
    s.metric("train_elbo_proper", last.elbo_proper);
    s.metric("train_elbo_improper", last.elbo_improper);
    s.metric("test_elbo_proper", model.elbo_proper());
    s.metric("test_elbo_improper", model.elbo_improper());
    if let Some(c) = corrected {
        s.metric("test_elbo_proper_mu_inverse", c.elbo_proper());
    }
    s.metric("inception_score", "metric not implemented");
    Ok(s)
}

fn embed(model: &vae::Vae, data: &Dataset) -> Result<Array2<f64>> {
    model.encode_means(data.values().view()).context("checkpoint does not match the data dimension")
}

pub fn knn_eval(a: &KnnArgs) -> Result<RunSummary> {
    let gamma = WarpGamma::new(a.gamma)?;
    let model = vae::read_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let paths = [
        mnist_file(&a.train_images, TRAIN_IMAGES),
        mnist_file(&a.train_labels, TRAIN_LABELS),
        mnist_file(&a.test_images, TEST_IMAGES),
        mnist_file(&a.test_labels, TEST_LABELS),
    ];
    let load = |images: &PathBuf, labels: &PathBuf, limit: Option<usize>| -> Result<Dataset> {
        let x = load_idx_images(images).with_context(|| format!("loading {}", images.display()))?;
        let y = load_idx_labels(labels).with_context(|| format!("loading {}", labels.display()))?;
        let d = x.with_labels(y)?;
        Ok(warp_dataset(&d.head(limit.unwrap_or(d.len()).min(d.len())), gamma))
    };
    let train = load(&paths[0], &paths[1], a.train_subset)?;
    let test = load(&paths[2], &paths[3], None)?;
    ensure!(a.k >= 1 && a.k <= train.len(), "k = {} must lie in 1..={} (training size)", a.k, train.len());
    let accuracy = knn_classify(
        &embed(&model, &train)?,
        train.labels().expect("labels attached"),
        &embed(&model, &test)?,
        test.labels().expect("labels attached"),
        a.k,
    )?;
    let report = json!({
        "accuracy": accuracy, "k": a.k, "n_train": train.len(), "n_test": test.len(),
        "checkpoint": path_str(&a.checkpoint), "gamma": a.gamma,
    });
    write_file(&a.out, format!("{}\n", serde_json::to_string_pretty(&report)?).as_bytes())?;
    let mut s = RunSummary::new("knn-eval", report, None);
    s.output(&a.out);
    s.metric("accuracy", accuracy);
    Ok(s)
}

/// Tile shape for `d` pixels: 28×28 for MNIST, a square if possible, else one row.
fn tile_shape(d: usize) -> (usize, usize) {
    let side = (d as f64).sqrt().round() as usize;
    if side * side == d {
        (side, side)
    } else {
        (d, 1)
    }
}

pub fn sample(a: &SampleArgs) -> Result<RunSummary> {
    ensure!(a.n >= 1 && a.cols >= 1, "--n and --cols must be positive");
    let model = vae::read_checkpoint(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let draws = a.mode == SampleMode::Draws;
    let images = vae::decode_samples(&model, a.n, &mut RandomStream::new(a.seed), draws);
    let (w, h) = tile_shape(model.data_dim());
    let cols = a.cols.min(a.n);
    let rows = a.n.div_ceil(cols);
    let (gw, gh) = (cols * w, rows * h);
    let mut grid = vec![0.0; gw * gh];
    for (i, img) in images.rows().into_iter().enumerate() {
        let (r0, c0) = ((i / cols) * h, (i % cols) * w);
        for (p, v) in img.iter().enumerate() {
            grid[(r0 + p / w) * gw + c0 + p % w] = *v;
        }
    }
    write_file(&a.out, &pgm_bytes(gw, gh, &grid))?;
    let mut s = RunSummary::new(
        "sample",
        json!({ "checkpoint": path_str(&a.checkpoint), "n": a.n, "mode": if draws { "draws" } else { "params" }, "cols": a.cols, "tiles": a.tiles, "out": path_str(&a.out) }),
        Some(a.seed),
    );
    s.output(&a.out);
    if a.tiles {
        let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
        for (i, img) in images.rows().into_iter().enumerate() {
            let p = a.out.with_file_name(format!("{stem}_{i:03}.pgm"));
            write_file(&p, &pgm_bytes(w, h, &img.to_vec()))?;
            s.output(&p);
        }
    }
    s.metric("width", gw);
    s.metric("height", gh);
    Ok(s)
}

pub fn warp(a: &WarpArgs) -> Result<RunSummary> {
    let gamma = match WarpGamma::new(a.gamma) {
        Ok(g) => g,
        Err(e) => bail!("{e}"),
    };
    let data = load_idx_images(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let warped = warp_dataset(&data, gamma);
    write_idx_images(&a.out, &warped).with_context(|| format!("writing {}", a.out.display()))?;
    let mut s = RunSummary::new("warp", json!({ "in": path_str(&a.input), "gamma": a.gamma, "out": path_str(&a.out) }), None);
    s.output(&a.out);
    s.metric("images", warped.len());
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_symmetric_and_hits_half() {
        let n = 11;
        assert_eq!(grid_lambda(5, n), 0.5);
        assert_eq!(grid_lambda(0, n), LAMBDA_EPS);
        assert_eq!(grid_lambda(n - 1, n), 1.0 - LAMBDA_EPS);
        for i in 0..n {
            assert!((grid_lambda(i, n) + grid_lambda(n - 1 - i, n) - 1.0).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn tile_shapes() {
        assert_eq!(tile_shape(784), (28, 28));
        assert_eq!(tile_shape(6), (6, 1));
    }
}
