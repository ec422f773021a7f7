use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use featsharp::data::{synthetic_dataset, SyntheticSpec};
use featsharp::numerics::bilinear_resample;
use featsharp::Grid;
use featsharp_cli::config::DatasetSource;
use featsharp_cli::dataset::{grid_to_rgb, ingest_dataset, load_folder, resize_center_crop};
use featsharp_cli::pca::{pca_rgb, PcaProjection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const TINY: &str = r#"{
  "featurizer": {"kind": "smooth_conv", "patch": 2, "channels": 4, "input_resolution": 8, "seed": 3},
  "upsampler": {"kind": "featsharp", "sharpen": {"window": 3}},
  "train": {"steps": 3, "batch_size": 2, "num_jitters": 1, "eval_jitters": 1},
  "data": {"train": {"kind": "synthetic", "count": 4, "seed": 1},
           "eval": {"kind": "synthetic", "count": 2, "seed": 2}},
  "tiling_levels": [1, 2],
  "cost": {"max_x": 100, "rows": 3}
}"#;

fn featsharp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featsharp"))
        .args(args)
        .current_dir(dir)
        .env("FEATSHARP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn eval_csv_matches_golden_schema() {
    let dir = TempDir::new().unwrap();
    tiny_config(dir.path());
    ok(&featsharp(dir.path(), &["eval", "--config", "config.json", "--out", "o"]));
    let csv = std::fs::read_to_string(dir.path().join("o/metrics.csv")).unwrap();
    let keys: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    let golden = include_str!("golden/eval_metrics_keys.txt");
    assert_eq!(keys, golden.lines().collect::<Vec<_>>());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("o/metrics.json")).unwrap()).unwrap();
    assert_eq!(json["upsampler"], "featsharp");
    assert!(json["fidelity"].as_f64().unwrap().is_finite());
}

#[test]
fn train_then_eval_and_upsample_from_checkpoint() {
    let dir = TempDir::new().unwrap();
    tiny_config(dir.path());
    ok(&featsharp(dir.path(), &["train", "--config", "config.json", "--out", "t"]));
    let losses = std::fs::read_to_string(dir.path().join("t/losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 4);
    let args = ["--config", "config.json", "--checkpoint", "t/checkpoint.fskp"];
    ok(&featsharp(dir.path(), &[&["eval", "--out", "e"][..], &args].concat()));
    ok(&featsharp(dir.path(), &[&["upsample", "--out", "u"][..], &args].concat()));
    for name in ["lowres", "bilinear", "jbu", "tile", "s2", "featsharp", "comparison"] {
        assert!(dir.path().join(format!("u/{name}.png")).is_file(), "{name}.png");
    }
}

#[test]
fn upsample_pngs_are_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    tiny_config(dir.path());
    ok(&featsharp(dir.path(), &["upsample", "--config", "config.json", "--out", "a"]));
    ok(&featsharp(dir.path(), &["upsample", "--config", "config.json", "--out", "b"]));
    for name in ["lowres", "featsharp", "comparison"] {
        let a = std::fs::read(dir.path().join(format!("a/{name}.png"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("b/{name}.png"))).unwrap();
        assert_eq!(a, b, "{name}.png");
    }
}

#[test]
fn tiling_error_and_cost_write_csvs() {
    let dir = TempDir::new().unwrap();
    tiny_config(dir.path());
    ok(&featsharp(dir.path(), &["tiling-error", "--config", "config.json", "--out", "o"]));
    let t = std::fs::read_to_string(dir.path().join("o/tiling_error.csv")).unwrap();
    assert_eq!(t.lines().next(), Some("tiles_per_side,mse"));
    assert_eq!(t.lines().count(), 3);
    ok(&featsharp(dir.path(), &["cost", "--config", "config.json", "--out", "o"]));
    let c = std::fs::read_to_string(dir.path().join("o/cost.csv")).unwrap();
    assert_eq!(c.lines().nth(2), Some("2,5,5,16"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = TempDir::new().unwrap();
    tiny_config(dir.path());
    let fail = |args: &[&str]| {
        let out = featsharp(dir.path(), args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    };
    fail(&["eval", "--config", "missing.json"]);
    fail(&["eval", "--config", "config.json", "--factor", "1"]);
    fail(&["eval", "--config", "config.json", "--checkpoint", "missing.fskp"]);
    std::fs::write(dir.path().join("junk.fskp"), b"not a checkpoint").unwrap();
    fail(&["eval", "--config", "config.json", "--checkpoint", "junk.fskp"]);
    std::fs::write(dir.path().join("bad.json"), r#"{"trian": {}}"#).unwrap();
    fail(&["train", "--config", "bad.json"]);
    let out = Command::new(env!("CARGO_BIN_EXE_featsharp"))
        .arg("cost")
        .current_dir(dir.path())
        .env("FEATSHARP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn folder_with_corrupt_file_keeps_valid_images() {
    let dir = TempDir::new().unwrap();
    let img = synthetic_dataset(&SyntheticSpec { count: 3, side: 20, seed: 5 }).unwrap();
    for (i, g) in img.iter().enumerate() {
        grid_to_rgb(g).save(dir.path().join(format!("img{i}.png"))).unwrap();
    }
    std::fs::write(dir.path().join("broken.png"), b"\x89PNG truncated").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let ds = load_folder(dir.path(), 16).unwrap();
    assert_eq!(ds.images.len(), 3);
    assert_eq!(ds.skipped, vec![dir.path().join("broken.png")]);
    assert!(ds.images.iter().all(|g| g.shape() == (16, 16, 3)));
}

#[test]
fn empty_folder_is_an_error() {
    let dir = TempDir::new().unwrap();
    let src = DatasetSource::Folder { path: dir.path().to_path_buf() };
    assert!(ingest_dataset(&src, 16).is_err());
}

#[test]
fn synthetic_source_is_deterministic() {
    let src = DatasetSource::Synthetic { count: 5, seed: 11 };
    let a = ingest_dataset(&src, 24).unwrap().images;
    let b = ingest_dataset(&src, 24).unwrap().images;
    assert_eq!(a, b);
    let other = ingest_dataset(&DatasetSource::Synthetic { count: 5, seed: 12 }, 24).unwrap().images;
    assert_ne!(a, other);
}

#[test]
fn resize_center_crop_of_a_ramp_follows_pixel_centers() {
    // Horizontal ramp v = x on a 10×20 image; the shorter side goes to 5,
    // so the scale is 2 and the resized width is 10, cropped to 5 from x0 = 2.
    let img = Grid::from_fn(10, 20, 1, |_, x, _| x as f64);
    let out = resize_center_crop(&img, 5).unwrap();
    assert_eq!(out.shape(), (5, 5, 1));
    for y in 0..5 {
        for j in 0..5 {
            let src = (j + 2) as f64 * 2.0 + 0.5;
            assert!((out.get(y, j, 0) - src).abs() < 1e-12);
        }
    }
}

#[test]
fn resize_of_constant_image_is_constant() {
    let img = Grid::filled(7, 13, 3, 0.25);
    let out = resize_center_crop(&img, 4).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let same = bilinear_resample(&img, 7, 13).unwrap();
    assert_eq!(same, img);
}

#[test]
fn pca_recovers_known_axes_up_to_sign() {
    let c = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Orthonormal axes by Gram-Schmidt on random vectors.
    let mut axes: Vec<Vec<f64>> = Vec::new();
    while axes.len() < 3 {
        let mut v: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for a in &axes {
            let d: f64 = v.iter().zip(a).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(a).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        axes.push(v);
    }
    let scales = [5.0, 2.0, 0.5];
    let g = Grid::from_fn(16, 16, c, |y, x, ch| {
        // Zero-mean, mutually orthogonal sign patterns.
        let sign = |n: usize| if n % 2 == 0 { 1.0 } else { -1.0 };
        let t = [sign(x), sign(y), sign(x + y)];
        1.0 + (0..3).map(|k| scales[k] * t[k] * axes[k][ch]).sum::<f64>()
    });
    let p = PcaProjection::fit(&[&g]).unwrap();
    for (k, axis) in axes.iter().enumerate() {
        let dot: f64 = (0..c).map(|i| p.basis[(i, k)] * axis[i]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-6, "axis {k}: {dot}");
    }
}

#[test]
fn identical_maps_render_identical_png_bytes() {
    let g = Grid::from_fn(6, 6, 4, |y, x, c| ((y * 5 + x * 3 + c) % 7) as f64 * 0.1);
    let h = g.clone();
    let imgs = pca_rgb(&[&g, &h]).unwrap();
    let encode = |img: &image::RgbImage| {
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        buf.into_inner()
    };
    assert_eq!(encode(&imgs[0]), encode(&imgs[1]));
}
