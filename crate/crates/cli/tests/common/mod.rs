#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advise_core::imageio::{read_rgb, write_rgb};
use advise_core::runner::stub::StubModel;
use advise_core::tensor_store::{write_bundle, BundleInfo, TensorBundle};
use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn advise_bin() -> &'static str {
    env!("CARGO_BIN_EXE_advise")
}

pub fn stub_bin() -> &'static str {
    env!("CARGO_BIN_EXE_advise-stub-runner")
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run_in(dir: &Path, bin: &str, args: &[&str]) -> Run {
    let out: Output = Command::new(bin)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn advise(dir: &Path, args: &[&str]) -> Run {
    run_in(dir, advise_bin(), args)
}

pub fn advise_ok(dir: &Path, args: &[&str]) -> Run {
    let r = advise(dir, args);
    assert_eq!(r.code, 0, "advise {args:?} failed:\n{}", r.stderr);
    r
}

/// A smooth colour scene with a bright disc; `variant` shifts the disc.
pub fn scene(h: usize, w: usize, variant: usize) -> Array3<f64> {
    let cy = h as f64 * (0.35 + 0.1 * (variant % 3) as f64);
    let cx = w as f64 * (0.4 + 0.15 * (variant % 2) as f64);
    Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
        let (y, x) = (i as f64, j as f64);
        let disc = if (y - cy).powi(2) + (x - cx).powi(2) < (h as f64 * 0.2).powi(2) { 0.7 } else { 0.0 };
        let base = match c {
            0 => 0.5 + 0.4 * (x / 5.0).sin(),
            1 => 0.5 + 0.4 * (y / 7.0).cos(),
            _ => 0.1,
        };
        (0.6 * base + disc).clamp(0.0, 1.0)
    })
}

/// Writes a scene PNG and returns its 8-bit round-tripped pixels.
pub fn write_scene(path: &Path, h: usize, w: usize, variant: usize) -> Array3<f64> {
    write_rgb(path, scene(h, w, variant).view()).unwrap();
    read_rgb(path).unwrap()
}

pub fn stub_top1(image: &Path) -> usize {
    let img = read_rgb(image).unwrap();
    let fwd = StubModel::new().forward(img.view()).unwrap();
    fwd.probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .unwrap()
        .0
}

/// `n` mid-quantile points of a logistic bump centred at `centre`.
fn bump(centre: f64, scale: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let p = (i as f64 + 0.5) / n as f64;
            centre + scale * (p / (1.0 - p)).ln()
        })
        .collect()
}

/// Gradient values for one unit with `modes` equal, well-separated bumps.
/// `modes == 0` gives a constant slice.
pub fn mode_values(modes: usize, n: usize) -> Vec<f64> {
    if modes == 0 {
        return vec![0.25; n];
    }
    let mut out = Vec::with_capacity(n);
    for m in 0..modes {
        let centre = (m as f64 + 0.5) / modes as f64;
        let count = n / modes + usize::from(m < n % modes);
        out.extend(bump(centre, 0.012, count));
    }
    out
}

/// A bundle whose unit `k` has `modes[k]` gradient clusters, scattered over
/// the spatial grid. Activations of each unit are a blob at a unit-specific
/// position so the score-group maps differ.
pub fn synthetic_bundle(modes: &[usize], grid: usize, size: [usize; 2], class_index: usize, seed: u64) -> TensorBundle {
    let k = modes.len();
    let n = grid * grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grad = Array3::<f32>::zeros((grid, grid, k));
    let mut act = Array3::<f32>::zeros((grid, grid, k));
    for (unit, &m) in modes.iter().enumerate() {
        let mut vals = mode_values(m, n);
        vals.shuffle(&mut rng);
        for (idx, v) in vals.into_iter().enumerate() {
            grad[[idx / grid, idx % grid, unit]] = (0.05 + 0.1 * v) as f32;
        }
        let cy = (m as f64 * 0.29 + 0.13 * unit as f64).fract() * grid as f64;
        let cx = (m as f64 * 0.41 + 0.07 * unit as f64).fract() * grid as f64;
        for i in 0..grid {
            for j in 0..grid {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                act[[i, j, unit]] = (2.0 * (-d2 / (0.08 * (grid * grid) as f64)).exp()) as f32;
            }
        }
    }
    let info = BundleInfo {
        model: "synthetic".into(),
        layer: "fixture".into(),
        image: "scene.png".into(),
        input_size: size,
        class_index,
        class_score: 0.5,
        top5: None,
    };
    let mut logits = Array1::from_elem(20, 0.5 / 19.0);
    logits[class_index] = 0.5;
    TensorBundle::new(info, act, grad, Some(logits.mapv(|x| x as f32))).unwrap()
}

pub fn write_synthetic(dir: &Path, modes: &[usize], size: [usize; 2], class_index: usize) -> PathBuf {
    let b = synthetic_bundle(modes, 16, size, class_index, 11);
    write_bundle(&b, dir).unwrap();
    dir.to_path_buf()
}

pub fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

pub fn read_str(path: impl AsRef<Path>) -> String {
    String::from_utf8(read(path)).unwrap()
}
