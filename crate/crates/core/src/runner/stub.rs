//! A small deterministic stand-in for a CNN, speaking the runner protocol
//! in-process. Each of 14x14 image cells yields 16 softplus units from the
//! cell's colour and contrast; class logits are quadratic in the units, so
//! gradients depend on the image.

use std::path::Path;

use ndarray::{Array1, Array3, Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassTarget, ExportRequest, InferRequest, InferResponse, InferResult, ModelRunner};
use crate::imageio::read_rgb;
use crate::tensor_store::{write_bundle, BundleInfo, TensorBundle};
use crate::{Error, Result};

pub const GRID: usize = 14;
pub const UNITS: usize = 16;
pub const CLASSES: usize = 20;
const FEATURES: usize = 4;
const SEED: u64 = 0x5eed_ad71_5e00_0001;
const LOGIT_SCALE: f64 = 6.0;

pub struct StubModel {
    /// `[K, F]` input weights.
    w: Vec<[f64; FEATURES]>,
    /// `[K, U, V]` positional bias.
    bias: Array3<f64>,
    /// `[C, K, U, V]` readout.
    readout: Array4<f64>,
}

impl Default for StubModel {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Forward {
    pub activation: Array3<f64>,
    pub probs: Array1<f64>,
}

impl StubModel {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let mut sym = |scale: f64| scale * (2.0 * rng.random::<f64>() - 1.0);
        let w = (0..UNITS)
            .map(|_| [sym(3.0), sym(3.0), sym(3.0), sym(6.0)])
            .collect();
        let bias = Array3::from_shape_fn((UNITS, GRID, GRID), |_| sym(1.5));
        let readout = Array4::from_shape_fn((CLASSES, UNITS, GRID, GRID), |_| sym(1.0));
        Self { w, bias, readout }
    }

    fn cell_features(image: ArrayView3<'_, f64>) -> Result<Vec<[f64; FEATURES]>> {
        let (h, w, c) = image.dim();
        if h < GRID || w < GRID || c != 3 {
            return Err(Error::invalid(format!(
                "stub model needs an RGB image of at least {GRID}x{GRID}, got {h}x{w}x{c}"
            )));
        }
        let mut out = Vec::with_capacity(GRID * GRID);
        for u in 0..GRID {
            let (r0, r1) = (u * h / GRID, (u + 1) * h / GRID);
            for v in 0..GRID {
                let (c0, c1) = (v * w / GRID, (v + 1) * w / GRID);
                let n = ((r1 - r0) * (c1 - c0)) as f64;
                let mut mean = [0.0; 3];
                let mut luma2 = 0.0;
                let mut luma1 = 0.0;
                for i in r0..r1 {
                    for j in c0..c1 {
                        for (k, m) in mean.iter_mut().enumerate() {
                            *m += image[[i, j, k]];
                        }
                        let y = 0.299 * image[[i, j, 0]] + 0.587 * image[[i, j, 1]] + 0.114 * image[[i, j, 2]];
                        luma1 += y;
                        luma2 += y * y;
                    }
                }
                let mu = luma1 / n;
                let sd = (luma2 / n - mu * mu).max(0.0).sqrt();
                out.push([mean[0] / n - 0.5, mean[1] / n - 0.5, mean[2] / n - 0.5, sd]);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, image: ArrayView3<'_, f64>) -> Result<Forward> {
        let feats = Self::cell_features(image)?;
        let activation = Array3::from_shape_fn((GRID, GRID, UNITS), |(u, v, k)| {
            let f = &feats[u * GRID + v];
            let z: f64 = self.w[k].iter().zip(f).map(|(a, b)| a * b).sum::<f64>() + self.bias[[k, u, v]];
            softplus(z)
        });
        let norm = LOGIT_SCALE / (GRID * GRID) as f64;
        let logits = Array1::from_shape_fn(CLASSES, |c| {
            let mut s = 0.0;
            for ((u, v, k), &a) in activation.indexed_iter() {
                s += self.readout[[c, k, u, v]] * a * a;
            }
            0.5 * norm * s
        });
        let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let exp = logits.mapv(|x| (x - max).exp());
        let probs = &exp / exp.sum();
        Ok(Forward { activation, probs })
    }

    /// `dy_c/dA` of the softmax output.
    pub fn gradient(&self, fwd: &Forward, class: usize) -> Array3<f64> {
        let norm = LOGIT_SCALE / (GRID * GRID) as f64;
        let y = &fwd.probs;
        Array3::from_shape_fn((GRID, GRID, UNITS), |(u, v, k)| {
            let mean_readout: f64 = (0..CLASSES).map(|j| y[j] * self.readout[[j, k, u, v]]).sum();
            y[class] * norm * fwd.activation[[u, v, k]] * (self.readout[[class, k, u, v]] - mean_readout)
        })
    }

    pub fn bundle(&self, image_path: &Path, model: &str, layer: &str, class: ClassTarget) -> Result<TensorBundle> {
        let image = read_rgb(image_path)?;
        let fwd = self.forward(image.view())?;
        let top = top_k(&fwd.probs, 5);
        let c = match class {
            ClassTarget::Top1 => top[0],
            ClassTarget::Index(i) if i < CLASSES => i,
            ClassTarget::Index(i) => {
                return Err(Error::invalid(format!("class {i} outside the stub's {CLASSES} classes")))
            }
        };
        let grad = self.gradient(&fwd, c);
        let probs32 = fwd.probs.mapv(|p| p as f32);
        let (h, w, _) = image.dim();
        let info = BundleInfo {
            model: model.to_string(),
            layer: layer.to_string(),
            image: image_path.to_string_lossy().into_owned(),
            input_size: [h, w],
            class_index: c,
            class_score: f64::from(probs32[c]),
            top5: Some(top),
        };
        TensorBundle::new(
            info,
            fwd.activation.mapv(|x| x as f32),
            grad.mapv(|x| x as f32),
            Some(probs32),
        )
    }

    pub fn infer_one(&self, id: &str, path: &Path, classes: &[usize], topk: usize) -> InferResult {
        let outcome = read_rgb(path).and_then(|img| self.forward(img.view()));
        match outcome {
            Ok(fwd) => {
                let idx = top_k(&fwd.probs, topk);
                InferResult {
                    id: id.to_string(),
                    topk_scores: idx.iter().map(|&i| fwd.probs[i]).collect(),
                    topk_indices: idx,
                    score_for_class: classes
                        .iter()
                        .filter(|&&c| c < CLASSES)
                        .map(|&c| (c.to_string(), fwd.probs[c]))
                        .collect(),
                    error: None,
                }
            }
            Err(e) => InferResult {
                id: id.to_string(),
                topk_indices: Vec::new(),
                topk_scores: Vec::new(),
                score_for_class: Default::default(),
                error: Some(e.to_string()),
            },
        }
    }

    /// Unvalidated response; per-image failures are reported inline.
    pub fn respond(&self, request: &InferRequest) -> InferResponse {
        InferResponse {
            results: request
                .images
                .iter()
                .map(|img| self.infer_one(&img.id, Path::new(&img.path), &request.classes, request.topk))
                .collect(),
        }
    }
}

impl ModelRunner for StubModel {
    fn export(&self, request: &ExportRequest) -> Result<TensorBundle> {
        let bundle = self.bundle(&request.image, &request.model, &request.layer, request.class)?;
        write_bundle(&bundle, &request.out)?;
        Ok(bundle)
    }

    fn infer(&self, request: &InferRequest) -> Result<InferResponse> {
        let response = self.respond(request);
        response.validate(request)?;
        Ok(response)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

/// Indices of the `k` largest entries, ties broken by lower index.
fn top_k(p: &Array1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::write_rgb;

    fn test_image() -> Array3<f64> {
        Array3::from_shape_fn((48, 40, 3), |(i, j, c)| {
            let x = (i as f64 / 47.0 - 0.4).powi(2) + (j as f64 / 39.0 - 0.6).powi(2);
            ((1.0 - 2.0 * x).clamp(0.0, 1.0) * [1.0, 0.6, 0.2][c] + 0.1 * ((i + j) % 3) as f64).min(1.0)
        })
    }

    #[test]
    fn probabilities_are_a_distribution() {
        let m = StubModel::new();
        let fwd = m.forward(test_image().view()).unwrap();
        assert!((fwd.probs.sum() - 1.0).abs() < 1e-12);
        assert!(fwd.activation.iter().all(|&a| a > 0.0));
        let black = Array3::zeros((16, 16, 3));
        let f2 = m.forward(black.view()).unwrap();
        assert!((f2.probs.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = StubModel::new();
        let fwd = m.forward(test_image().view()).unwrap();
        let c = 3;
        let g = m.gradient(&fwd, c);
        // perturb A directly through the logit expression
        let norm = LOGIT_SCALE / (GRID * GRID) as f64;
        let probs_of = |act: &Array3<f64>| {
            let logits = Array1::from_shape_fn(CLASSES, |cl| {
                let mut s = 0.0;
                for ((u, v, k), &a) in act.indexed_iter() {
                    s += m.readout[[cl, k, u, v]] * a * a;
                }
                0.5 * norm * s
            });
            let e = logits.mapv(f64::exp);
            &e / e.sum()
        };
        for &(u, v, k) in &[(0, 0, 0), (3, 4, 7), (6, 2, 15)] {
            let h = 1e-6;
            let mut plus = fwd.activation.clone();
            plus[[u, v, k]] += h;
            let mut minus = fwd.activation.clone();
            minus[[u, v, k]] -= h;
            let fd = (probs_of(&plus)[c] - probs_of(&minus)[c]) / (2.0 * h);
            assert!((fd - g[[u, v, k]]).abs() < 1e-7, "{fd} vs {}", g[[u, v, k]]);
        }
    }

    #[test]
    fn export_and_infer_agree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        write_rgb(&path, test_image().view()).unwrap();
        let m = StubModel::new();
        let out = dir.path().join("bundle");
        let bundle = m
            .export(&ExportRequest {
                image: path.clone(),
                model: "stub".into(),
                layer: "cells".into(),
                class: ClassTarget::Top1,
                out: out.clone(),
            })
            .unwrap();
        assert_eq!(bundle.dims(), (GRID, GRID, UNITS));
        assert_eq!(crate::tensor_store::read_bundle(&out).unwrap(), bundle);
        let req = InferRequest::new(
            vec![super::super::RequestImage {
                id: "x".into(),
                path: path.to_string_lossy().into_owned(),
            }],
            vec![bundle.info().class_index],
        );
        let resp = m.infer(&req).unwrap();
        assert_eq!(resp.results[0].top1(), bundle.info().class_index);
        assert_eq!(bundle.info().top5.as_deref(), Some(&resp.results[0].topk_indices[..]));
    }

    #[test]
    fn unreadable_image_is_reported_inline() {
        let m = StubModel::new();
        let req = InferRequest::new(
            vec![super::super::RequestImage {
                id: "missing".into(),
                path: "/nonexistent/x.png".into(),
            }],
            vec![],
        );
        let resp = m.respond(&req);
        assert!(resp.results[0].error.is_some());
        assert!(m.infer(&req).is_err());
    }
}
