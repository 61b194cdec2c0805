//! Score-grouped saliency maps and the Grad-CAM comparator.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rayon::prelude::*;

use crate::scoring::UnitScoreVector;
use crate::tensor_store::TensorBundle;
use crate::{Error, Result};

/// Units grouped by score; groups are never empty.
pub fn group_units(scores: &UnitScoreVector) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, &s) in scores.scores.iter().enumerate() {
        groups.entry(s).or_default().push(k);
    }
    groups
}

/// Mean gradient of unit `k` over its `U·V` positions.
pub fn unit_weight(bundle: &TensorBundle, k: usize) -> f64 {
    let g = bundle.gradient_unit(k);
    g.iter().map(|&v| f64::from(v)).sum::<f64>() / g.len() as f64
}

/// `Σ_j w_j A_j` over the given units at feature-map resolution, with an
/// optional ReLU.
pub fn group_map(bundle: &TensorBundle, units: &[usize], apply_relu: bool) -> Result<Array2<f64>> {
    let (u, v, k) = bundle.dims();
    if units.is_empty() {
        return Err(Error::invalid("group map needs at least one unit"));
    }
    if let Some(&bad) = units.iter().find(|&&j| j >= k) {
        return Err(Error::invalid(format!("unit {bad} out of range for {k} units")));
    }
    let mut map = Array2::<f64>::zeros((u, v));
    for &j in units {
        let w = unit_weight(bundle, j);
        Zip::from(&mut map)
            .and(&bundle.activation_unit(j))
            .for_each(|m, &a| *m += w * f64::from(a));
    }
    if apply_relu {
        map.mapv_inplace(|x| x.max(0.0));
    }
    Ok(map)
}

fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four source indices (edge-clamped) and weights for every output index.
fn taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = (o as f64 + 0.5) * scale - 0.5;
            let base = x.floor();
            let frac = x - base;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for t in 0..4 {
                let i = base as i64 - 1 + t as i64;
                idx[t] = i.clamp(0, src as i64 - 1) as usize;
                w[t] = catmull_rom(frac - (t as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Separable Catmull-Rom resampling with clamped borders and half-pixel
/// centres. Same-size input is returned unchanged.
pub fn resize_bicubic(map: ArrayView2<'_, f64>, target: [usize; 2]) -> Result<Array2<f64>> {
    let (u, v) = map.dim();
    let [h, w] = target;
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("resize target {h}x{w} has a zero side")));
    }
    if u == 0 || v == 0 {
        return Err(Error::invalid("cannot resize an empty map"));
    }
    if (u, v) == (h, w) {
        return Ok(map.to_owned());
    }
    let cols = taps(v, w);
    let mut wide = Array2::<f64>::zeros((u, w));
    for (src, mut dst) in map.rows().into_iter().zip(wide.rows_mut()) {
        for (o, (idx, wt)) in cols.iter().enumerate() {
            dst[o] = (0..4).map(|t| wt[t] * src[idx[t]]).sum();
        }
    }
    let rows = taps(u, h);
    let mut out = Array2::<f64>::zeros((h, w));
    for (o, (idx, wt)) in rows.iter().enumerate() {
        let mut row = out.row_mut(o);
        for t in 0..4 {
            row.scaled_add(wt[t], &wide.row(idx[t]));
        }
    }
    Ok(out)
}

/// Min-max scaling to `[0, 1]`. A constant map becomes all ones when its
/// value is positive and all zeros otherwise.
pub fn normalize_map(map: ArrayView2<'_, f64>) -> Array2<f64> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let range = hi - lo;
    if !(range > 0.0) {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        return Array2::from_elem(map.dim(), fill);
    }
    map.mapv(|x| ((x - lo) / range).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub units: Vec<usize>,
    /// Input-resolution map before normalisation.
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMapSet {
    pub maps: BTreeMap<u32, SaliencyMap>,
    pub relu_applied: bool,
    pub selected: Option<u32>,
}

impl SaliencyMapSet {
    pub fn group_sizes(&self) -> BTreeMap<u32, usize> {
        self.maps.iter().map(|(&s, m)| (s, m.units.len())).collect()
    }

    pub fn get(&self, score: u32) -> Option<&SaliencyMap> {
        self.maps.get(&score)
    }
}

fn finish_map(raw_small: Array2<f64>, size: [usize; 2], apply_relu: bool) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut raw = resize_bicubic(raw_small.view(), size)?;
    if apply_relu {
        raw.mapv_inplace(|x| x.max(0.0));
    }
    let normalized = normalize_map(raw.view());
    Ok((raw, normalized))
}

/// One resized map per non-empty score group.
pub fn build_advise_maps(
    bundle: &TensorBundle,
    scores: &UnitScoreVector,
    apply_relu: bool,
) -> Result<SaliencyMapSet> {
    if scores.len() != bundle.units() {
        return Err(Error::invalid(format!(
            "{} scores for a bundle with {} units",
            scores.len(),
            bundle.units()
        )));
    }
    let size = bundle.info().input_size;
    let groups: Vec<(u32, Vec<usize>)> = group_units(scores).into_iter().collect();
    let maps = groups
        .into_par_iter()
        .map(|(score, units)| {
            let (raw, normalized) = finish_map(group_map(bundle, &units, apply_relu)?, size, apply_relu)?;
            Ok((score, SaliencyMap { units, raw, normalized }))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(SaliencyMapSet {
        maps,
        relu_applied: apply_relu,
        selected: None,
    })
}

/// Grad-CAM: every unit weighted by its mean gradient, ReLU, resized to the
/// input and min-max normalised. Returns `(raw, normalized)`.
pub fn gradcam_map(bundle: &TensorBundle) -> Result<(Array2<f64>, Array2<f64>)> {
    let (u, v, k) = bundle.dims();
    let n = (u * v) as f64;
    let weights: Vec<f64> = bundle
        .gradient
        .mapv(f64::from)
        .sum_axis(Axis(0))
        .sum_axis(Axis(0))
        .iter()
        .map(|&s| s / n)
        .collect();
    debug_assert_eq!(weights.len(), k);
    let mut cam = Array2::<f64>::zeros((u, v));
    for ((i, j, c), &a) in bundle.activation.indexed_iter() {
        cam[[i, j]] += weights[c] * f64::from(a);
    }
    cam.mapv_inplace(|x| x.max(0.0));
    finish_map(cam, bundle.info().input_size, true)
}

/// `I ⊙ E` per channel.
pub fn mask_image(image: ArrayView3<'_, f64>, map: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
    let (h, w, _) = image.dim();
    if map.dim() != (h, w) {
        return Err(Error::invalid(format!(
            "mask {:?} does not match image {h}x{w}",
            map.dim()
        )));
    }
    let mut out = image.to_owned();
    Zip::indexed(&mut out).for_each(|(i, j, _), x| *x *= map[[i, j]]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::BundleInfo;
    use ndarray::{arr2, Array1};

    fn bundle(act: Array3<f32>, grad: Array3<f32>, size: [usize; 2]) -> TensorBundle {
        let info = BundleInfo {
            model: "m".into(),
            layer: "l".into(),
            image: "i.png".into(),
            input_size: size,
            class_index: 0,
            class_score: 0.5,
            top5: None,
        };
        TensorBundle::new(info, act, grad, None::<Array1<f32>>).unwrap()
    }

    #[test]
    fn grouping_partitions_units() {
        let v = UnitScoreVector {
            scores: vec![0, 1, 1, 2],
            normalization: vec![],
            densities: None,
        };
        let g = group_units(&v);
        assert_eq!(g, BTreeMap::from([(0, vec![0]), (1, vec![1, 2]), (2, vec![3])]));
        let same = UnitScoreVector {
            scores: vec![3; 5],
            normalization: vec![],
            densities: None,
        };
        assert_eq!(group_units(&same), BTreeMap::from([(3, vec![0, 1, 2, 3, 4])]));
    }

    #[test]
    fn single_unit_map() {
        let b = bundle(
            Array3::from_elem((3, 3, 1), 2.0),
            Array3::from_elem((3, 3, 1), 1.0),
            [3, 3],
        );
        assert_eq!(group_map(&b, &[0], true).unwrap(), Array2::from_elem((3, 3), 2.0));
        let neg = bundle(
            Array3::from_elem((3, 3, 1), 2.0),
            Array3::from_elem((3, 3, 1), -0.5),
            [3, 3],
        );
        assert_eq!(group_map(&neg, &[0], true).unwrap(), Array2::<f64>::zeros((3, 3)));
        assert_eq!(group_map(&neg, &[0], false).unwrap(), Array2::from_elem((3, 3), -1.0));
        assert!(group_map(&neg, &[1], true).is_err());
        assert!(group_map(&neg, &[], true).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let m = arr2(&[[0.1, 0.7], [0.3, -0.2]]);
        assert_eq!(resize_bicubic(m.view(), [2, 2]).unwrap(), m);
        let c = Array2::from_elem((5, 7), 0.375);
        let r = resize_bicubic(c.view(), [33, 21]).unwrap();
        assert!(r.iter().all(|&x| (x - 0.375).abs() < 1e-12));
        assert!(resize_bicubic(c.view(), [0, 4]).is_err());
    }

    #[test]
    fn resize_matches_direct_kernel_sum() {
        let m = arr2(&[[1.0, 2.0], [3.0, 5.0]]);
        let r = resize_bicubic(m.view(), [16, 16]).unwrap();
        // direct two-dimensional evaluation with clamped taps
        let at = |oy: usize, ox: usize| {
            let sy = (oy as f64 + 0.5) / 8.0 - 0.5;
            let sx = (ox as f64 + 0.5) / 8.0 - 0.5;
            let mut acc = 0.0;
            for iy in -2i64..=3 {
                for ix in -2i64..=3 {
                    let w = catmull_rom(sy - iy as f64) * catmull_rom(sx - ix as f64);
                    acc += w * m[[iy.clamp(0, 1) as usize, ix.clamp(0, 1) as usize]];
                }
            }
            acc
        };
        for (oy, ox) in [(7, 7), (8, 8), (0, 0), (15, 3), (8, 7)] {
            assert!((r[[oy, ox]] - at(oy, ox)).abs() < 1e-12, "({oy},{ox})");
        }
        let centre = 0.25 * (r[[7, 7]] + r[[7, 8]] + r[[8, 7]] + r[[8, 8]]);
        assert!((centre - 2.75).abs() < 1e-9, "{centre}");
    }

    #[test]
    fn normalisation_cases() {
        let m = arr2(&[[-1.0, 1.0], [0.0, 3.0]]);
        assert_eq!(normalize_map(m.view()), arr2(&[[0.0, 0.5], [0.25, 1.0]]));
        assert_eq!(normalize_map(Array2::from_elem((2, 2), 4.0).view()), Array2::<f64>::ones((2, 2)));
        assert_eq!(normalize_map(Array2::<f64>::zeros((2, 2)).view()), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn masking() {
        let img = Array3::from_shape_fn((4, 5, 3), |(i, j, c)| (i + j + c) as f64 / 12.0);
        let ones = Array2::<f64>::ones((4, 5));
        assert_eq!(mask_image(img.view(), ones.view()).unwrap(), img);
        let zeros = Array2::<f64>::zeros((4, 5));
        assert_eq!(mask_image(img.view(), zeros.view()).unwrap(), Array3::<f64>::zeros((4, 5, 3)));
        let half = Array2::from_elem((4, 5), 0.5);
        assert_eq!(mask_image(img.view(), half.view()).unwrap(), img.mapv(|x| x * 0.5));
        assert!(mask_image(img.view(), Array2::<f64>::ones((5, 4)).view()).is_err());
    }

    #[test]
    fn constant_bundle_gives_constant_cam() {
        let b = bundle(
            Array3::from_elem((4, 4, 3), 1.5),
            Array3::from_elem((4, 4, 3), 0.25),
            [16, 16],
        );
        let (raw, norm) = gradcam_map(&b).unwrap();
        assert!(raw.iter().all(|&x| (x - 1.125).abs() < 1e-12));
        assert!(norm.iter().all(|&x| x == 1.0));
    }
}
