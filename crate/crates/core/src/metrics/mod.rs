//! Explanation quality metrics: CS, Hit, AD, SSIM, FSIM, MSE and the
//! penalised harmonic mean AVX.

mod fsim;

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use fsim::{fsim_luma, MIN_SIDE as FSIM_MIN_SIDE};

/// Dynamic range of 8-bit pixels.
pub const PIXEL_RANGE: f64 = 255.0;
/// Correlations inside `[-CS_BAND, CS_BAND]` are not class-discriminative.
pub const CS_BAND: f64 = 0.5;

fn same_shape<A, B>(a: &ArrayView3<'_, A>, b: &ArrayView3<'_, B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "image shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Pearson correlation of two maps; `None` when either has zero variance.
pub fn class_sensitivity(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Option<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "map shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(None);
    }
    // one square root keeps CS(a, a) at exactly 1
    Ok(Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

/// Whether the original top-1 class survives in the masked top-5.
pub fn hit(top1: usize, masked_top5: &[usize]) -> Result<bool> {
    if masked_top5.len() != 5 {
        return Err(Error::invalid(format!(
            "top-5 list has {} entries",
            masked_top5.len()
        )));
    }
    Ok(masked_top5.contains(&top1))
}

/// Relative confidence drop `max(0, y − o) / y`.
pub fn average_drop(y_c: f64, o_c: f64) -> Result<f64> {
    if !(y_c > 0.0 && y_c <= 1.0) {
        return Err(Error::invalid(format!("y_c must lie in (0, 1], got {y_c}")));
    }
    if !(0.0..=1.0).contains(&o_c) {
        return Err(Error::invalid(format!("o_c must lie in [0, 1], got {o_c}")));
    }
    Ok((y_c - o_c).max(0.0) / y_c)
}

/// Rec. 601 luma of an `[H, W, 3]` image, kept on the input's scale.
pub fn luma(image: ArrayView3<'_, f64>) -> Array2<f64> {
    image.map_axis(Axis(2), |px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
}

fn check_rgb(image: &ArrayView3<'_, f64>) -> Result<()> {
    if image.len_of(Axis(2)) != 3 {
        return Err(Error::invalid(format!(
            "expected 3 channels, got {}",
            image.len_of(Axis(2))
        )));
    }
    Ok(())
}

/// SSIM with single image-wide statistics on luma. Inputs are `[0, 1]`
/// images; statistics are taken on the 0-255 scale.
pub fn ssim_global(image: ArrayView3<'_, f64>, other: ArrayView3<'_, f64>) -> Result<f64> {
    same_shape(&image, &other)?;
    check_rgb(&image)?;
    let a = luma(image) * PIXEL_RANGE;
    let b = luma(other) * PIXEL_RANGE;
    Ok(ssim_scalar(a.view(), b.view()))
}

fn ssim_scalar(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let e1 = (0.01 * PIXEL_RANGE).powi(2);
    let e2 = (0.03 * PIXEL_RANGE).powi(2);
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + e1) * (2.0 * cov + e2)) / ((ma * ma + mb * mb + e1) * (va + vb + e2))
}

/// FSIM on luma; inputs are `[0, 1]` images.
pub fn fsim(image: ArrayView3<'_, f64>, other: ArrayView3<'_, f64>) -> Result<f64> {
    same_shape(&image, &other)?;
    check_rgb(&image)?;
    let a = luma(image) * PIXEL_RANGE;
    let b = luma(other) * PIXEL_RANGE;
    fsim_luma(a.view(), b.view())
}

/// Mean squared difference over pixels and channels of `[0, 1]` images.
pub fn mse(image: ArrayView3<'_, f64>, other: ArrayView3<'_, f64>) -> Result<f64> {
    same_shape(&image, &other)?;
    let sum: f64 = image
        .iter()
        .zip(other.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / image.len() as f64)
}

/// The four AVX inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub ad: f64,
    pub ssim: f64,
    pub fsim: f64,
    pub mse: f64,
}

impl Components {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("AD", self.ad),
            ("SSIM", self.ssim),
            ("FSIM", self.fsim),
            ("MSE", self.mse),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn scaled(self, k: f64) -> Self {
        Self {
            ad: self.ad * k,
            ssim: self.ssim * k,
            fsim: self.fsim * k,
            mse: self.mse * k,
        }
    }

    /// `4 / (1/(1−AD) + 1/SSIM + 1/FSIM + 1/(1−MSE))`, zero whenever a term
    /// is zero.
    pub fn harmonic_mean(&self) -> f64 {
        let terms = [1.0 - self.ad, self.ssim, self.fsim, 1.0 - self.mse];
        if terms.iter().any(|&t| t <= 0.0) {
            return 0.0;
        }
        4.0 / terms.iter().map(|t| 1.0 / t).sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PenaltyBranch {
    None,
    Delta { delta: f64 },
    Zeroed,
}

impl PenaltyBranch {
    pub fn label(&self) -> &'static str {
        match self {
            PenaltyBranch::None => "none",
            PenaltyBranch::Delta { .. } => "delta",
            PenaltyBranch::Zeroed => "zeroed",
        }
    }
}

/// Outcome of the penalised harmonic mean: the components that entered
/// it, the score and the branch taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Avx {
    pub value: f64,
    pub adjusted: Components,
    pub branch: PenaltyBranch,
}

/// AVX with the Hit/CS penalty. An undefined CS counts as inside the
/// non-discriminative band.
pub fn avx(components: Components, hit: bool, cs: Option<f64>, y_c: f64, o_c: f64) -> Result<Avx> {
    components.validate()?;
    for (name, v) in [("y_c", y_c), ("o_c", o_c)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} outside [0, 1]")));
        }
    }
    if let Some(c) = cs {
        if !(-1.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("CS = {c} outside [-1, 1]")));
        }
    }
    if hit {
        return Ok(Avx {
            value: components.harmonic_mean(),
            adjusted: components,
            branch: PenaltyBranch::None,
        });
    }
    let inside = cs.is_none_or(|c| (-CS_BAND..=CS_BAND).contains(&c));
    if inside {
        let delta = 1.0 - (y_c - o_c).abs();
        let adjusted = components.scaled(delta);
        Ok(Avx {
            value: adjusted.harmonic_mean(),
            adjusted,
            branch: PenaltyBranch::Delta { delta },
        })
    } else {
        Ok(Avx {
            value: 0.0,
            adjusted: Components {
                ad: 1.0,
                ssim: 0.0,
                fsim: 0.0,
                mse: 1.0,
            },
            branch: PenaltyBranch::Zeroed,
        })
    }
}

/// One evaluated explanation map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub map: String,
    pub method: String,
    pub score_group: Option<u32>,
    pub selected: bool,
    pub cs: Option<f64>,
    pub hit: u8,
    /// Components after the penalty (these enter AVX).
    pub ad: f64,
    pub ssim: f64,
    pub fsim: f64,
    pub mse: f64,
    pub avx: f64,
    pub penalty_branch: PenaltyBranch,
    /// Components as measured, before any penalty.
    pub measured: Components,
    pub y_c: f64,
    pub o_c: f64,
    /// Wall-clock time to produce the map, when recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

impl MetricRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        map: impl Into<String>,
        method: impl Into<String>,
        score_group: Option<u32>,
        measured: Components,
        hit: bool,
        cs: Option<f64>,
        y_c: f64,
        o_c: f64,
    ) -> Result<Self> {
        let a = avx(measured, hit, cs, y_c, o_c)?;
        Ok(Self {
            map: map.into(),
            method: method.into(),
            score_group,
            selected: false,
            cs,
            hit: u8::from(hit),
            ad: a.adjusted.ad,
            ssim: a.adjusted.ssim,
            fsim: a.adjusted.fsim,
            mse: a.adjusted.mse,
            avx: a.value,
            penalty_branch: a.branch,
            measured,
            y_c,
            o_c,
            seconds: None,
        })
    }
}
