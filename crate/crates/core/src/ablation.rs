//! Salt-and-pepper ablation over a density schedule, with and without the
//! ReLU on the saliency maps.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, ArrayView3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluate::{advise_explanations, csv_error, evaluate_explanations, Selection, METHOD_ADVISE};
use crate::imageio::{read_rgb, write_rgb};
use crate::numfmt::{format_f64, format_opt};
use crate::runner::{ClassTarget, ExportRequest, ModelRunner};
use crate::saliency::build_advise_maps;
use crate::scoring::{score_units, ScoringConfig};
use crate::{Error, Result};

pub const PAPER_DENSITIES: [f64; 9] = [0.025, 0.05, 0.075, 0.1, 0.125, 0.15, 0.175, 0.2, 0.225];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReluMode {
    With,
    Without,
}

impl ReluMode {
    pub fn applies_relu(self) -> bool {
        self == ReluMode::With
    }
}

impl fmt::Display for ReluMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReluMode::With => "with",
            ReluMode::Without => "without",
        })
    }
}

impl FromStr for ReluMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with" => Ok(ReluMode::With),
            "without" => Ok(ReluMode::Without),
            _ => Err(Error::invalid(format!("relu mode {s:?}: expected with or without"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub densities: Vec<f64>,
    pub seed: u64,
    pub relu_modes: Vec<ReluMode>,
    pub images: Vec<PathBuf>,
}

impl AblationPlan {
    pub fn new(images: Vec<PathBuf>, densities: Vec<f64>, seed: u64) -> Result<Self> {
        let plan = Self {
            densities,
            seed,
            relu_modes: vec![ReluMode::With, ReluMode::Without],
            images,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::invalid("ablation plan lists no images"));
        }
        if self.densities.is_empty() {
            return Err(Error::invalid("ablation plan lists no densities"));
        }
        if let Some(d) = self.densities.iter().find(|d| !(0.0..1.0).contains(*d)) {
            return Err(Error::invalid(format!("density {d} outside [0, 1)")));
        }
        if self.densities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("densities must be strictly increasing"));
        }
        if self.relu_modes.is_empty() {
            return Err(Error::invalid("ablation plan lists no ReLU modes"));
        }
        Ok(())
    }
}

/// Seed for one `(image, density)` row: SHA-256 of the plan seed, the
/// image path and the density's position in the schedule.
pub fn row_seed(seed: u64, image: &str, density_index: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((image.len() as u64).to_le_bytes());
    h.update(image.as_bytes());
    h.update((density_index as u64).to_le_bytes());
    h.finalize().into()
}

/// Replaces exactly `round(density * H * W)` distinct pixels, all channels
/// together, with black or white at equal odds.
pub fn salt_pepper(image: ArrayView3<'_, f64>, density: f64, rng: &mut impl Rng) -> Result<Array3<f64>> {
    if !(0.0..1.0).contains(&density) {
        return Err(Error::invalid(format!("density {density} outside [0, 1)")));
    }
    let (h, w, _) = image.dim();
    let count = (density * (h * w) as f64).round() as usize;
    let mut out = image.to_owned();
    for p in index::sample(rng, h * w, count) {
        let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        out.slice_mut(ndarray::s![p / w, p % w, ..]).fill(v);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub image: String,
    pub delta: f64,
    pub relu_mode: ReluMode,
    pub method: String,
    pub avx: f64,
    pub ad: f64,
    pub ssim: f64,
    pub fsim: f64,
    pub mse: f64,
    pub hit: u8,
    pub cs: Option<f64>,
}

pub const ABLATION_CSV_HEADER: [&str; 11] = [
    "image", "delta", "relu_mode", "method", "avx", "ad", "ssim", "fsim", "mse", "hit", "cs",
];

pub struct AblationSettings<'a> {
    pub scoring: &'a ScoringConfig,
    pub selection: Selection,
    pub model: String,
    pub layer: String,
    /// Scratch space for ablated images, bundles and masked images.
    pub workdir: PathBuf,
}

/// One row per image x density x ReLU mode, in that nesting order.
pub fn run_ablation(plan: &AblationPlan, runner: &dyn ModelRunner, settings: &AblationSettings<'_>) -> Result<Vec<AblationRow>> {
    plan.validate()?;
    let cells: Vec<(usize, usize)> = (0..plan.images.len())
        .flat_map(|i| (0..plan.densities.len()).map(move |d| (i, d)))
        .collect();
    let rows = cells
        .into_par_iter()
        .map(|(i, d)| {
            ablation_cell(plan, runner, settings, i, d).map_err(|e| {
                e.context(format!(
                    "ablation of {} at delta {}",
                    plan.images[i].display(),
                    plan.densities[d]
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

fn ablation_cell(
    plan: &AblationPlan,
    runner: &dyn ModelRunner,
    settings: &AblationSettings<'_>,
    image_index: usize,
    density_index: usize,
) -> Result<Vec<AblationRow>> {
    let source = &plan.images[image_index];
    let name = source.to_string_lossy().into_owned();
    let delta = plan.densities[density_index];
    let dir = settings.workdir.join(format!("image{image_index}_delta{density_index}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    // an unablated row goes through the original file untouched
    let (input_path, image) = if delta == 0.0 {
        (source.clone(), read_rgb(source)?)
    } else {
        let mut rng = ChaCha8Rng::from_seed(row_seed(plan.seed, &name, density_index));
        let ablated = salt_pepper(read_rgb(source)?.view(), delta, &mut rng)?;
        let path = dir.join("ablated.png");
        write_rgb(&path, ablated.view())?;
        (path, ablated)
    };
    let bundle = runner.export(&ExportRequest {
        image: input_path.clone(),
        model: settings.model.clone(),
        layer: settings.layer.clone(),
        class: ClassTarget::Top1,
        out: dir.join("bundle"),
    })?;
    let scores = score_units(&bundle, settings.scoring)?;
    let mut rows = Vec::with_capacity(plan.relu_modes.len());
    for &mode in &plan.relu_modes {
        let maps = build_advise_maps(&bundle, &scores, mode.applies_relu())?;
        let explanations = advise_explanations(&maps);
        let ev = evaluate_explanations(
            runner,
            &input_path,
            image.view(),
            bundle.info().class_index,
            &explanations,
            settings.selection,
            &dir.join(format!("masked_{mode}")),
        )?;
        let r = ev.headline().expect("at least one map");
        rows.push(AblationRow {
            image: name.clone(),
            delta,
            relu_mode: mode,
            method: METHOD_ADVISE.into(),
            avx: r.avx,
            ad: r.ad,
            ssim: r.ssim,
            fsim: r.fsim,
            mse: r.mse,
            hit: r.hit,
            cs: r.cs,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    out.write_record(ABLATION_CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        out.write_record([
            r.image.clone(),
            format_f64(r.delta),
            r.relu_mode.to_string(),
            r.method.clone(),
            format_f64(r.avx),
            format_f64(r.ad),
            format_f64(r.ssim),
            format_f64(r.fsim),
            format_f64(r.mse),
            r.hit.to_string(),
            format_opt(r.cs),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_image(h: usize, w: usize) -> Array3<f64> {
        Array3::from_elem((h, w, 3), 0.5)
    }

    fn changed_pixels(a: &Array3<f64>, b: &Array3<f64>) -> Vec<(usize, usize)> {
        let (h, w, _) = a.dim();
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if (0..3).any(|c| a[[i, j, c]] != b[[i, j, c]]) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn zero_density_is_identity() {
        let img = gray_image(10, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(salt_pepper(img.view(), 0.0, &mut rng).unwrap(), img);
    }

    #[test]
    fn tenth_of_100x100_changes_1000_pixels() {
        let img = gray_image(100, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = salt_pepper(img.view(), 0.1, &mut rng).unwrap();
        let changed = changed_pixels(&img, &out);
        assert_eq!(changed.len(), 1000);
        for (i, j) in changed {
            let v = out[[i, j, 0]];
            assert!(v == 0.0 || v == 1.0);
            assert!(out[[i, j, 1]] == v && out[[i, j, 2]] == v);
        }
    }

    #[test]
    fn same_seed_same_output() {
        let img = gray_image(30, 20);
        let seed = row_seed(42, "a.png", 3);
        let a = salt_pepper(img.view(), 0.2, &mut ChaCha8Rng::from_seed(seed)).unwrap();
        let b = salt_pepper(img.view(), 0.2, &mut ChaCha8Rng::from_seed(seed)).unwrap();
        assert_eq!(a, b);
        let c = salt_pepper(img.view(), 0.2, &mut ChaCha8Rng::from_seed(row_seed(42, "a.png", 4))).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn row_seeds_separate_inputs() {
        let base = row_seed(1, "x.png", 0);
        assert_ne!(base, row_seed(2, "x.png", 0));
        assert_ne!(base, row_seed(1, "y.png", 0));
        assert_ne!(base, row_seed(1, "x.png", 1));
    }

    #[test]
    fn plan_validation() {
        let imgs = vec![PathBuf::from("a.png")];
        assert!(AblationPlan::new(imgs.clone(), vec![0.1, 0.05], 0).is_err());
        assert!(AblationPlan::new(imgs.clone(), vec![0.1, 1.0], 0).is_err());
        assert!(AblationPlan::new(imgs.clone(), vec![], 0).is_err());
        assert!(AblationPlan::new(vec![], vec![0.1], 0).is_err());
        let p = AblationPlan::new(imgs, PAPER_DENSITIES.to_vec(), 0).unwrap();
        assert_eq!(p.relu_modes, [ReluMode::With, ReluMode::Without]);
    }

    #[test]
    fn relu_mode_parsing() {
        assert_eq!("with".parse::<ReluMode>().unwrap(), ReluMode::With);
        assert_eq!(ReluMode::Without.to_string(), "without");
        assert!("both".parse::<ReluMode>().is_err());
    }
}
