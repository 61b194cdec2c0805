//! Runs the metric protocol for a set of explanation maps of one image.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::imageio::write_rgb;
use crate::metrics::{self, Components, MetricRecord};
use crate::numfmt::{format_f64, format_opt};
use crate::runner::{InferRequest, ModelRunner, RequestImage};
use crate::saliency::{mask_image, resize_bicubic, SaliencyMapSet};
use crate::{Error, Result};

pub const METHOD_ADVISE: &str = "advise";
pub const METHOD_GRADCAM: &str = "gradcam";
pub const METHOD_IDENTITY: &str = "identity";

/// Which ADVISE map becomes the headline record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    BestAvx,
    Score(u32),
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::BestAvx => f.write_str("best-avx"),
            Selection::Score(s) => write!(f, "score:{s}"),
        }
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "best-avx" {
            return Ok(Selection::BestAvx);
        }
        s.strip_prefix("score:")
            .and_then(|v| v.parse().ok())
            .map(Selection::Score)
            .ok_or_else(|| Error::invalid(format!("selection {s:?}: expected best-avx or score:<n>")))
    }
}

/// One map to evaluate, already min-max normalised.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub id: String,
    pub method: String,
    pub score_group: Option<u32>,
    pub map: Array2<f64>,
    /// The matching map for the second-ranked class, used for CS.
    pub counterpart: Option<Array2<f64>>,
}

/// Score group of the second-class map paired with group `g`: the same
/// group if present, else the nearest one, ties going to the lower.
pub fn counterpart_group<I: IntoIterator<Item = u32>>(groups: I, g: u32) -> Option<u32> {
    groups
        .into_iter()
        .min_by_key(|&c| (c.abs_diff(g), c))
}

/// Pairs every map with its counterpart from the second class's maps.
pub fn attach_counterparts(explanations: &mut [Explanation], second: &BTreeMap<u32, Array2<f64>>) {
    for e in explanations.iter_mut() {
        if let Some(g) = e.score_group {
            e.counterpart = counterpart_group(second.keys().copied(), g).map(|c| second[&c].clone());
        }
    }
}

/// One explanation per map of the set, ids `score_<group>`.
pub fn advise_explanations(maps: &SaliencyMapSet) -> Vec<Explanation> {
    maps.maps
        .iter()
        .map(|(&g, m)| Explanation {
            id: format!("score_{g}"),
            method: METHOD_ADVISE.into(),
            score_group: Some(g),
            map: m.normalized.clone(),
            counterpart: None,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub records: Vec<MetricRecord>,
    pub selected: Option<usize>,
    pub class_index: usize,
    /// Top-1 of the unmasked image as reported by the runner.
    pub unmasked_top1: usize,
}

impl Evaluation {
    pub fn headline(&self) -> Option<&MetricRecord> {
        self.selected.map(|i| &self.records[i])
    }
}

fn fit_map(map: &Array2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
    if map.dim() == (h, w) {
        return Ok(map.clone());
    }
    Ok(resize_bicubic(map.view(), [h, w])?.mapv(|x| x.clamp(0.0, 1.0)))
}

/// Masks the image with every map, queries the runner once for the
/// original and all masked images, and scores each map. Masked images are
/// written as PNG under `workdir`.
pub fn evaluate_explanations(
    runner: &dyn ModelRunner,
    image_path: &Path,
    image: ArrayView3<'_, f64>,
    class_index: usize,
    explanations: &[Explanation],
    selection: Selection,
    workdir: &Path,
) -> Result<Evaluation> {
    if explanations.is_empty() {
        return Err(Error::invalid("no explanation maps to evaluate"));
    }
    let (h, w, _) = image.dim();
    std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let mut masked = Vec::with_capacity(explanations.len());
    let mut images = vec![RequestImage {
        id: "original".into(),
        path: image_path.to_string_lossy().into_owned(),
    }];
    for e in explanations {
        let map = fit_map(&e.map, h, w)?;
        let m = mask_image(image, map.view())?;
        let path: PathBuf = workdir.join(format!("masked_{}.png", e.id));
        write_rgb(&path, m.view())?;
        images.push(RequestImage {
            id: e.id.clone(),
            path: path.to_string_lossy().into_owned(),
        });
        masked.push((map, m));
    }
    let response = runner.infer(&InferRequest::new(images, vec![class_index]))?;
    let original = response.get("original").expect("validated response");
    let y_c = original.score(class_index).expect("validated response");
    if original.top1() != class_index {
        log::warn!(
            "runner top-1 on the unmasked image is {}, explained class is {class_index}",
            original.top1()
        );
    }
    if !(y_c > 0.0) {
        return Err(Error::Runner(format!("score of class {class_index} on the unmasked image is 0")));
    }
    let mut records = Vec::with_capacity(explanations.len());
    for (e, (map, m)) in explanations.iter().zip(&masked) {
        let result = response.get(&e.id).expect("validated response");
        let o_c = result.score(class_index).expect("validated response");
        let hit = metrics::hit(class_index, &result.topk_indices)?;
        let ssim = metrics::ssim_global(image, m.view())?;
        if ssim < 0.0 {
            log::warn!("map {}: SSIM {ssim} below 0 clamped to 0", e.id);
        }
        let measured = Components {
            ad: metrics::average_drop(y_c, o_c)?,
            ssim: ssim.clamp(0.0, 1.0),
            fsim: metrics::fsim(image, m.view())?.clamp(0.0, 1.0),
            mse: metrics::mse(image, m.view())?,
        };
        let cs = match &e.counterpart {
            Some(other) => metrics::class_sensitivity(map.view(), fit_map(other, h, w)?.view())?,
            None => None,
        };
        if cs.is_none() && !hit {
            log::info!("map {}: CS undefined, missed top-5, delta penalty applied", e.id);
        }
        records.push(MetricRecord::new(
            e.id.clone(),
            e.method.clone(),
            e.score_group,
            measured,
            hit,
            cs,
            y_c,
            o_c,
        )?);
    }
    let selected = select(&records, selection)?;
    if let Some(i) = selected {
        records[i].selected = true;
    }
    Ok(Evaluation {
        records,
        selected,
        class_index,
        unmasked_top1: original.top1(),
    })
}

/// Index of the headline record. ADVISE maps are preferred; with none
/// present the best record of any method is taken.
pub fn select(records: &[MetricRecord], selection: Selection) -> Result<Option<usize>> {
    let advise: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].method == METHOD_ADVISE)
        .collect();
    let pool: Vec<usize> = if advise.is_empty() {
        (0..records.len()).collect()
    } else {
        advise
    };
    match selection {
        Selection::BestAvx => Ok(pool
            .into_iter()
            .reduce(|best, i| if records[i].avx > records[best].avx { i } else { best })),
        Selection::Score(s) => pool
            .into_iter()
            .find(|&i| records[i].score_group == Some(s))
            .map(Some)
            .ok_or_else(|| Error::invalid(format!("--select score:{s}: no map for score group {s}"))),
    }
}

pub const METRICS_CSV_HEADER: [&str; 16] = [
    "map",
    "method",
    "score_group",
    "selected",
    "cs",
    "hit",
    "ad",
    "ssim",
    "fsim",
    "mse",
    "avx",
    "penalty_branch",
    "delta",
    "y_c",
    "o_c",
    "peak_range",
];

/// Flat table of the records, with a `seconds` column when any record
/// carries a timing.
pub fn write_metrics_csv(path: &Path, records: &[MetricRecord], peak_range: Option<[u32; 2]>) -> Result<()> {
    let timed = records.iter().any(|r| r.seconds.is_some());
    let mut out = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<&str> = METRICS_CSV_HEADER.to_vec();
    if timed {
        header.push("seconds");
    }
    out.write_record(&header).map_err(|e| csv_error(path, e))?;
    let range = peak_range.map_or_else(String::new, |[lo, hi]| format!("{lo}-{hi}"));
    for r in records {
        let delta = match r.penalty_branch {
            metrics::PenaltyBranch::Delta { delta } => format_f64(delta),
            _ => String::new(),
        };
        let mut row = vec![
            r.map.clone(),
            r.method.clone(),
            r.score_group.map_or_else(String::new, |g| g.to_string()),
            u8::from(r.selected).to_string(),
            format_opt(r.cs),
            r.hit.to_string(),
            format_f64(r.ad),
            format_f64(r.ssim),
            format_f64(r.fsim),
            format_f64(r.mse),
            format_f64(r.avx),
            r.penalty_branch.label().to_string(),
            delta,
            format_f64(r.y_c),
            format_f64(r.o_c),
            range.clone(),
        ];
        if timed {
            row.push(r.seconds.map_or_else(String::new, format_f64));
        }
        out.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}
