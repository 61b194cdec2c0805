//! Unit relevance scores: the number of peaks in the density of each unit's
//! normalised gradient values.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kde::{estimate_density, DensityEstimate, KdeConfig, SampleSet, EPS_VAR};
use crate::tensor_store::TensorBundle;
use crate::{Error, Result};

pub const DEFAULT_PROMINENCE: f64 = 0.05;
/// Retained peaks closer than this many grid cells to a higher one are dropped.
pub const MIN_SEPARATION: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    #[default]
    Gradient,
    Activation,
}

impl fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreSource::Gradient => "gradient",
            ScoreSource::Activation => "activation",
        })
    }
}

impl FromStr for ScoreSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(ScoreSource::Gradient),
            "activation" => Ok(ScoreSource::Activation),
            other => Err(Error::invalid(format!(
                "score source must be gradient or activation, got {other:?}"
            ))),
        }
    }
}

/// Min-max normalised unit values, or the marker for a unit whose values
/// span no more than [`EPS_VAR`].
#[derive(Clone, Debug, PartialEq)]
pub enum UnitSamples {
    Samples(SampleSet),
    Degenerate { value: f64 },
}

/// Flattens a `[U, V]` slice row-major and rescales it to `[0, 1]`.
pub fn normalize_unit(slice: ArrayView2<'_, f32>) -> Result<UnitSamples> {
    let (min, max) = min_max(slice)?;
    if max - min <= EPS_VAR {
        return Ok(UnitSamples::Degenerate { value: min });
    }
    let range = max - min;
    let values = slice
        .iter()
        .map(|&v| ((f64::from(v) - min) / range).clamp(0.0, 1.0))
        .collect();
    Ok(UnitSamples::Samples(SampleSet::new(values)?))
}

fn min_max(slice: ArrayView2<'_, f32>) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for ((u, v), &x) in slice.indexed_iter() {
        if !x.is_finite() {
            return Err(Error::invalid(format!("non-finite value {x} at [{u}, {v}]")));
        }
        lo = lo.min(f64::from(x));
        hi = hi.max(f64::from(x));
    }
    if lo > hi {
        return Err(Error::invalid("empty unit slice"));
    }
    Ok((lo, hi))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub index: usize,
    pub height: f64,
    pub prominence: f64,
}

/// Interior local maxima of `signal` whose prominence is at least
/// `min_fraction` of the global maximum, thinned so that no two retained
/// peaks are closer than [`MIN_SEPARATION`] cells. Plateaus count once, at
/// their middle. Returned in index order.
pub fn detect_peaks(signal: &[f64], min_fraction: f64) -> Vec<Peak> {
    let n = signal.len();
    if n < 3 {
        return Vec::new();
    }
    let top = signal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top.is_nan() || top <= 0.0 {
        return Vec::new();
    }
    let threshold = min_fraction * top;

    let mut candidates = Vec::new();
    let mut i = 1;
    while i < n - 1 {
        if signal[i] > signal[i - 1] {
            let mut j = i;
            while j + 1 < n && signal[j + 1] == signal[i] {
                j += 1;
            }
            if j + 1 < n && signal[j + 1] < signal[i] {
                candidates.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }

    let mut peaks: Vec<Peak> = candidates
        .into_iter()
        .map(|p| Peak {
            index: p,
            height: signal[p],
            prominence: prominence(signal, p),
        })
        .filter(|p| p.prominence >= threshold)
        .collect();

    let mut order: Vec<usize> = (0..peaks.len()).collect();
    order.sort_by(|&a, &b| {
        peaks[b]
            .height
            .total_cmp(&peaks[a].height)
            .then(peaks[a].index.cmp(&peaks[b].index))
    });
    let mut keep = vec![false; peaks.len()];
    for &k in &order {
        let idx = peaks[k].index;
        let clear = order
            .iter()
            .filter(|&&o| keep[o])
            .all(|&o| peaks[o].index.abs_diff(idx) >= MIN_SEPARATION);
        keep[k] = clear;
    }
    let mut k = 0;
    peaks.retain(|_| {
        k += 1;
        keep[k - 1]
    });
    peaks
}

/// Height above the higher of the two lowest points reachable on either
/// side before meeting a strictly higher sample or the signal's end.
fn prominence(signal: &[f64], p: usize) -> f64 {
    let h = signal[p];
    let mut left = h;
    for &v in signal[..p].iter().rev() {
        if v > h {
            break;
        }
        left = left.min(v);
    }
    let mut right = h;
    for &v in &signal[p + 1..] {
        if v > h {
            break;
        }
        right = right.min(v);
    }
    h - left.max(right)
}

/// Peak count of a density estimate.
pub fn find_peaks(density: &DensityEstimate, min_fraction: f64) -> usize {
    detect_peaks(&density.density, min_fraction).len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub kde: KdeConfig,
    pub prominence: f64,
    pub score_source: ScoreSource,
    #[serde(skip)]
    pub retain_densities: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            kde: KdeConfig::default(),
            prominence: DEFAULT_PROMINENCE,
            score_source: ScoreSource::Gradient,
            retain_densities: false,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        self.kde.validate()?;
        if !(self.prominence.is_finite() && (0.0..=1.0).contains(&self.prominence)) {
            return Err(Error::invalid(format!(
                "prominence must lie in [0, 1], got {}",
                self.prominence
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitScore {
    pub score: u32,
    /// Raw `(min, max)` of the unit's values before rescaling.
    pub normalization: (f64, f64),
    pub density: Option<DensityEstimate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitScoreVector {
    pub scores: Vec<u32>,
    pub normalization: Vec<(f64, f64)>,
    pub densities: Option<Vec<Option<DensityEstimate>>>,
}

impl UnitScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn peak_range(&self) -> [u32; 2] {
        let lo = self.scores.iter().copied().min().unwrap_or(0);
        let hi = self.scores.iter().copied().max().unwrap_or(0);
        [lo, hi]
    }

    pub fn histogram(&self) -> BTreeMap<u32, usize> {
        let mut h = BTreeMap::new();
        for &s in &self.scores {
            *h.entry(s).or_insert(0) += 1;
        }
        h
    }
}

/// Scores one unit slice. Degenerate units score zero.
pub fn score_unit(slice: ArrayView2<'_, f32>, config: &ScoringConfig) -> Result<UnitScore> {
    let normalization = min_max(slice)?;
    let samples = match normalize_unit(slice)? {
        UnitSamples::Degenerate { .. } => {
            return Ok(UnitScore {
                score: 0,
                normalization,
                density: None,
            })
        }
        UnitSamples::Samples(s) => s,
    };
    let density = match estimate_density(&samples, &config.kde) {
        Ok(d) => d,
        // the raw range passed the guard but rescaled samples collapsed
        Err(Error::ZeroVariance { .. }) => {
            return Ok(UnitScore {
                score: 0,
                normalization,
                density: None,
            })
        }
        Err(e) => return Err(e),
    };
    let score = find_peaks(&density, config.prominence) as u32;
    Ok(UnitScore {
        score,
        normalization,
        density: config.retain_densities.then_some(density),
    })
}

/// Scores every unit of the bundle in parallel; results are in unit order
/// whatever the thread count.
pub fn score_units(bundle: &TensorBundle, config: &ScoringConfig) -> Result<UnitScoreVector> {
    config.validate()?;
    let per_unit: Vec<UnitScore> = (0..bundle.units())
        .into_par_iter()
        .map(|k| {
            let slice = match config.score_source {
                ScoreSource::Gradient => bundle.gradient_unit(k),
                ScoreSource::Activation => bundle.activation_unit(k),
            };
            score_unit(slice, config).map_err(|e| Error::Unit {
                unit: k,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let densities = config
        .retain_densities
        .then(|| per_unit.iter().map(|u| u.density.clone()).collect());
    Ok(UnitScoreVector {
        scores: per_unit.iter().map(|u| u.score).collect(),
        normalization: per_unit.iter().map(|u| u.normalization).collect(),
        densities,
    })
}

/// On-disk form of `scores.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub bundle: String,
    pub score_source: ScoreSource,
    pub scores: Vec<u32>,
    pub peak_range: [u32; 2],
    pub histogram: BTreeMap<String, usize>,
    pub prominence: f64,
    pub kde_config: KdeConfig,
}

impl ScoresFile {
    pub fn new(bundle: impl Into<String>, scores: &UnitScoreVector, config: &ScoringConfig) -> Self {
        Self {
            bundle: bundle.into(),
            score_source: config.score_source,
            scores: scores.scores.clone(),
            peak_range: scores.peak_range(),
            histogram: scores
                .histogram()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            prominence: config.prominence,
            kde_config: config.kde.clone(),
        }
    }

    /// Score vector recovered from the file, checked for consistency.
    pub fn unit_scores(&self) -> Result<UnitScoreVector> {
        if self.scores.is_empty() {
            return Err(Error::invalid("scores file lists no units"));
        }
        Ok(UnitScoreVector {
            scores: self.scores.clone(),
            normalization: Vec::new(),
            densities: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};

    #[test]
    fn min_max_example() {
        let a = arr2(&[[-2.0f32, 0.0, 2.0]]);
        match normalize_unit(a.view()).unwrap() {
            UnitSamples::Samples(s) => assert_eq!(s.values(), &[0.0, 0.5, 1.0]),
            other => panic!("{other:?}"),
        }
        let c = Array2::<f32>::from_elem((4, 4), 3.5);
        assert_eq!(normalize_unit(c.view()).unwrap(), UnitSamples::Degenerate { value: 3.5 });
        let big = Array2::<f32>::from_shape_fn((13, 13), |(u, v)| (u * 13 + v) as f32);
        match normalize_unit(big.view()).unwrap() {
            UnitSamples::Samples(s) => assert_eq!(s.len(), 169),
            other => panic!("{other:?}"),
        }
        let bad = arr2(&[[1.0f32, f32::NAN]]);
        assert!(normalize_unit(bad.view()).is_err());
    }

    #[test]
    fn monotone_signal_has_no_interior_peak() {
        let up: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert!(detect_peaks(&up, 0.05).is_empty());
        let down: Vec<f64> = up.iter().rev().copied().collect();
        assert!(detect_peaks(&down, 0.05).is_empty());
    }

    #[test]
    fn plateau_counts_once_at_middle() {
        let s = [0.0, 1.0, 2.0, 2.0, 2.0, 2.0, 1.0, 0.0];
        let p = detect_peaks(&s, 0.05);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].index, 3);
        // a plateau running into the edge is a boundary maximum
        assert!(detect_peaks(&[0.0, 1.0, 2.0, 2.0], 0.05).is_empty());
    }

    #[test]
    fn prominence_filters_small_bumps() {
        // main peak 10, shoulder bump rising 0.3 above its saddle
        let s = [0.0, 5.0, 10.0, 5.0, 4.0, 4.3, 3.0, 0.0];
        let p = detect_peaks(&s, 0.05);
        assert_eq!(p.iter().map(|p| p.index).collect::<Vec<_>>(), vec![2]);
        assert!((p[0].prominence - 10.0).abs() < 1e-12);
        let p = detect_peaks(&s, 0.01);
        assert_eq!(p.len(), 2);
        assert!((p[1].prominence - 0.3).abs() < 1e-12);
    }

    #[test]
    fn separation_keeps_the_higher_peak() {
        let s = [0.0, 3.0, 0.0, 4.0, 0.0, 0.0, 2.0, 0.0];
        let p = detect_peaks(&s, 0.05);
        assert_eq!(p.iter().map(|p| p.index).collect::<Vec<_>>(), vec![1, 3, 6]);
        let s = [0.0, 3.0, 1.0, 4.0, 0.0];
        // indices 1 and 3 are two cells apart: both survive
        assert_eq!(detect_peaks(&s, 0.05).len(), 2);
    }

    #[test]
    fn flat_or_empty_signal() {
        assert!(detect_peaks(&[0.0; 10], 0.05).is_empty());
        assert!(detect_peaks(&[1.0, 2.0], 0.05).is_empty());
    }

    #[test]
    fn histogram_and_range() {
        let v = UnitScoreVector {
            scores: vec![0, 1, 1, 2],
            normalization: vec![(0.0, 1.0); 4],
            densities: None,
        };
        assert_eq!(v.peak_range(), [0, 2]);
        assert_eq!(v.histogram(), BTreeMap::from([(0, 1), (1, 2), (2, 1)]));
    }

    #[test]
    fn score_source_parsing() {
        assert_eq!("activation".parse::<ScoreSource>().unwrap(), ScoreSource::Activation);
        assert!("weights".parse::<ScoreSource>().is_err());
        assert_eq!(serde_json::to_string(&ScoreSource::Gradient).unwrap(), "\"gradient\"");
    }
}
