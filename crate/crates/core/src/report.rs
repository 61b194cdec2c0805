//! Aggregation of metric and ablation tables, and the AVX-vs-density plot.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::evaluate::csv_error;
use crate::metrics::Components;
use crate::numfmt::format_f64;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean of the per-image AVX values.
    PerImage,
    /// AVX of the mean components.
    OfAverages,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::PerImage => "per-image",
            Aggregation::OfAverages => "of-averages",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-image" => Ok(Aggregation::PerImage),
            "of-averages" => Ok(Aggregation::OfAverages),
            _ => Err(Error::invalid(format!(
                "aggregation {s:?}: expected per-image or of-averages"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSpec {
    pub inputs: Vec<PathBuf>,
    pub table: Option<PathBuf>,
    pub plot: Option<PathBuf>,
    pub aggregation: Aggregation,
}

impl ReportSpec {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::invalid("report needs at least one input file"));
        }
        if self.table.is_none() && self.plot.is_none() {
            return Err(Error::invalid("report needs a table or a plot output"));
        }
        Ok(())
    }
}

/// One evaluated map, reduced to what aggregation needs.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub relu_mode: String,
    pub delta: f64,
    pub avx: f64,
    pub components: Components,
    pub hit: u8,
}

#[derive(Deserialize)]
struct AblationLine {
    delta: f64,
    relu_mode: String,
    method: String,
    avx: f64,
    ad: f64,
    ssim: f64,
    fsim: f64,
    mse: f64,
    hit: u8,
}

#[derive(Deserialize)]
struct MetricsLine {
    method: String,
    selected: u8,
    hit: u8,
    ad: f64,
    ssim: f64,
    fsim: f64,
    mse: f64,
    avx: f64,
}

/// Reads `ablation.csv` or `metrics.csv` files, told apart by header. From
/// a metrics table the headline ADVISE row and every non-ADVISE row are
/// kept, at density 0.
pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut rows = Vec::new();
    if headers.iter().any(|h| h == "delta") && headers.iter().any(|h| h == "relu_mode") {
        for line in reader.deserialize::<AblationLine>() {
            let l = line.map_err(|e| csv_error(path, e))?;
            rows.push(ReportRow {
                method: l.method,
                relu_mode: l.relu_mode,
                delta: l.delta,
                avx: l.avx,
                components: Components {
                    ad: l.ad,
                    ssim: l.ssim,
                    fsim: l.fsim,
                    mse: l.mse,
                },
                hit: l.hit,
            });
        }
    } else if headers.iter().any(|h| h == "map") {
        for line in reader.deserialize::<MetricsLine>() {
            let l = line.map_err(|e| csv_error(path, e))?;
            if l.method == crate::evaluate::METHOD_ADVISE && l.selected == 0 {
                continue;
            }
            rows.push(ReportRow {
                method: l.method,
                relu_mode: "-".into(),
                delta: 0.0,
                avx: l.avx,
                components: Components {
                    ad: l.ad,
                    ssim: l.ssim,
                    fsim: l.fsim,
                    mse: l.mse,
                },
                hit: l.hit,
            });
        }
    } else {
        return Err(Error::invalid(format!(
            "{}: neither an ablation nor a metrics table",
            path.display()
        )));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub relu_mode: String,
    pub delta: f64,
    pub n: usize,
    pub avx_per_image: f64,
    pub avx_of_averages: f64,
    pub mean: Components,
    pub hit_rate: f64,
}

impl AggregateRow {
    pub fn avx(&self, mode: Aggregation) -> f64 {
        match mode {
            Aggregation::PerImage => self.avx_per_image,
            Aggregation::OfAverages => self.avx_of_averages,
        }
    }
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Key(String, String, u64);

fn delta_key(d: f64) -> u64 {
    // total order on non-negative densities
    d.to_bits()
}

/// Groups rows by method, ReLU mode and density, in that order.
pub fn aggregate(rows: &[ReportRow]) -> Result<Vec<AggregateRow>> {
    if rows.is_empty() {
        return Err(Error::invalid("no rows to aggregate"));
    }
    let mut groups: BTreeMap<Key, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        if !(r.delta >= 0.0) {
            return Err(Error::invalid(format!("density {} is negative", r.delta)));
        }
        groups
            .entry(Key(r.method.clone(), r.relu_mode.clone(), delta_key(r.delta)))
            .or_default()
            .push(r);
    }
    Ok(groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean_of = |f: fn(&ReportRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            let mean = Components {
                ad: mean_of(|r| r.components.ad),
                ssim: mean_of(|r| r.components.ssim),
                fsim: mean_of(|r| r.components.fsim),
                mse: mean_of(|r| r.components.mse),
            };
            AggregateRow {
                method: g[0].method.clone(),
                relu_mode: g[0].relu_mode.clone(),
                delta: g[0].delta,
                n: g.len(),
                avx_per_image: mean_of(|r| r.avx),
                avx_of_averages: mean.harmonic_mean(),
                mean,
                hit_rate: mean_of(|r| f64::from(r.hit)),
            }
        })
        .collect())
}

pub const REPORT_CSV_HEADER: [&str; 11] = [
    "method",
    "relu_mode",
    "delta",
    "n",
    "avx_per_image",
    "avx_of_averages",
    "ad",
    "ssim",
    "fsim",
    "mse",
    "hit_rate",
];

pub fn write_report_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut out = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    out.write_record(REPORT_CSV_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        out.write_record([
            r.method.clone(),
            r.relu_mode.clone(),
            format_f64(r.delta),
            r.n.to_string(),
            format_f64(r.avx_per_image),
            format_f64(r.avx_of_averages),
            format_f64(r.mean.ad),
            format_f64(r.mean.ssim),
            format_f64(r.mean.fsim),
            format_f64(r.mean.mse),
            format_f64(r.hit_rate),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line plot of AVX against density, one series per method and ReLU mode.
/// The output depends only on the rows.
pub fn render_svg(rows: &[AggregateRow], mode: Aggregation) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let mut series: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        series
            .entry((r.method.clone(), r.relu_mode.clone()))
            .or_default()
            .push((r.delta, r.avx(mode)));
    }
    let (mut x0, mut x1) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.delta), hi.max(r.delta)));
    if x1 - x0 < 1e-12 {
        x0 -= 0.0125;
        x1 += 0.0125;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| TOP + (1.0 - y.clamp(0.0, 1.0)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let py = sy(y);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#dddddd"/>"##,
            LEFT + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.1}</text>"#,
            LEFT - 6.0,
            py + 4.0
        );
    }
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let px = sx(x);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{x:.3}</text>"#,
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="14">δ</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" font-size="14" transform="rotate(-90 16 {:.2})">AVX</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (i, ((method, relu), points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
        }
        for &(x, y) in points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let ly = TOP + 12.0 + 18.0 * i as f64;
        let lx = LEFT + plot_w + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let label = if relu == "-" {
            escape(method)
        } else {
            format!("{} (ReLU {})", escape(method), escape(relu))
        };
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{label}</text>"#, lx + 26.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads every input, aggregates and writes the requested outputs.
pub fn run_report(spec: &ReportSpec) -> Result<Vec<AggregateRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for input in &spec.inputs {
        rows.extend(read_rows(input)?);
    }
    let agg = aggregate(&rows)?;
    if let Some(table) = &spec.table {
        write_report_csv(table, &agg)?;
    }
    if let Some(plot) = &spec.plot {
        let svg = render_svg(&agg, spec.aggregation)?;
        std::fs::write(plot, svg).map_err(|e| Error::io(plot, e))?;
    }
    Ok(agg)
}
