//! The `advise` command line.
//!
//! Exit codes: 0 success, 2 invalid input (bad flags, missing or malformed
//! files), 3 numerical failure, 4 model-runner failure or timeout.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use advise_core::ablation::{run_ablation, write_ablation_csv, AblationPlan, AblationSettings, PAPER_DENSITIES};
use advise_core::evaluate::{
    advise_explanations, attach_counterparts, evaluate_explanations, write_metrics_csv, Explanation, Selection,
    METHOD_GRADCAM, METHOD_IDENTITY,
};
use advise_core::imageio::{overlay, read_rgb, write_gray, write_raw_maps, write_rgb, RawMap};
use advise_core::kde::{GammaMode, KdeConfig};
use advise_core::numfmt::{read_json, write_json};
use advise_core::report::{run_report, Aggregation, ReportSpec};
use advise_core::runner::{RunnerHandle, SubprocessRunner};
use advise_core::saliency::{build_advise_maps, gradcam_map, resize_bicubic, SaliencyMapSet};
use advise_core::scoring::{score_units, ScoreSource, ScoresFile, ScoringConfig, UnitScoreVector, DEFAULT_PROMINENCE};
use advise_core::tensor_store::{read_bundle, TensorBundle};
use advise_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_RUNNER: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "advise", version, about = "Adaptive feature relevance and visual explanations for CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Score every unit of a bundle by counting density peaks.
    Score(ScoreArgs),
    /// Build one saliency map per score group.
    Explain(ExplainArgs),
    /// Evaluate maps against a model runner.
    Evaluate(EvaluateArgs),
    /// Salt-and-pepper ablation over a density schedule.
    Ablate(AblateArgs),
    /// Aggregate metric or ablation tables and plot AVX against density.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct KdeArgs {
    /// `search` or `fixed:<gamma>`.
    #[arg(long, default_value = "search")]
    pub gamma: GammaMode,
    #[arg(long, default_value_t = 512)]
    pub grid_size: usize,
    #[arg(long, default_value_t = DEFAULT_PROMINENCE)]
    pub prominence: f64,
    /// `gradient` or `activation`.
    #[arg(long, default_value = "gradient")]
    pub score_source: ScoreSource,
}

impl KdeArgs {
    pub fn config(&self) -> Result<ScoringConfig> {
        let config = ScoringConfig {
            kde: KdeConfig {
                grid_size: self.grid_size,
                gamma_mode: self.gamma,
                ..KdeConfig::default()
            },
            prominence: self.prominence,
            score_source: self.score_source,
            retain_densities: false,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Debug, Clone)]
pub struct RunnerArgs {
    /// Runner command line; `export` or `infer` and their flags are appended.
    #[arg(long)]
    pub runner: String,
    #[arg(long, default_value_t = 300.0)]
    pub runner_timeout: f64,
    /// Images per inference call.
    #[arg(long, default_value_t = 16)]
    pub runner_capacity: usize,
}

impl RunnerArgs {
    fn runner(&self, workdir: &Path) -> Result<SubprocessRunner> {
        if !(self.runner_timeout > 0.0 && self.runner_timeout.is_finite()) {
            return Err(Error::invalid(format!(
                "--runner-timeout must be positive, got {}",
                self.runner_timeout
            )));
        }
        SubprocessRunner::new(RunnerHandle::new(
            &self.runner,
            workdir,
            self.runner_capacity,
            Duration::from_secs_f64(self.runner_timeout),
        )?)
    }
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub kde: KdeArgs,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Precomputed scores; the bundle is scored when absent.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Output directory; maps go to `<out>/maps`.
    #[arg(long)]
    pub out: PathBuf,
    /// Input image for overlays; defaults to the bundle's image path.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub no_relu: bool,
    /// Also emit a baseline map (`gradcam`).
    #[arg(long)]
    pub baseline: Option<Baseline>,
    /// Score group to record as selected (`score:<n>`).
    #[arg(long)]
    pub select: Option<Selection>,
    #[command(flatten)]
    pub kde: KdeArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Gradcam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MaskMode {
    /// A single all-ones map, for end-to-end checks.
    Identity,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Bundle for the second-ranked class, used for CS.
    #[arg(long)]
    pub bundle2: Option<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Output directory for metrics.json, metrics.csv and masked images.
    #[arg(long)]
    pub out: PathBuf,
    /// `best-avx` or `score:<n>`.
    #[arg(long, default_value = "best-avx")]
    pub select: Selection,
    #[arg(long)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub mask: Option<MaskMode>,
    #[arg(long)]
    pub no_relu: bool,
    /// Add wall-clock seconds per map; output then varies between runs.
    #[arg(long)]
    pub record_timing: bool,
    #[command(flatten)]
    pub runner: RunnerArgs,
    #[command(flatten)]
    pub kde: KdeArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
    /// Output directory for ablation.csv and intermediate files.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated, strictly increasing densities in [0, 1).
    #[arg(long, value_delimiter = ',')]
    pub densities: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "best-avx")]
    pub select: Selection,
    #[arg(long, default_value = "default")]
    pub model: String,
    #[arg(long, default_value = "last-conv")]
    pub layer: String,
    #[command(flatten)]
    pub runner: RunnerArgs,
    #[command(flatten)]
    pub kde: KdeArgs,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// metrics.csv or ablation.csv files.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Writes `report.csv` and `avx_vs_delta.svg` into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// `per-image` or `of-averages`; selects the plotted series.
    #[arg(long, default_value = "per-image")]
    pub aggregation: Aggregation,
}

pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Numerical(_) | Error::ZeroVariance { .. } => EXIT_NUMERICAL,
        Error::Runner(_) | Error::RunnerTimeout { .. } => EXIT_RUNNER,
        _ => EXIT_INVALID,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Score(a) => cmd_score(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn load_bundle(path: &Path) -> Result<TensorBundle> {
    read_bundle(path).map_err(|e| e.context(format!("bundle {}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn scores_for(bundle: &TensorBundle, scores: Option<&Path>, kde: &KdeArgs) -> Result<UnitScoreVector> {
    match scores {
        Some(path) => {
            let file: ScoresFile = read_json(path)?;
            let s = file.unit_scores()?;
            if s.len() != bundle.units() {
                return Err(Error::invalid(format!(
                    "{}: {} scores for a bundle with {} units",
                    path.display(),
                    s.len(),
                    bundle.units()
                )));
            }
            Ok(s)
        }
        None => score_units(bundle, &kde.config()?),
    }
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let config = args.kde.config()?;
    let bundle = load_bundle(&args.bundle)?;
    let scores = score_units(&bundle, &config)?;
    let file = ScoresFile::new(args.bundle.to_string_lossy(), &scores, &config);
    write_json(&args.out, &file)?;
    let [lo, hi] = scores.peak_range();
    println!("scored {} units, peak range {lo}-{hi}", scores.len());
    Ok(())
}

#[derive(Serialize)]
struct IndexGroup {
    score: u32,
    units: usize,
    heatmap: String,
    overlay: String,
}

#[derive(Serialize)]
struct MapIndex {
    bundle: String,
    relu_applied: bool,
    peak_range: [u32; 2],
    groups: Vec<IndexGroup>,
    selected: Option<u32>,
    baseline: Option<String>,
}

fn fit(map: &Array2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
    if map.dim() == (h, w) {
        Ok(map.clone())
    } else {
        Ok(resize_bicubic(map.view(), [h, w])?.mapv(|x| x.clamp(0.0, 1.0)))
    }
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let scores = scores_for(&bundle, args.scores.as_deref(), &args.kde)?;
    let relu = !args.no_relu;
    let mut maps = build_advise_maps(&bundle, &scores, relu)?;
    if let Some(sel) = args.select {
        match sel {
            Selection::Score(s) if maps.get(s).is_some() => maps.selected = Some(s),
            Selection::Score(s) => return Err(Error::invalid(format!("--select score:{s}: no such score group"))),
            Selection::BestAvx => log::warn!("best-avx selection needs evaluation; nothing recorded"),
        }
    }
    let image_path = args.image.clone().unwrap_or_else(|| PathBuf::from(&bundle.info().image));
    let image = read_rgb(&image_path).map_err(|e| e.context("overlay image (pass --image)"))?;
    let (h, w, _) = image.dim();
    let dir = args.out.join("maps");
    create_dir(&dir)?;
    let mut groups = Vec::new();
    for (&score, m) in &maps.maps {
        let heatmap = format!("score_{score}.png");
        let over = format!("score_{score}_overlay.png");
        write_gray(dir.join(&heatmap), m.normalized.view())?;
        write_rgb(dir.join(&over), overlay(image.view(), fit(&m.normalized, h, w)?.view())?.view())?;
        groups.push(IndexGroup {
            score,
            units: m.units.len(),
            heatmap,
            overlay: over,
        });
    }
    let mut raw: Vec<RawMap<'_>> = maps
        .maps
        .iter()
        .map(|(&s, m)| RawMap {
            id: format!("score_{s}"),
            score_group: Some(s),
            units: m.units.len(),
            data: m.raw.view(),
        })
        .collect();
    let gradcam = match args.baseline {
        Some(Baseline::Gradcam) => Some(gradcam_map(&bundle)?),
        None => None,
    };
    if let Some((g_raw, g_norm)) = &gradcam {
        write_gray(dir.join("gradcam.png"), g_norm.view())?;
        write_rgb(
            dir.join("gradcam_overlay.png"),
            overlay(image.view(), fit(g_norm, h, w)?.view())?.view(),
        )?;
        raw.push(RawMap {
            id: METHOD_GRADCAM.into(),
            score_group: None,
            units: bundle.units(),
            data: g_raw.view(),
        });
    }
    write_raw_maps(dir.join("raw.atb"), relu, &raw)?;
    let index = MapIndex {
        bundle: args.bundle.to_string_lossy().into_owned(),
        relu_applied: relu,
        peak_range: scores.peak_range(),
        groups,
        selected: maps.selected,
        baseline: gradcam.as_ref().map(|_| METHOD_GRADCAM.to_string()),
    };
    write_json(dir.join("index.json"), &index)?;
    println!("wrote {} score-group maps to {}", maps.maps.len(), dir.display());
    Ok(())
}

fn second_class_maps(path: &Path, args: &EvaluateArgs, relu: bool) -> Result<(SaliencyMapSet, Array2<f64>)> {
    let bundle = load_bundle(path)?;
    let scores = score_units(&bundle, &args.kde.config()?)?;
    Ok((build_advise_maps(&bundle, &scores, relu)?, gradcam_map(&bundle)?.1))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let image = read_rgb(&args.image)?;
    create_dir(&args.out)?;
    let runner = args.runner.runner(&args.out)?;
    let relu = !args.no_relu;
    let mut peak_range = None;
    let mut explanations = Vec::new();
    let mut timings = Vec::new();
    if let Some(MaskMode::Identity) = args.mask {
        let (h, w, _) = image.dim();
        explanations.push(Explanation {
            id: METHOD_IDENTITY.into(),
            method: METHOD_IDENTITY.into(),
            score_group: None,
            map: Array2::ones((h, w)),
            counterpart: None,
        });
        timings.push(0.0);
    } else {
        let start = Instant::now();
        let scores = scores_for(&bundle, args.scores.as_deref(), &args.kde)?;
        let maps = build_advise_maps(&bundle, &scores, relu)?;
        let advise_seconds = start.elapsed().as_secs_f64();
        peak_range = Some(scores.peak_range());
        explanations = advise_explanations(&maps);
        timings = vec![advise_seconds; explanations.len()];
        let mut second_gradcam = None;
        match &args.bundle2 {
            Some(path) => {
                let (second, g2) = second_class_maps(path, args, relu)?;
                let normalized = second.maps.iter().map(|(&s, m)| (s, m.normalized.clone())).collect();
                attach_counterparts(&mut explanations, &normalized);
                second_gradcam = Some(g2);
            }
            None => log::warn!("no --bundle2 for the second-ranked class: CS undefined for every map"),
        }
        if let Some(Baseline::Gradcam) = args.baseline {
            let start = Instant::now();
            let (_, g) = gradcam_map(&bundle)?;
            timings.push(start.elapsed().as_secs_f64());
            explanations.push(Explanation {
                id: METHOD_GRADCAM.into(),
                method: METHOD_GRADCAM.into(),
                score_group: None,
                map: g,
                counterpart: second_gradcam,
            });
        }
    }
    let mut evaluation = evaluate_explanations(
        &runner,
        &args.image,
        image.view(),
        bundle.info().class_index,
        &explanations,
        args.select,
        &args.out.join("masked"),
    )?;
    if args.record_timing {
        for (r, t) in evaluation.records.iter_mut().zip(timings) {
            r.seconds = Some(t);
        }
    }
    write_json(args.out.join("metrics.json"), &evaluation.records)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &evaluation.records, peak_range)?;
    if let Some(h) = evaluation.headline() {
        println!("{} maps evaluated; selected {} with AVX {}", evaluation.records.len(), h.map, h.avx);
    }
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let densities = args.densities.clone().unwrap_or_else(|| PAPER_DENSITIES.to_vec());
    let plan = AblationPlan::new(args.images.clone(), densities, args.seed)?;
    let config = args.kde.config()?;
    create_dir(&args.out)?;
    let runner = args.runner.runner(&args.out)?;
    let settings = AblationSettings {
        scoring: &config,
        selection: args.select,
        model: args.model.clone(),
        layer: args.layer.clone(),
        workdir: args.out.join("work"),
    };
    let rows = run_ablation(&plan, &runner, &settings)?;
    let path = args.out.join("ablation.csv");
    write_ablation_csv(&path, &rows)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let table = args
        .table
        .clone()
        .or_else(|| args.out.as_ref().map(|d| d.join("report.csv")));
    let plot = args
        .plot
        .clone()
        .or_else(|| args.out.as_ref().map(|d| d.join("avx_vs_delta.svg")));
    if let Some(d) = &args.out {
        create_dir(d)?;
    }
    let spec = ReportSpec {
        inputs: args.inputs.clone(),
        table,
        plot,
        aggregation: args.aggregation,
    };
    let rows = run_report(&spec)?;
    println!("aggregated {} series points", rows.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::invalid("x")), EXIT_INVALID);
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::RunnerTimeout { seconds: 1.0 }), EXIT_RUNNER);
        assert_eq!(exit_code(&Error::Runner("x".into()).context("evaluating")), EXIT_RUNNER);
    }

    #[test]
    fn kde_flags_build_config() {
        let cli = Cli::try_parse_from([
            "advise",
            "score",
            "--bundle",
            "b",
            "--out",
            "s.json",
            "--gamma",
            "fixed:0.5",
            "--grid-size",
            "256",
            "--score-source",
            "activation",
        ])
        .unwrap();
        let Command::Score(a) = cli.command else { panic!() };
        let c = a.kde.config().unwrap();
        assert_eq!(c.kde.gamma_mode, GammaMode::Fixed(0.5));
        assert_eq!(c.kde.grid_size, 256);
        assert_eq!(c.score_source, ScoreSource::Activation);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["advise", "score", "--bundle"]), EXIT_INVALID);
        assert_eq!(run(["advise", "score", "--bundle", "b", "--out", "o", "--gamma", "fixed:-1"]), EXIT_INVALID);
        assert_eq!(run(["advise", "--help"]), EXIT_OK);
    }
}
