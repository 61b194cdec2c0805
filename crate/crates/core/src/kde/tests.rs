use super::*;
use crate::scoring::{detect_peaks, DEFAULT_PROMINENCE};
use std::f64::consts::PI;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Independent kernel: the textbook formula, term by term.
fn oracle_kernel(s: f64, w: f64) -> f64 {
    1.0 / ((2.0 * PI).sqrt() * w) * (-(s * s) / (2.0 * w * w)).exp()
}

fn trapz(f: impl Fn(f64) -> f64, a: f64, b: f64, steps: usize) -> f64 {
    let h = (b - a) / steps as f64;
    let inner: f64 = (1..steps).map(|k| f(a + k as f64 * h)).sum();
    h * (0.5 * f(a) + inner + 0.5 * f(b))
}

fn clusters(rng: &mut ChaCha8Rng, spec: &[(f64, f64, usize)]) -> Vec<f64> {
    let mut v = Vec::new();
    for &(mu, sd, n) in spec {
        let d = Normal::new(mu, sd).unwrap();
        // rejection keeps the tails free of pile-ups at the ends
        v.extend((0..n).map(|_| loop {
            let x = d.sample(rng);
            if (0.0..=1.0).contains(&x) {
                break x;
            }
        }));
    }
    v
}

pub(crate) fn local_maxima(d: &[f64]) -> Vec<usize> {
    (1..d.len() - 1).filter(|&j| d[j] > d[j - 1] && d[j] > d[j + 1]).collect()
}

#[test]
fn kernel_closed_form_value() {
    let v = gauss_kernel(0.0, 0.1).unwrap();
    assert!((v - 3.989423).abs() < 5e-7, "{v}");
    assert!((v - oracle_kernel(0.0, 0.1)).abs() < 1e-12);
}

#[test]
fn kernel_is_even_and_rejects_bad_bandwidth() {
    for s in [0.01, 0.3, 2.5] {
        assert_eq!(gauss_kernel(s, 0.2).unwrap(), gauss_kernel(-s, 0.2).unwrap());
    }
    assert!(gauss_kernel(0.0, 0.0).is_err());
    assert!(gauss_kernel(0.0, -1.0).is_err());
    assert!(gauss_kernel(0.0, f64::NAN).is_err());
}

#[test]
fn kernel_integrates_to_one() {
    for w in [0.002, 0.05, 0.7] {
        let mass = trapz(|s| gauss(s, w), -12.0 * w, 12.0 * w, 20_000);
        assert!((mass - 1.0).abs() < 1e-6, "w={w}: {mass}");
    }
}

#[test]
fn fixed_density_examples() {
    let one = SampleSet::new(vec![0.5]).unwrap();
    assert!((fixed_density(&one, 0.1, 0.5).unwrap() - 3.989423).abs() < 5e-7);
    let two = SampleSet::new(vec![0.2, 0.8]).unwrap();
    let expect = 0.5 * (oracle_kernel(0.3, 0.05) + oracle_kernel(-0.3, 0.05));
    let got = fixed_density(&two, 0.05, 0.5).unwrap();
    assert!(((got - expect) / expect).abs() < 1e-12, "{got} vs {expect}");
    assert!(fixed_density(&two, 0.05, 7.0).unwrap() >= 0.0);
}

#[test]
fn fixed_density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = SampleSet::new((0..40).map(|_| rng.random::<f64>()).collect()).unwrap();
    let w = 0.03;
    let mass = trapz(|x| fixed_density(&s, w, x).unwrap(), -12.0 * w, 1.0 + 12.0 * w, 40_000);
    assert!((mass - 1.0).abs() < 1e-6, "{mass}");
}

#[test]
fn psi_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let w = 0.005 + 0.2 * rng.random::<f64>();
        let win = 0.02 + 0.9 * rng.random::<f64>();
        let c: f64 = rng.random();
        let ai: f64 = rng.random();
        let aj = (ai + 0.3 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
        let closed = psi(ai, aj, w, win, c);
        let quad = trapz(
            |u| oracle_kernel(u - ai, w) * oracle_kernel(u - aj, w) / win,
            c - 0.5 * win,
            c + 0.5 * win,
            20_000,
        );
        assert!((closed - quad).abs() < 1e-6, "{closed} vs {quad}");
    }
    // all kernel mass inside the window, a_i = a_j = centre
    let closed = psi(0.5, 0.5, 0.05, 1.0, 0.5);
    let full = 1.0 / (2.0 * PI.sqrt() * 0.05);
    assert!((closed - full).abs() < 1e-9, "{closed} vs {full}");
}

#[test]
fn cost_prefers_moderate_bandwidth_for_spread_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = SampleSet::new((0..200).map(|_| rng.random::<f64>()).collect()).unwrap();
    let tiny = local_cost(&s, 0.0005, 1.0, 0.5).unwrap();
    let moderate = local_cost(&s, 0.05, 1.0, 0.5).unwrap();
    let huge = local_cost(&s, 5.0, 1.0, 0.5).unwrap();
    assert!(moderate < tiny, "{moderate} {tiny}");
    assert!(moderate < huge, "{moderate} {huge}");
    assert!(local_cost(&SampleSet::new(vec![0.3]).unwrap(), 0.1, 0.5, 0.5).is_err());
}

fn grid_argmin(s: &SampleSet, window: f64, center: f64, grid: &[f64]) -> usize {
    let costs: Vec<f64> = grid.iter().map(|&w| local_cost(s, w, window, center).unwrap()).collect();
    (0..grid.len()).min_by(|&a, &b| costs[a].total_cmp(&costs[b])).unwrap()
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

#[test]
fn doubling_multiplicity_shrinks_argmin() {
    // Each duplicate is a zero-distance pair in the cross term, worth
    // H_ω(0) = 1/(√(2π)ω), so the doubled set favours a smaller bandwidth.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = clusters(&mut rng, &[(0.3, 0.05, 60), (0.7, 0.08, 60)]);
    let doubled: Vec<f64> = base.iter().chain(base.iter()).copied().collect();
    let grid = log_grid(0.002, 0.5, 60);
    let a = grid_argmin(&SampleSet::new(base).unwrap(), 1.0, 0.5, &grid);
    let b = grid_argmin(&SampleSet::new(doubled).unwrap(), 1.0, 0.5, &grid);
    assert!(b < a, "{} vs {}", grid[a], grid[b]);
}

#[test]
fn fixed_bandwidth_tracks_cluster_width() {
    let config = KdeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let tight = clusters(&mut rng, &[(0.5, 0.01, 150)]);
    let mut background = tight.clone();
    background.extend((0..150).map(|_| rng.random::<f64>()));
    let grid = log_grid(config.bracket()[0], config.bracket()[1], 120);
    for (values, label) in [(tight, "tight"), (background, "background")] {
        let s = SampleSet::new(values).unwrap();
        let w = optimize_fixed_bandwidth(&s, 1.0, 0.5, &config).unwrap();
        let oracle = grid[grid_argmin(&s, 1.0, 0.5, &grid)];
        let step = (grid[1] / grid[0]).ln();
        eprintln!("{label}: golden {w} grid {oracle}");
        assert!((w.ln() - oracle.ln()).abs() <= 2.0 * step, "{label}: {w} vs {oracle}");
        let [lo, hi] = config.bracket();
        let c = local_cost(&s, w, 1.0, 0.5).unwrap();
        assert!(c <= local_cost(&s, lo, 1.0, 0.5).unwrap());
        assert!(c <= local_cost(&s, hi, 1.0, 0.5).unwrap());
    }
}

#[test]
fn fixed_bandwidth_smaller_for_tight_cluster() {
    let config = KdeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let tight = clusters(&mut rng, &[(0.5, 0.01, 150)]);
    let mut background = tight.clone();
    background.extend((0..150).map(|_| rng.random::<f64>()));
    let wt = optimize_fixed_bandwidth(&SampleSet::new(tight).unwrap(), 1.0, 0.5, &config).unwrap();
    let wb = optimize_fixed_bandwidth(&SampleSet::new(background).unwrap(), 1.0, 0.5, &config).unwrap();
    assert!(wt < wb, "{wt} vs {wb}");
}

#[test]
fn zero_variance_is_signalled() {
    let config = KdeConfig::default();
    let flat = SampleSet::new(vec![0.4; 30]).unwrap();
    assert!(matches!(optimize_fixed_bandwidth(&flat, 0.5, 0.5, &config), Err(Error::ZeroVariance { .. })));
    assert!(matches!(estimate_density(&flat, &config), Err(Error::ZeroVariance { .. })));
    assert!(matches!(local_bandwidths(&flat, 0.5, &config), Err(Error::ZeroVariance { .. })));
}

#[test]
fn small_gamma_fluctuates_less() {
    let config = KdeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = SampleSet::new(clusters(&mut rng, &[(0.35, 0.12, 300), (0.65, 0.12, 300)])).unwrap();
    let spread = |gamma: f64| {
        let local = local_bandwidths(&s, gamma, &config).unwrap();
        let (lo, hi) = local
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), l| (lo.min(l.bandwidth), hi.max(l.bandwidth)));
        hi / lo
    };
    let (low, high) = (spread(config.gamma_range[0]), spread(config.gamma_range[1]));
    // windows at the lower bound reach the clamp of 1 and are cut by the
    // domain ends, so the ratio is well above 1.1 near 0 and 1
    assert!(low < high, "{low} vs {high}");
}


#[test]
fn converged_iterates_settle() {
    let config = KdeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = SampleSet::new(clusters(&mut rng, &[(0.3, 0.05, 100), (0.75, 0.03, 69)])).unwrap();
    for gamma in [0.1, 0.5, 1.0] {
        let local = local_bandwidths(&s, gamma, &config).unwrap();
        let mut converged = 0;
        for l in &local {
            assert!(l.history.len() <= config.fixed_point_max_iters + 1);
            if l.converged {
                converged += 1;
                let h = &l.history;
                let (a, b) = (h[h.len() - 2], h[h.len() - 1]);
                assert!((b - a).abs() / a < config.tolerance);
                assert_eq!(l.bandwidth, b);
            }
        }
        eprintln!("gamma {gamma}: {converged}/{} converged", local.len());
    }
}

#[test]
fn smoothing_examples() {
    let config = KdeConfig::default();
    let grid = config.grid();
    let constant: Vec<(f64, f64)> = grid.iter().map(|&t| (t, 0.02)).collect();
    for (t, w) in smooth_bandwidths(&constant, 0.3, &config).unwrap() {
        assert!((w - 0.02).abs() < 1e-15, "{t}");
    }
    let single = [(0.4, 0.03)];
    assert_eq!(smooth_bandwidths(&single, 0.3, &config).unwrap(), vec![(0.4, 0.03)]);
    let step: Vec<(f64, f64)> = grid.iter().map(|&t| (t, if t < 0.5 { 0.01 } else { 0.05 })).collect();
    let out = smooth_bandwidths(&step, 0.5, &config).unwrap();
    for w in out.windows(2) {
        assert!(w[1].1 >= w[0].1 - 1e-15);
    }
    for (_, w) in &out {
        assert!((0.01 - 1e-15..=0.05 + 1e-15).contains(w));
    }
    assert!(smooth_bandwidths(&[], 0.5, &config).is_err());
}

#[test]
fn variable_cost_two_samples_matches_expansion() {
    let config = KdeConfig::default();
    let grid = config.grid();
    let bws = vec![0.1; grid.len()];
    let s = SampleSet::new(vec![0.3, 0.7]).unwrap();
    let got = variable_cost(&s, &BandwidthField { grid: &grid, bandwidths: &bws }).unwrap();
    // λ̂ = ½(H(t−.3) + H(t−.7)); ∫₀¹ λ̂² expanded with the Gaussian product
    // identity, each product integrated with erf over [0, 1].
    let w: f64 = 0.1;
    let prod = |a: f64, b: f64| {
        let m = 0.5 * (a + b);
        let sig = w / 2f64.sqrt();
        let mass = 0.5 * (libm::erf((1.0 - m) / (sig * 2f64.sqrt())) - libm::erf((0.0 - m) / (sig * 2f64.sqrt())));
        oracle_kernel(a - b, w * 2f64.sqrt()) * mass
    };
    let integral = 0.25 * (prod(0.3, 0.3) + 2.0 * prod(0.3, 0.7) + prod(0.7, 0.7));
    let expect = integral - 2.0 / 4.0 * (2.0 * oracle_kernel(0.4, w));
    assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
}

#[test]
fn variable_cost_grid_refinement() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let s = SampleSet::new(clusters(&mut rng, &[(0.4, 0.1, 80)])).unwrap();
    let cost_on = |g: usize| {
        let c = KdeConfig { grid_size: g, ..KdeConfig::default() };
        let grid = c.grid();
        let bws: Vec<f64> = grid.iter().map(|t| 0.04 + 0.02 * t).collect();
        variable_cost(&s, &BandwidthField { grid: &grid, bandwidths: &bws }).unwrap()
    };
    let (a, b) = (cost_on(512), cost_on(1023));
    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    assert!(a.is_finite());
}

#[test]
fn two_clusters_give_two_maxima() {
    let config = KdeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = SampleSet::new(clusters(&mut rng, &[(0.2, 0.01, 500), (0.8, 0.01, 500)])).unwrap();
    let d = estimate_density(&s, &config).unwrap();
    let maxima = local_maxima(&d.density);
    eprintln!("two clusters: gamma {} global {} maxima {:?}", d.gamma, d.global_bandwidth, maxima);
    assert_eq!(maxima.len(), 2);
}

#[test]
fn single_cluster_peak_near_mean() {
    let config = KdeConfig::default();
    for (sd, n) in [(0.02, 169), (0.08, 169), (0.05, 400)] {
        let values = quantile_cluster(0.45, sd, n);
        let mean = values.iter().sum::<f64>() / n as f64;
        let d = estimate_density(&SampleSet::new(values).unwrap(), &config).unwrap();
        let peaks = detect_peaks(&d.density, DEFAULT_PROMINENCE);
        assert_eq!(peaks.len(), 1, "sd={sd}: {peaks:?}");
        assert!((d.grid[peaks[0].index] - mean).abs() < 0.02);
    }
}

#[test]
fn uniform_density_is_flat_on_interior() {
    let config = KdeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let s = SampleSet::new((0..10_000).map(|_| rng.random::<f64>()).collect()).unwrap();
    let d = estimate_density(&s, &config).unwrap();
    let (lo, hi) = d
        .grid
        .iter()
        .zip(&d.density)
        .filter(|(t, _)| (0.1..=0.9).contains(*t))
        .fold((f64::INFINITY, 0.0f64), |(a, b), (_, &v)| (a.min(v), b.max(v)));
    eprintln!("uniform: gamma {} density in [{lo}, {hi}]", d.gamma);
    assert!(lo >= 0.75 && hi <= 1.25, "[{lo}, {hi}]");
}

#[test]
fn gridded_mass_bound_and_non_negativity() {
    let config = KdeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..3 {
        let values: Vec<f64> = (0..120).map(|_| 0.1 + 0.8 * rng.random::<f64>()).collect();
        let d = estimate_density(&SampleSet::new(values).unwrap(), &config).unwrap();
        assert!(d.density.iter().all(|&v| v >= 0.0));
        assert!(d.bandwidths.iter().all(|&v| v > 0.0));
        assert!(d.mass() >= 0.6, "{}", d.mass());
    }
}

#[test]
fn estimate_is_deterministic() {
    let config = KdeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let s = SampleSet::new(clusters(&mut rng, &[(0.3, 0.05, 100), (0.75, 0.03, 69)])).unwrap();
    let a = estimate_density(&s, &config).unwrap();
    let b = estimate_density(&s, &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fixed_gamma_mode_is_honoured() {
    let config = KdeConfig { gamma_mode: GammaMode::Fixed(0.5), ..KdeConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let s = SampleSet::new(clusters(&mut rng, &[(0.3, 0.05, 100)])).unwrap();
    assert_eq!(estimate_density(&s, &config).unwrap().gamma, 0.5);
}

#[test]
fn gamma_mode_parsing() {
    assert_eq!("search".parse::<GammaMode>().unwrap(), GammaMode::Search);
    assert_eq!("fixed:0.5".parse::<GammaMode>().unwrap(), GammaMode::Fixed(0.5));
    assert_eq!(GammaMode::Fixed(0.5).to_string(), "fixed:0.5");
    assert!("fixed:-1".parse::<GammaMode>().is_err());
    assert!("golden".parse::<GammaMode>().is_err());
    let json = serde_json::to_string(&KdeConfig::default()).unwrap();
    let back: KdeConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, KdeConfig::default());
}

/// Gaussian quantile by bisection on the erf-based CDF.
pub(crate) fn normal_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if 0.5 * (1.0 + libm::erf(mid / 2f64.sqrt())) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `n` samples at the mid-quantiles of `N(mu, sd)`: a cluster without
/// sampling noise.
pub(crate) fn quantile_cluster(mu: f64, sd: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| mu + sd * normal_quantile((i as f64 + 0.5) / n as f64)).collect()
}
