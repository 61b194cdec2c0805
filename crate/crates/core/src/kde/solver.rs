use std::cell::OnceCell;

use super::{gauss, KdeConfig, LocalBandwidth, SUPPORT};
use crate::golden;

/// Sample sets larger than this are linearly binned before bandwidth
/// selection.
const BIN_LIMIT: usize = 4096;
const BINS: usize = 4096;
/// Minimum sample weight a window needs for its local cost to be used.
const MIN_WINDOW_MASS: f64 = 2.0;

/// Sorted point masses; either the raw samples with unit weight or a
/// linear binning of them. Weights always sum to the sample count.
#[derive(Clone, Debug)]
pub(crate) struct PointMass {
    xs: Vec<f64>,
    ws: Vec<f64>,
    cumulative: Vec<f64>,
    total: f64,
}

impl PointMass {
    pub fn exact(values: &[f64]) -> Self {
        let mut xs = values.to_vec();
        xs.sort_by(f64::total_cmp);
        let ws = vec![1.0; xs.len()];
        Self::with_weights(xs, ws, values.len() as f64)
    }

    pub fn from_samples(values: &[f64]) -> Self {
        if values.len() <= BIN_LIMIT {
            return Self::exact(values);
        }
        let scale = (BINS - 1) as f64;
        let mut bins = vec![0.0; BINS];
        for &v in values {
            let pos = v * scale;
            let k = (pos.floor() as usize).min(BINS - 2);
            let frac = pos - k as f64;
            bins[k] += 1.0 - frac;
            bins[k + 1] += frac;
        }
        let (xs, ws) = bins
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, &w)| (k as f64 / scale, w))
            .unzip();
        Self::with_weights(xs, ws, values.len() as f64)
    }

    fn with_weights(xs: Vec<f64>, ws: Vec<f64>, total: f64) -> Self {
        let mut cumulative = Vec::with_capacity(ws.len() + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for w in &ws {
            acc += w;
            cumulative.push(acc);
        }
        Self {
            xs,
            ws,
            cumulative,
            total,
        }
    }

    /// Total weight of the points in `[lo, hi]`.
    pub fn mass_within(&self, lo: f64, hi: f64) -> f64 {
        let a = self.xs.partition_point(|&p| p < lo);
        let b = self.xs.partition_point(|&p| p <= hi);
        self.cumulative[b] - self.cumulative[a]
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn weights(&self) -> &[f64] {
        &self.ws
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// `Σ w_b H_bw(x − x_b)` over points within `support·bw` of `x`.
    pub fn kernel_sum(&self, x: f64, bw: f64, support: f64) -> f64 {
        let reach = support * bw;
        let lo = self.xs.partition_point(|&p| p < x - reach);
        let hi = self.xs.partition_point(|&p| p <= x + reach);
        self.weighted_sum(lo, hi, x, bw)
    }

    fn weighted_sum(&self, lo: usize, hi: usize, x: f64, bw: f64) -> f64 {
        self.weighted_sums(lo, hi, x, bw).0
    }

    /// Kernel sum and its derivative in `x` over points `lo..hi`.
    fn weighted_sums(&self, lo: usize, hi: usize, x: f64, bw: f64) -> (f64, f64) {
        let inv = 0.5 / (bw * bw);
        let (mut s, mut ds) = (0.0, 0.0);
        for (&p, &w) in self.xs[lo..hi].iter().zip(&self.ws[lo..hi]) {
            let d = x - p;
            let e = w * (-d * d * inv).exp();
            s += e;
            ds -= d * e;
        }
        let norm = super::INV_SQRT_2PI / bw;
        (s * norm, ds * norm / (bw * bw))
    }
}

/// Everything needed to evaluate the window-localised cost of one fixed
/// bandwidth at any centre and window length.
///
/// The `ψ` sum equals `∫_L^R λ̂_ω²`, tabulated here as a cumulative
/// integral of the cubic Hermite interpolant of `λ̂²` (values and slopes are
/// both known in closed form) on nodes of spacing `ω/8`. The cross term is a prefix
/// sum over the sorted points of `w_b (Σ_{b'} w_{b'} H_ω(x_b − x_{b'}) − H_ω(0))`.
#[derive(Debug)]
pub(crate) struct CostProfile {
    origin: f64,
    step: f64,
    sq: Vec<f64>,
    slope: Vec<f64>,
    cumulative: Vec<f64>,
    cross_prefix: Vec<f64>,
    norm: f64,
}

impl CostProfile {
    pub fn new(points: &PointMass, bw: f64) -> Self {
        let n = points.total();
        let step = (bw / 8.0).min(1.0 / 64.0);
        let reach = SUPPORT * bw;
        let xs = points.xs();
        let origin = xs[0] - reach;
        let end = xs[xs.len() - 1] + reach;
        let nodes = ((end - origin) / step).ceil() as usize + 1;

        let mut sq = Vec::with_capacity(nodes);
        let mut slope = Vec::with_capacity(nodes);
        let (mut lo, mut hi) = (0, 0);
        for k in 0..nodes {
            let x = origin + k as f64 * step;
            while lo < xs.len() && xs[lo] < x - reach {
                lo += 1;
            }
            while hi < xs.len() && xs[hi] <= x + reach {
                hi += 1;
            }
            let (d, dd) = if lo < hi {
                let (d, dd) = points.weighted_sums(lo, hi, x, bw);
                (d / n, dd / n)
            } else {
                (0.0, 0.0)
            };
            sq.push(d * d);
            slope.push(2.0 * d * dd);
        }
        let mut cumulative = Vec::with_capacity(nodes);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for k in 1..nodes {
            acc += 0.5 * step * (sq[k - 1] + sq[k]) + step * step / 12.0 * (slope[k - 1] - slope[k]);
            cumulative.push(acc);
        }

        let self_term = gauss(0.0, bw);
        let mut cross_prefix = Vec::with_capacity(xs.len() + 1);
        let mut acc = 0.0;
        cross_prefix.push(0.0);
        for (&x, &w) in xs.iter().zip(points.weights()) {
            acc += w * (points.kernel_sum(x, bw, SUPPORT) - self_term);
            cross_prefix.push(acc);
        }
        Self {
            origin,
            step,
            sq,
            slope,
            cumulative,
            cross_prefix,
            norm: n * n,
        }
    }

    /// `∫_{-∞}^x λ̂²` from the Hermite interpolant.
    fn integral_to(&self, x: f64) -> f64 {
        let last = self.sq.len() - 1;
        let pos = (x - self.origin) / self.step;
        if pos <= 0.0 {
            return 0.0;
        }
        if pos >= last as f64 {
            return self.cumulative[last];
        }
        let k = pos as usize;
        let h = self.step;
        let t = pos - k as f64;
        let (t2, t3, t4) = (t * t, t * t * t, t * t * t * t);
        let partial = self.sq[k] * (0.5 * t4 - t3 + t)
            + h * self.slope[k] * (0.25 * t4 - 2.0 / 3.0 * t3 + 0.5 * t2)
            + self.sq[k + 1] * (t3 - 0.5 * t4)
            + h * self.slope[k + 1] * (0.25 * t4 - t3 / 3.0);
        self.cumulative[k] + h * partial
    }

    pub fn local_cost(&self, xs: &[f64], center: f64, window: f64) -> f64 {
        let (l, r) = (center - 0.5 * window, center + 0.5 * window);
        let squared = self.integral_to(r) - self.integral_to(l);
        let lo = xs.partition_point(|&p| p < l);
        let hi = xs.partition_point(|&p| p <= r);
        let cross = self.cross_prefix[hi] - self.cross_prefix[lo];
        (squared - 2.0 * cross / self.norm) / window
    }

    pub fn global_cost(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1]
            - 2.0 * self.cross_prefix[self.cross_prefix.len() - 1] / self.norm
    }
}

/// Bandwidth selection on a geometric lattice spanning the configured
/// bracket. Profiles are built lazily, once per lattice bandwidth.
pub(crate) struct BandwidthSolver<'a> {
    points: &'a PointMass,
    config: &'a KdeConfig,
    lattice: Vec<f64>,
    profiles: Vec<OnceCell<CostProfile>>,
}

impl<'a> BandwidthSolver<'a> {
    pub fn new(points: &'a PointMass, config: &'a KdeConfig) -> Self {
        let [lo, hi] = config.bracket();
        let count = config.bandwidth_lattice;
        let ratio = (hi / lo).ln() / (count - 1) as f64;
        let lattice = (0..count)
            .map(|i| {
                if i == count - 1 {
                    hi
                } else {
                    lo * (ratio * i as f64).exp()
                }
            })
            .collect();
        Self {
            points,
            config,
            lattice,
            profiles: (0..count).map(|_| OnceCell::new()).collect(),
        }
    }

    pub fn bandwidth(&self, index: usize) -> f64 {
        self.lattice[index]
    }

    fn profile(&self, index: usize) -> &CostProfile {
        self.profiles[index].get_or_init(|| CostProfile::new(self.points, self.lattice[index]))
    }

    pub fn global_optimum(&self) -> usize {
        golden::minimize_index(|i| self.profile(i).global_cost(), 0, self.lattice.len() - 1).0
    }

    pub fn local_optimum(&self, center: f64, window: f64) -> usize {
        let xs = self.points.xs();
        golden::minimize_index(
            |i| self.profile(i).local_cost(xs, center, window),
            0,
            self.lattice.len() - 1,
        )
        .0
    }

    /// Fixed-point alternation at every grid point, seeded at `start`.
    ///
    /// The iteration map is deterministic on a finite lattice, so a revisited
    /// index means a cycle; the iterate the cap would have stopped on is then
    /// read off the cycle instead of running it out.
    pub fn local_bandwidths(&self, gamma: f64, start: usize, grid: &[f64]) -> Vec<LocalBandwidth> {
        let max_iters = self.config.fixed_point_max_iters;
        let tol = self.config.tolerance;
        grid.iter()
            .map(|&t| {
                let mut idx = start;
                let mut history = vec![start];
                let mut converged = false;
                for _ in 0..max_iters {
                    let window = self.config.window_for(self.lattice[idx], gamma);
                    // fewer than two samples in the window leave the cost
                    // without a cross term; the iterate stays where it is
                    let mass = self.points.mass_within(t - 0.5 * window, t + 0.5 * window);
                    let next = if mass < MIN_WINDOW_MASS {
                        idx
                    } else {
                        self.local_optimum(t, window)
                    };
                    history.push(next);
                    let rel = (self.lattice[next] - self.lattice[idx]).abs() / self.lattice[idx];
                    if rel < tol {
                        converged = true;
                        idx = next;
                        break;
                    }
                    if let Some(first) = history[..history.len() - 1].iter().position(|&h| h == next) {
                        let period = history.len() - 1 - first;
                        idx = history[first + (max_iters - first) % period];
                        break;
                    }
                    idx = next;
                }
                LocalBandwidth {
                    point: t,
                    bandwidth: self.lattice[idx],
                    window: self.config.window_for(self.lattice[idx], gamma),
                    converged,
                    history: history.iter().map(|&i| self.lattice[i]).collect(),
                }
            })
            .collect()
    }
}
