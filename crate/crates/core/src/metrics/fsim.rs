//! Feature similarity (FSIM) on a single luminance channel: phase
//! congruency from a log-Gabor bank and Scharr gradient magnitude.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::{Error, Result};

const NSCALE: usize = 4;
const NORIENT: usize = 4;
const MIN_WAVELENGTH: f64 = 6.0;
const MULT: f64 = 2.0;
const SIGMA_ONF: f64 = 0.55;
const D_THETA_ON_SIGMA: f64 = 1.2;
const NOISE_K: f64 = 2.0;
const EPSILON: f64 = 1e-4;
const T1: f64 = 0.85;
const T2: f64 = 160.0;

pub const MIN_SIDE: usize = 32;

/// FSIM between two luminance images on the 0-255 scale.
pub fn fsim_luma(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("FSIM shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (rows, cols) = a.dim();
    if rows.min(cols) < MIN_SIDE {
        return Err(Error::invalid(format!(
            "FSIM needs both sides >= {MIN_SIDE}, got {rows}x{cols}"
        )));
    }
    let f = ((rows.min(cols) as f64 / 256.0).round() as usize).max(1);
    let (y1, y2) = (downsample(a, f), downsample(b, f));

    let bank = FilterBank::new(y1.dim());
    let pc1 = bank.phase_congruency(&y1);
    let pc2 = bank.phase_congruency(&y2);
    let g1 = gradient_magnitude(&y1);
    let g2 = gradient_magnitude(&y2);

    let (mut num, mut den, mut plain) = (0.0, 0.0, 0.0);
    for (((&p1, &p2), &m1), &m2) in pc1.iter().zip(&pc2).zip(&g1).zip(&g2) {
        let pc_sim = (2.0 * p1 * p2 + T1) / (p1 * p1 + p2 * p2 + T1);
        let g_sim = (2.0 * m1 * m2 + T2) / (m1 * m1 + m2 * m2 + T2);
        let pcm = p1.max(p2);
        num += g_sim * pc_sim * pcm;
        den += pcm;
        plain += g_sim * pc_sim;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        // no phase structure in either image: unweighted mean similarity
        Ok(plain / pc1.len() as f64)
    }
}

/// `F×F` box average followed by keeping every `F`-th sample.
fn downsample(img: ArrayView2<'_, f64>, f: usize) -> Array2<f64> {
    if f == 1 {
        return img.to_owned();
    }
    let kernel = Array2::from_elem((f, f), 1.0 / (f * f) as f64);
    let smooth = conv2_same(img, kernel.view());
    smooth.slice(s![..;f, ..;f]).to_owned()
}

/// Two-dimensional convolution (kernel flipped), zero padded, cropped to
/// the input size with the kernel centre at `floor(m/2)`.
fn conv2_same(img: ArrayView2<'_, f64>, kernel: ArrayView2<'_, f64>) -> Array2<f64> {
    let (rows, cols) = img.dim();
    let (kr, kc) = kernel.dim();
    let (or, oc) = ((kr / 2) as isize, (kc / 2) as isize);
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let mut acc = 0.0;
        for a in 0..kr {
            let y = i as isize + or - a as isize;
            if y < 0 || y >= rows as isize {
                continue;
            }
            for b in 0..kc {
                let x = j as isize + oc - b as isize;
                if x < 0 || x >= cols as isize {
                    continue;
                }
                acc += kernel[[a, b]] * img[[y as usize, x as usize]];
            }
        }
        acc
    })
}

fn gradient_magnitude(img: &Array2<f64>) -> Array2<f64> {
    let dx = ndarray::arr2(&[[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]]) / 16.0;
    let dy = dx.t().to_owned();
    let gx = conv2_same(img.view(), dx.view());
    let gy = conv2_same(img.view(), dy.view());
    ndarray::Zip::from(&gx).and(&gy).map_collect(|&x, &y| (x * x + y * y).sqrt())
}

/// Frequency coordinate of FFT bin `i` out of `n`, laid out as an
/// un-shifted grid of the normalised range used for the filters.
fn freq(i: usize, n: usize) -> f64 {
    let m = (i + n / 2) % n;
    if n % 2 == 1 {
        (m as f64 - (n - 1) as f64 / 2.0) / (n - 1).max(1) as f64
    } else {
        (m as f64 - (n / 2) as f64) / n as f64
    }
}

struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    /// In-place transform of a row-major buffer; the inverse is scaled by
    /// `1/(rows·cols)`.
    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let (row_fft, col_fft) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for row in data.chunks_exact_mut(self.cols) {
            row_fft.process(row);
        }
        let mut column = vec![Complex64::default(); self.rows];
        for c in 0..self.cols {
            for r in 0..self.rows {
                column[r] = data[r * self.cols + c];
            }
            col_fft.process(&mut column);
            for r in 0..self.rows {
                data[r * self.cols + c] = column[r];
            }
        }
        if inverse {
            let scale = 1.0 / (self.rows * self.cols) as f64;
            for v in data.iter_mut() {
                *v *= scale;
            }
        }
    }
}

struct FilterBank {
    rows: usize,
    cols: usize,
    fft: Fft2,
    /// `filters[o][s]`, frequency domain, row-major.
    filters: Vec<Vec<Vec<f64>>>,
    /// Per orientation: energy of the finest filter, then the sums of
    /// squared spatial filters and of their pairwise products, all used by
    /// the noise threshold.
    noise_terms: Vec<(f64, f64, f64)>,
}

impl FilterBank {
    fn new((rows, cols): (usize, usize)) -> Self {
        let n = rows * cols;
        let theta_sigma = PI / NORIENT as f64 / D_THETA_ON_SIGMA;
        let mut radius = vec![0.0; n];
        let mut sin_t = vec![0.0; n];
        let mut cos_t = vec![0.0; n];
        let mut lowpass = vec![0.0; n];
        for r in 0..rows {
            let y = freq(r, rows);
            for c in 0..cols {
                let x = freq(c, cols);
                let i = r * cols + c;
                let rad = (x * x + y * y).sqrt();
                lowpass[i] = 1.0 / (1.0 + (rad / 0.45).powi(30));
                radius[i] = rad;
                let theta = (-y).atan2(x);
                sin_t[i] = theta.sin();
                cos_t[i] = theta.cos();
            }
        }
        radius[0] = 1.0;

        let log_gabor: Vec<Vec<f64>> = (0..NSCALE)
            .map(|s| {
                let fo = 1.0 / (MIN_WAVELENGTH * MULT.powi(s as i32));
                let denom = 2.0 * SIGMA_ONF.ln().powi(2);
                let mut g: Vec<f64> = radius
                    .iter()
                    .zip(&lowpass)
                    .map(|(&r, &lp)| (-(r / fo).ln().powi(2) / denom).exp() * lp)
                    .collect();
                g[0] = 0.0;
                g
            })
            .collect();

        let fft = Fft2::new(rows, cols);
        let mut filters = Vec::with_capacity(NORIENT);
        let mut noise_terms = Vec::with_capacity(NORIENT);
        for o in 0..NORIENT {
            let angle = o as f64 * PI / NORIENT as f64;
            let (sa, ca) = angle.sin_cos();
            let spread: Vec<f64> = (0..n)
                .map(|i| {
                    let ds = sin_t[i] * ca - cos_t[i] * sa;
                    let dc = cos_t[i] * ca + sin_t[i] * sa;
                    let dtheta = ds.atan2(dc).abs();
                    (-dtheta * dtheta / (2.0 * theta_sigma * theta_sigma)).exp()
                })
                .collect();
            let bank: Vec<Vec<f64>> = log_gabor
                .iter()
                .map(|g| g.iter().zip(&spread).map(|(a, b)| a * b).collect())
                .collect();

            let em_n: f64 = bank[0].iter().map(|v| v * v).sum();
            let spatial: Vec<Vec<f64>> = bank
                .iter()
                .map(|f| {
                    let mut buf: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                    fft.run(&mut buf, true);
                    let scale = (n as f64).sqrt();
                    buf.iter().map(|c| c.re * scale).collect()
                })
                .collect();
            let sum_an2: f64 = spatial.iter().flat_map(|f| f.iter().map(|v| v * v)).sum();
            let mut sum_aiaj = 0.0;
            for si in 0..NSCALE {
                for sj in si + 1..NSCALE {
                    sum_aiaj += spatial[si].iter().zip(&spatial[sj]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            noise_terms.push((em_n, sum_an2, sum_aiaj));
            filters.push(bank);
        }
        Self {
            rows,
            cols,
            fft,
            filters,
            noise_terms,
        }
    }

    fn phase_congruency(&self, img: &Array2<f64>) -> Array2<f64> {
        let n = self.rows * self.cols;
        let mut spectrum: Vec<Complex64> = img.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.run(&mut spectrum, false);

        let mut energy_all = vec![0.0; n];
        let mut an_all = vec![0.0; n];
        for (bank, &(em_n, sum_an2, sum_aiaj)) in self.filters.iter().zip(&self.noise_terms) {
            let responses: Vec<Vec<Complex64>> = bank
                .iter()
                .map(|f| {
                    let mut eo: Vec<Complex64> = spectrum.iter().zip(f).map(|(&z, &w)| z * w).collect();
                    self.fft.run(&mut eo, true);
                    eo
                })
                .collect();
            let mut sum_e = vec![0.0; n];
            let mut sum_o = vec![0.0; n];
            for eo in &responses {
                for i in 0..n {
                    sum_e[i] += eo[i].re;
                    sum_o[i] += eo[i].im;
                    an_all[i] += eo[i].norm();
                }
            }
            let mut energy = vec![0.0; n];
            for i in 0..n {
                let x = (sum_e[i] * sum_e[i] + sum_o[i] * sum_o[i]).sqrt() + EPSILON;
                let (me, mo) = (sum_e[i] / x, sum_o[i] / x);
                for eo in &responses {
                    let (e, o) = (eo[i].re, eo[i].im);
                    energy[i] += e * me + o * mo - (e * mo - o * me).abs();
                }
            }

            let mut power: Vec<f64> = responses[0].iter().map(|z| z.norm_sqr()).collect();
            let median_e2n = median(&mut power);
            let mean_e2n = -median_e2n / 0.5f64.ln();
            let noise_power = mean_e2n / em_n;
            let est_noise_energy2 = 2.0 * noise_power * sum_an2 + 4.0 * noise_power * sum_aiaj;
            let tau = (est_noise_energy2 / 2.0).sqrt();
            let est_noise = tau * (PI / 2.0).sqrt();
            let est_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
            let threshold = (est_noise + NOISE_K * est_sigma) / 1.7;
            for i in 0..n {
                energy_all[i] += (energy[i] - threshold).max(0.0);
            }
        }
        let pc: Vec<f64> = energy_all
            .iter()
            .zip(&an_all)
            .map(|(&e, &a)| if a > 0.0 { e / a } else { 0.0 })
            .collect();
        Array2::from_shape_vec((self.rows, self.cols), pc).expect("shape matches buffer")
    }
}

/// Median with the two middle values averaged for even lengths.
fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
