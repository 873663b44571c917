//! Feature Similarity (FSIM) on luma, with phase congruency from a bank of
//! log-Gabor filters (4 scales, 4 orientations) and Scharr gradients.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

const NSCALE: usize = 4;
const NORIENT: usize = 4;
const MIN_WAVELENGTH: f64 = 6.0;
const MULT: f64 = 2.0;
const SIGMA_ON_F: f64 = 0.55;
const D_THETA_ON_SIGMA: f64 = 1.2;
const NOISE_K: f64 = 2.0;
const PC_EPS: f64 = 1e-4;
const T1: f64 = 0.85;
const T2: f64 = 160.0;

pub const MIN_SIDE: usize = 32;

/// A row-major real plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Plane {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Normalized frequency coordinates along one axis, already `ifftshift`ed
/// so index 0 is the DC term.
fn freq_axis(n: usize) -> Vec<f64> {
    let centred: Vec<f64> = if n % 2 == 1 {
        let h = (n - 1) as f64 / 2.0;
        (0..n).map(|i| (i as f64 - h) / (n - 1) as f64).collect()
    } else {
        (0..n).map(|i| (i as f64 - (n / 2) as f64) / n as f64).collect()
    };
    let shift = n / 2;
    (0..n).map(|i| centred[(i + shift) % n]).collect()
}

fn fft2(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    for row in data.chunks_mut(cols) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = data[r * cols + c];
        }
        col_fft.process(&mut col);
        for r in 0..rows {
            data[r * cols + c] = col[r];
        }
    }
    if inverse {
        let s = 1.0 / (rows * cols) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Phase congruency map of a grayscale plane.
pub fn phase_congruency(im: &Plane) -> Plane {
    let (rows, cols) = (im.rows, im.cols);
    let n = rows * cols;
    let fx = freq_axis(cols);
    let fy = freq_axis(rows);
    let mut radius = vec![0.0; n];
    let mut sin_t = vec![0.0; n];
    let mut cos_t = vec![0.0; n];
    let mut lowpass = vec![0.0; n];
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (fx[c], fy[r]);
            let rad = x.hypot(y);
            let theta = (-y).atan2(x);
            let i = r * cols + c;
            lowpass[i] = 1.0 / (1.0 + (rad / 0.45).powi(30));
            radius[i] = if i == 0 { 1.0 } else { rad };
            sin_t[i] = theta.sin();
            cos_t[i] = theta.cos();
        }
    }

    let log_gabor: Vec<Vec<f64>> = (0..NSCALE)
        .map(|s| {
            let fo = 1.0 / (MIN_WAVELENGTH * MULT.powi(s as i32));
            let denom = 2.0 * SIGMA_ON_F.ln().powi(2);
            let mut g: Vec<f64> = radius
                .iter()
                .zip(&lowpass)
                .map(|(&r, &lp)| (-(r / fo).ln().powi(2) / denom).exp() * lp)
                .collect();
            g[0] = 0.0;
            g
        })
        .collect();
    let theta_sigma = PI / NORIENT as f64 / D_THETA_ON_SIGMA;
    let spread: Vec<Vec<f64>> = (0..NORIENT)
        .map(|o| {
            let angle = o as f64 * PI / NORIENT as f64;
            let (sa, ca) = angle.sin_cos();
            (0..n)
                .map(|i| {
                    let ds = sin_t[i] * ca - cos_t[i] * sa;
                    let dc = cos_t[i] * ca + sin_t[i] * sa;
                    let dtheta = ds.atan2(dc).abs();
                    (-dtheta * dtheta / (2.0 * theta_sigma * theta_sigma)).exp()
                })
                .collect()
        })
        .collect();

    let mut image_fft: Vec<Complex64> = im.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut image_fft, rows, cols, false);

    let mut energy_all = vec![0.0; n];
    let mut an_all = vec![0.0; n];
    for spread_o in &spread {
        let mut sum_e = vec![0.0; n];
        let mut sum_o = vec![0.0; n];
        let mut sum_an = vec![0.0; n];
        let mut eo_all = Vec::with_capacity(NSCALE);
        let mut ifft_filters = Vec::with_capacity(NSCALE);
        let mut em_n = 0.0;
        for (s, lg) in log_gabor.iter().enumerate() {
            let filter: Vec<f64> = lg.iter().zip(spread_o).map(|(a, b)| a * b).collect();
            if s == 0 {
                em_n = filter.iter().map(|v| v * v).sum();
            }
            let mut f: Vec<Complex64> = filter.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft2(&mut f, rows, cols, true);
            let scale = (n as f64).sqrt();
            ifft_filters.push(f.iter().map(|v| v.re * scale).collect::<Vec<f64>>());

            let mut eo: Vec<Complex64> = image_fft.iter().zip(&filter).map(|(a, &b)| a * b).collect();
            fft2(&mut eo, rows, cols, true);
            for i in 0..n {
                sum_an[i] += eo[i].norm();
                sum_e[i] += eo[i].re;
                sum_o[i] += eo[i].im;
            }
            eo_all.push(eo);
        }
        let mut energy = vec![0.0; n];
        for i in 0..n {
            let x_energy = sum_e[i].hypot(sum_o[i]) + PC_EPS;
            let (mean_e, mean_o) = (sum_e[i] / x_energy, sum_o[i] / x_energy);
            for eo in &eo_all {
                let (e, o) = (eo[i].re, eo[i].im);
                energy[i] += e * mean_e + o * mean_o - (e * mean_o - o * mean_e).abs();
            }
        }
        let median_e2n = median(eo_all[0].iter().map(|v| v.norm_sqr()).collect());
        let mean_e2n = -median_e2n / 0.5f64.ln();
        let noise_power = mean_e2n / em_n;
        let mut sum_an2 = 0.0;
        let mut sum_aiaj = 0.0;
        for i in 0..n {
            for si in 0..NSCALE {
                sum_an2 += ifft_filters[si][i] * ifft_filters[si][i];
                for sj in si + 1..NSCALE {
                    sum_aiaj += ifft_filters[si][i] * ifft_filters[sj][i];
                }
            }
        }
        let noise_energy2 = 2.0 * noise_power * sum_an2 + 4.0 * noise_power * sum_aiaj;
        let tau = (noise_energy2 / 2.0).sqrt();
        let noise_mean = tau * (PI / 2.0).sqrt();
        let noise_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
        let t = (noise_mean + NOISE_K * noise_sigma) / 1.7;
        for i in 0..n {
            energy_all[i] += (energy[i] - t).max(0.0);
            an_all[i] += sum_an[i];
        }
    }
    Plane {
        rows,
        cols,
        data: energy_all.iter().zip(&an_all).map(|(e, a)| e / a).collect(),
    }
}

/// 2-D convolution with zero padding, output the size of the input
/// (centre of the kernel aligned as in MATLAB's `conv2(..., 'same')`).
pub fn conv2_same(im: &Plane, kernel: &[[f64; 3]; 3]) -> Plane {
    let (rows, cols) = (im.rows, im.cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (i, krow) in kernel.iter().enumerate() {
                for (j, &k) in krow.iter().enumerate() {
                    let (rr, cc) = (r as isize + 1 - i as isize, c as isize + 1 - j as isize);
                    if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
                        acc += k * im.at(rr as usize, cc as usize);
                    }
                }
            }
            out[r * cols + c] = acc;
        }
    }
    Plane { rows, cols, data: out }
}

pub const SCHARR_X: [[f64; 3]; 3] = [
    [3.0 / 16.0, 0.0, -3.0 / 16.0],
    [10.0 / 16.0, 0.0, -10.0 / 16.0],
    [3.0 / 16.0, 0.0, -3.0 / 16.0],
];
pub const SCHARR_Y: [[f64; 3]; 3] = [
    [3.0 / 16.0, 10.0 / 16.0, 3.0 / 16.0],
    [0.0, 0.0, 0.0],
    [-3.0 / 16.0, -10.0 / 16.0, -3.0 / 16.0],
];

fn gradient_magnitude(im: &Plane) -> Vec<f64> {
    let gx = conv2_same(im, &SCHARR_X);
    let gy = conv2_same(im, &SCHARR_Y);
    gx.data.iter().zip(&gy.data).map(|(x, y)| x.hypot(*y)).collect()
}

/// Averages `f x f` blocks (zero padded, centred as `conv2 'same'`) and keeps
/// every `f`-th sample, as the reference implementation does for large images.
fn downsample(im: &Plane, f: usize) -> Plane {
    if f <= 1 {
        return im.clone();
    }
    let (rows, cols) = (im.rows, im.cols);
    let half = (f - 1) as isize - (f as isize - 1) / 2;
    let w = 1.0 / (f * f) as f64;
    let mut data = Vec::new();
    let mut out_rows = 0;
    let mut out_cols = 0;
    for r in (0..rows).step_by(f) {
        out_rows += 1;
        out_cols = 0;
        for c in (0..cols).step_by(f) {
            out_cols += 1;
            let mut acc = 0.0;
            for i in 0..f as isize {
                for j in 0..f as isize {
                    let (rr, cc) = (r as isize + half - i, c as isize + half - j);
                    if rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols {
                        acc += im.at(rr as usize, cc as usize);
                    }
                }
            }
            data.push(acc * w);
        }
    }
    Plane {
        rows: out_rows,
        cols: out_cols,
        data,
    }
}

/// Luma on the 0..255 scale.
pub fn luma_plane(img: &ImageTensor) -> Plane {
    Plane {
        rows: img.height(),
        cols: img.width(),
        data: img.luma().into_iter().map(|v| v * 255.0).collect(),
    }
}

/// FSIM between two planes on the 0..255 scale.
pub fn fsim_planes(a: &Plane, b: &Plane) -> f64 {
    let f = ((a.rows.min(a.cols) as f64 / 256.0).round() as usize).max(1);
    let (a, b) = (downsample(a, f), downsample(b, f));
    let pc1 = phase_congruency(&a);
    let pc2 = phase_congruency(&b);
    let g1 = gradient_magnitude(&a);
    let g2 = gradient_magnitude(&b);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..a.data.len() {
        let (p1, p2) = (pc1.data[i], pc2.data[i]);
        let s_pc = (2.0 * p1 * p2 + T1) / (p1 * p1 + p2 * p2 + T1);
        let s_g = (2.0 * g1[i] * g2[i] + T2) / (g1[i] * g1[i] + g2[i] * g2[i] + T2);
        let pcm = p1.max(p2);
        num += s_g * s_pc * pcm;
        den += pcm;
    }
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

pub fn fsim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "fsim: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if a.height().min(a.width()) < MIN_SIDE {
        return Err(Error::Shape(format!("fsim needs images of at least {MIN_SIDE}x{MIN_SIDE}")));
    }
    Ok(fsim_planes(&luma_plane(a), &luma_plane(b)))
}
