//! Slow, straight-from-definition reference implementations used by the
//! integration and acceptance tests.
#![allow(dead_code)]

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct C {
    pub re: f64,
    pub im: f64,
}

impl C {
    fn new(re: f64, im: f64) -> Self {
        C { re, im }
    }
    fn mul(self, o: C) -> C {
        C::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
    fn abs(self) -> f64 {
        (self.re * self.re + self.im * self.im).sqrt()
    }
}

/// Rows of `[r, g, b]` pixels, values in `[0, 1]`.
pub type Rgb = Vec<Vec<[f64; 3]>>;

pub fn psnr(a: &Rgb, b: &Rgb) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (pa, pb) in ra.iter().zip(rb) {
            for c in 0..3 {
                sum += (pa[c] - pb[c]).powi(2);
                n += 1.0;
            }
        }
    }
    10.0 * (1.0 / (sum / n)).log10()
}

pub fn luma(a: &Rgb) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| r.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect())
        .collect()
}

/// Mean SSIM over every full 11x11 window, statistics computed directly in
/// each window.
pub fn ssim(a: &Rgb, b: &Rgb) -> f64 {
    let (la, lb) = (luma(a), luma(b));
    let (h, w) = (la.len(), la[0].len());
    let mut win = [[0.0; 11]; 11];
    let mut total_w = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total_w += *v;
        }
    }
    let mut acc = 0.0;
    let mut count = 0.0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = win[i][j] / total_w;
                    ma += wt * la[y + i][x + j];
                    mb += wt * lb[y + i][x + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = win[i][j] / total_w;
                    let (da, db) = (la[y + i][x + j] - ma, lb[y + i][x + j] - mb);
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            }
            let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}

/// Direct 2-D DFT; `sign` is -1 for forward, +1 for inverse (unnormalized).
fn dft2(x: &[Vec<C>], sign: f64) -> Vec<Vec<C>> {
    let (h, w) = (x.len(), x[0].len());
    let mut out = vec![vec![C::new(0.0, 0.0); w]; h];
    for (u, out_row) in out.iter_mut().enumerate() {
        for (v, cell) in out_row.iter_mut().enumerate() {
            let mut s = C::new(0.0, 0.0);
            for (r, row) in x.iter().enumerate() {
                for (c, val) in row.iter().enumerate() {
                    let ang = sign * 2.0 * PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                    let e = C::new(ang.cos(), ang.sin());
                    let p = val.mul(e);
                    s.re += p.re;
                    s.im += p.im;
                }
            }
            *cell = s;
        }
    }
    out
}

fn idft2(x: &[Vec<C>]) -> Vec<Vec<C>> {
    let n = (x.len() * x[0].len()) as f64;
    dft2(x, 1.0)
        .into_iter()
        .map(|r| r.into_iter().map(|c| C::new(c.re / n, c.im / n)).collect())
        .collect()
}

/// Frequency of DFT index `i` on an axis of length `n`, in the convention of
/// the reference MATLAB code (odd lengths normalized by `n - 1`).
fn freq(i: usize, n: usize) -> f64 {
    let signed = if i < n.div_ceil(2) { i as f64 } else { i as f64 - n as f64 };
    if n % 2 == 1 {
        signed / (n - 1) as f64
    } else {
        signed / n as f64
    }
}

/// Phase congruency per the log-Gabor energy model.
pub fn phase_congruency(im: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (im.len(), im[0].len());
    let spectrum = dft2(&im.iter().map(|r| r.iter().map(|&v| C::new(v, 0.0)).collect()).collect::<Vec<_>>(), -1.0);
    let theta_sigma = PI / 4.0 / 1.2;
    let mut energy_all = vec![vec![0.0; w]; h];
    let mut an_all = vec![vec![0.0; w]; h];
    for o in 0..4 {
        let angle = o as f64 * PI / 4.0;
        let mut responses = Vec::new();
        let mut spatial_filters = Vec::new();
        let mut em_n = 0.0;
        for s in 0..4 {
            let fo = 1.0 / (6.0 * 2f64.powi(s));
            let mut filt = vec![vec![0.0; w]; h];
            for (u, row) in filt.iter_mut().enumerate() {
                for (v, f) in row.iter_mut().enumerate() {
                    if u == 0 && v == 0 {
                        continue;
                    }
                    let (x, y) = (freq(v, w), freq(u, h));
                    let r = (x * x + y * y).sqrt();
                    let th = (-y).atan2(x);
                    let radial = (-((r / fo).ln().powi(2)) / (2.0 * 0.55f64.ln().powi(2))).exp()
                        / (1.0 + (r / 0.45).powi(30));
                    let mut d = th - angle;
                    d = d.sin().atan2(d.cos()).abs();
                    *f = radial * (-(d * d) / (2.0 * theta_sigma * theta_sigma)).exp();
                }
            }
            if s == 0 {
                em_n = filt.iter().flatten().map(|v| v * v).sum();
            }
            let prod: Vec<Vec<C>> = spectrum
                .iter()
                .zip(&filt)
                .map(|(sr, fr)| sr.iter().zip(fr).map(|(c, &f)| C::new(c.re * f, c.im * f)).collect())
                .collect();
            responses.push(idft2(&prod));
            let sf = idft2(&filt.iter().map(|r| r.iter().map(|&v| C::new(v, 0.0)).collect()).collect::<Vec<_>>());
            spatial_filters.push(
                sf.iter()
                    .map(|r| r.iter().map(|c| c.re * ((h * w) as f64).sqrt()).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
            );
        }
        let mut sq: Vec<f64> = responses[0].iter().flatten().map(|c| c.re * c.re + c.im * c.im).collect();
        sq.sort_by(f64::total_cmp);
        let med = if sq.len() % 2 == 0 {
            (sq[sq.len() / 2 - 1] + sq[sq.len() / 2]) / 2.0
        } else {
            sq[sq.len() / 2]
        };
        let noise_power = (med / 2f64.ln()) / em_n;
        let mut a2 = 0.0;
        let mut aiaj = 0.0;
        for r in 0..h {
            for c in 0..w {
                for i in 0..4 {
                    a2 += spatial_filters[i][r][c].powi(2);
                    for j in i + 1..4 {
                        aiaj += spatial_filters[i][r][c] * spatial_filters[j][r][c];
                    }
                }
            }
        }
        let tau = ((2.0 * noise_power * a2 + 4.0 * noise_power * aiaj) / 2.0).sqrt();
        let threshold = (tau * (PI / 2.0).sqrt() + 2.0 * ((2.0 - PI / 2.0) * tau * tau).sqrt()) / 1.7;
        for r in 0..h {
            for c in 0..w {
                let (mut se, mut so, mut san) = (0.0, 0.0, 0.0);
                for resp in &responses {
                    se += resp[r][c].re;
                    so += resp[r][c].im;
                    san += resp[r][c].abs();
                }
                let norm = (se * se + so * so).sqrt() + 1e-4;
                let (me, mo) = (se / norm, so / norm);
                let mut e = 0.0;
                for resp in &responses {
                    let (re, im) = (resp[r][c].re, resp[r][c].im);
                    e += re * me + im * mo - (re * mo - im * me).abs();
                }
                energy_all[r][c] += (e - threshold).max(0.0);
                an_all[r][c] += san;
            }
        }
    }
    energy_all
        .iter()
        .zip(&an_all)
        .map(|(er, ar)| er.iter().zip(ar).map(|(e, a)| e / a).collect())
        .collect()
}

/// Gradient magnitude with the 3x3 Scharr pair, zero outside the image.
fn gradient(im: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (im.len() as isize, im[0].len() as isize);
    let px = |r: isize, c: isize| if r < 0 || c < 0 || r >= h || c >= w { 0.0 } else { im[r as usize][c as usize] };
    let mut out = vec![vec![0.0; w as usize]; h as usize];
    for r in 0..h {
        for c in 0..w {
            let gx = (3.0 * (px(r - 1, c - 1) - px(r - 1, c + 1))
                + 10.0 * (px(r, c - 1) - px(r, c + 1))
                + 3.0 * (px(r + 1, c - 1) - px(r + 1, c + 1)))
                / 16.0;
            let gy = (3.0 * (px(r - 1, c - 1) - px(r + 1, c - 1))
                + 10.0 * (px(r - 1, c) - px(r + 1, c))
                + 3.0 * (px(r - 1, c + 1) - px(r + 1, c + 1)))
                / 16.0;
            out[r as usize][c as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// FSIM of two RGB images of side <= 383 (no downsampling branch).
pub fn fsim(a: &Rgb, b: &Rgb) -> f64 {
    let scale = |l: Vec<Vec<f64>>| l.into_iter().map(|r| r.into_iter().map(|v| v * 255.0).collect()).collect::<Vec<Vec<f64>>>();
    let (ya, yb) = (scale(luma(a)), scale(luma(b)));
    let (pa, pb) = (phase_congruency(&ya), phase_congruency(&yb));
    let (ga, gb) = (gradient(&ya), gradient(&yb));
    let (mut num, mut den) = (0.0, 0.0);
    for r in 0..ya.len() {
        for c in 0..ya[0].len() {
            let (p1, p2) = (pa[r][c], pb[r][c]);
            let (g1, g2) = (ga[r][c], gb[r][c]);
            let spc = (2.0 * p1 * p2 + 0.85) / (p1 * p1 + p2 * p2 + 0.85);
            let sg = (2.0 * g1 * g2 + 160.0) / (g1 * g1 + g2 * g2 + 160.0);
            let m = p1.max(p2);
            num += spc * sg * m;
            den += m;
        }
    }
    num / den
}

/// Top-k hit test by rank counting: the correct item at index `c` ranks
/// below every item strictly closer, and below equally close items with a
/// smaller index.
pub fn topk_hit(dists: &[f64], labels: &[&str], want: &str, k: usize) -> bool {
    labels.iter().enumerate().filter(|(_, l)| **l == want).any(|(c, _)| {
        let ahead = dists
            .iter()
            .enumerate()
            .filter(|&(j, &d)| d < dists[c] || (d == dists[c] && j < c))
            .count();
        ahead < k
    })
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
