//! Raw NCHW compute kernels used by the tape ops.
//!
//! Every kernel processes the batch in order and accumulates parameter
//! gradients sequentially, so results are bitwise reproducible.

use rayon::prelude::*;

/// `C = alpha * op(A) * op(B) + beta * C` for row-major slices.
///
/// `op(A)` is `m x k`, `op(B)` is `k x n`. When `ta` is set, `a` holds the
/// `k x m` matrix; likewise `tb` means `b` holds `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above and the strides describe
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds one `C x H x W` image into a `(C*k*k) x (Ho*Wo)` column matrix.
pub fn im2col(img: &[f64], g: ConvGeom, col: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    debug_assert_eq!(col.len(), g.col_rows() * plane);
    for c in 0..g.channels {
        let src = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub fn col2im(col: &[f64], g: ConvGeom, img: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    img.fill(0.0);
    for c in 0..g.channels {
        let dst = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `w` is `Cout x Cin x k x k`; returns `N x Cout x Ho x Wo`.
pub fn conv2d_forward(
    x: &[f64],
    n: usize,
    g: ConvGeom,
    w: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let in_len = g.channels * g.height * g.width;
    let k = g.col_rows();
    let mut out = vec![0.0; n * cout * plane];
    out.par_chunks_mut(cout * plane)
        .enumerate()
        .for_each(|(i, o)| {
            let mut col = vec![0.0; k * plane];
            im2col(&x[i * in_len..(i + 1) * in_len], g, &mut col);
            gemm(cout, k, plane, 1.0, w, false, &col, false, 0.0, o);
            if let Some(b) = bias {
                for (c, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b[c]);
                }
            }
        });
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dw, db)` for the requested parts.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: ConvGeom,
    w: &[f64],
    cout: usize,
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let in_len = g.channels * g.height * g.width;
    let k = g.col_rows();

    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; n * in_len];
        dx.par_chunks_mut(in_len).enumerate().for_each(|(i, dxi)| {
            let mut dcol = vec![0.0; k * plane];
            let dyi = &dy[i * cout * plane..(i + 1) * cout * plane];
            gemm(k, cout, plane, 1.0, w, true, dyi, false, 0.0, &mut dcol);
            col2im(&dcol, g, dxi);
        });
        dx
    });

    let dw = want_dw.then(|| {
        let per_image: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut col = vec![0.0; k * plane];
                im2col(&x[i * in_len..(i + 1) * in_len], g, &mut col);
                let mut dwi = vec![0.0; cout * k];
                let dyi = &dy[i * cout * plane..(i + 1) * cout * plane];
                gemm(cout, plane, k, 1.0, dyi, false, &col, true, 0.0, &mut dwi);
                dwi
            })
            .collect();
        sum_in_order(per_image, cout * k)
    });

    let db = want_db.then(|| channel_sums(dy, n, cout, plane));
    (dx, dw, db)
}

/// Transposed convolution (the adjoint of [`conv2d_forward`] w.r.t. its
/// input). `x` is `N x Cin x H x W`, `w` is `Cin x Cout x k x k`; `g`
/// describes the *output* image (channels = Cout) seen as the input of the
/// corresponding forward convolution.
pub fn conv_transpose2d_forward(
    x: &[f64],
    n: usize,
    cin: usize,
    g: ConvGeom,
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (h, wd) = g.out_hw();
    let plane = h * wd;
    let out_len = g.channels * g.height * g.width;
    let k = g.col_rows();
    let mut out = vec![0.0; n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(i, o)| {
        let mut col = vec![0.0; k * plane];
        let xi = &x[i * cin * plane..(i + 1) * cin * plane];
        gemm(k, cin, plane, 1.0, w, true, xi, false, 0.0, &mut col);
        col2im(&col, g, o);
        if let Some(b) = bias {
            let oplane = g.height * g.width;
            for (c, chunk) in o.chunks_mut(oplane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[c]);
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    x: &[f64],
    n: usize,
    cin: usize,
    g: ConvGeom,
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (h, wd) = g.out_hw();
    let plane = h * wd;
    let out_len = g.channels * g.height * g.width;
    let k = g.col_rows();

    let cols: Vec<Vec<f64>> = if want_dx || want_dw {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut col = vec![0.0; k * plane];
                im2col(&dy[i * out_len..(i + 1) * out_len], g, &mut col);
                col
            })
            .collect()
    } else {
        Vec::new()
    };

    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; n * cin * plane];
        dx.par_chunks_mut(cin * plane)
            .zip(cols.par_iter())
            .for_each(|(dxi, col)| gemm(cin, k, plane, 1.0, w, false, col, false, 0.0, dxi));
        dx
    });

    let dw = want_dw.then(|| {
        let per_image: Vec<Vec<f64>> = cols
            .par_iter()
            .enumerate()
            .map(|(i, col)| {
                let mut dwi = vec![0.0; cin * k];
                let xi = &x[i * cin * plane..(i + 1) * cin * plane];
                gemm(cin, plane, k, 1.0, xi, false, col, true, 0.0, &mut dwi);
                dwi
            })
            .collect();
        sum_in_order(per_image, cin * k)
    });

    let db = want_db.then(|| channel_sums(dy, n, g.channels, g.height * g.width));
    (dx, dw, db)
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// Per-channel sums over batch and spatial positions.
pub fn channel_sums(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (i * c + ch) * plane;
            *o += x[start..start + plane].iter().sum::<f64>();
        }
    }
    out
}

/// 2x2 stride-2 max pooling; returns the pooled values and, for each output,
/// the flat input index it was taken from. Odd trailing rows/columns are
/// dropped.
pub fn maxpool2_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
