use crate::autograd::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Smallest and largest probability fed to a logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

/// Distance below which a sampling coordinate is treated as lying exactly
/// on a pixel centre. Keeps identity warps exact.
const SNAP_EPS: f64 = 1e-9;

const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    LinComb(Vec<(Var, f64)>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    ConvT2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cin: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh(Var),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        arg: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    AffineGrid {
        params: Var,
        height: usize,
        width: usize,
    },
    GridSample {
        x: Var,
        grid: Var,
    },
    MeanSquaredDiff(Var, Var),
    MeanNegLog {
        x: Var,
        complement: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch-norm op.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<f64>,
    /// Elements reduced per channel.
    pub count: usize,
}

/// Reverse-mode automatic differentiation over a linear record of ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar w.r.t. every recorded value that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Weighted sum of equally shaped values.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let first = self.value(terms[0].0);
        let mut out = Tensor::zeros(first.shape());
        for &(v, c) in terms {
            assert_eq!(self.shape(v), out.shape(), "lin_comb shape mismatch");
            out.axpy(c, self.value(v));
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(out, Op::LinComb(terms.to_vec()), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.lin_comb(&[(a, 1.0), (b, 1.0)])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).nchw().expect("conv2d input");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be rank 4");
        assert_eq!(ws[1], c, "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: ws[2],
            stride,
            pad,
        };
        let cout = ws[0];
        let (ho, wo) = geom.out_hw();
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            geom,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::new(&[n, cout, ho, wo], data).expect("conv2d output");
        self.push(value, Op::Conv2d { x, w, b, geom, cout }, ng)
    }

    /// Transposed convolution; `w` is `Cin x Cout x k x k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (n, cin, h, wd) = self.value(x).nchw().expect("conv_transpose2d input");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws[0], cin, "conv_transpose2d channel mismatch");
        let k = ws[2];
        let (ho, wo) = ((h - 1) * stride + k - 2 * pad, (wd - 1) * stride + k - 2 * pad);
        let geom = ConvGeom {
            channels: ws[1],
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_hw(), (h, wd));
        let data = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            n,
            cin,
            geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::new(&[n, ws[1], ho, wo], data).expect("conv_transpose2d output");
        self.push(value, Op::ConvT2d { x, w, b, geom, cin }, ng)
    }

    /// Batch normalization with batch statistics. Returns the statistics so
    /// the caller can maintain running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let (n, c, h, w) = self.value(x).nchw().expect("batch_norm input");
        let plane = h * w;
        let m = n * plane;
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                let start = (i * c + ch) * plane;
                s += xs[start..start + plane].iter().sum::<f64>();
            }
            let mu = s / m as f64;
            let mut v = 0.0;
            for i in 0..n {
                let start = (i * c + ch) * plane;
                v += xs[start..start + plane]
                    .iter()
                    .map(|&x| (x - mu) * (x - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = v / m as f64;
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &var, true);
        (
            out,
            BatchStats {
                mean,
                var,
                count: m,
            },
        )
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Var {
        self.bn_apply(x, gamma, beta, mean, var, false)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], train: bool) -> Var {
        let (n, c, h, w) = self.value(x).nchw().expect("batch_norm input");
        let plane = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * plane;
                for j in start..start + plane {
                    let xh = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let value = Tensor::new(&[n, c, h, w], out).expect("bn output");
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(value, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    /// 2x2 stride-2 max pooling.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw().expect("max_pool2 input");
        let (data, arg) = kernels::maxpool2_forward(self.value(x).data(), n, c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], data).expect("pool output");
        let ng = self.ng(x);
        self.push(value, Op::MaxPool2 { x, arg }, ng)
    }

    /// `x` is `N x in`, `w` is `out x in`, `b` has `out` entries.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be N x in");
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut data = vec![0.0; n * out];
        for i in 0..n {
            data[i * out..(i + 1) * out].copy_from_slice(self.value(b).data());
        }
        kernels::gemm(
            n,
            inp,
            out,
            1.0,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut data,
        );
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let value = Tensor::new(&[n, out], data).expect("linear output");
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape");
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Sampling grid for a batch of similarity transforms.
    ///
    /// `params` is `N x 4` holding `(log_scale, rotation, tx, ty)`; the
    /// result is `N x H x W x 2` source coordinates `(x, y)` in `[-1, 1]`
    /// normalized image space.
    pub fn affine_grid(&mut self, params: Var, height: usize, width: usize) -> Var {
        let ps = self.shape(params).to_vec();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[1], 4, "transform params must be N x 4");
        let n = ps[0];
        let p = self.value(params).data();
        let mut data = Vec::with_capacity(n * height * width * 2);
        for i in 0..n {
            let m = crate::stn::params_to_affine(&crate::stn::TransformParams::from_slice(
                &p[i * 4..i * 4 + 4],
            ));
            for y in 0..height {
                let ty = norm_coord(y, height);
                for x in 0..width {
                    let tx = norm_coord(x, width);
                    data.push(m[0][0] * tx + m[0][1] * ty + m[0][2]);
                    data.push(m[1][0] * tx + m[1][1] * ty + m[1][2]);
                }
            }
        }
        let value = Tensor::new(&[n, height, width, 2], data).expect("grid");
        let ng = self.ng(params);
        self.push(
            value,
            Op::AffineGrid {
                params,
                height,
                width,
            },
            ng,
        )
    }

    /// Bilinear sampling of `x` (`N x C x H x W`) at `grid` (`N x H' x W' x 2`).
    /// Neighbours outside the image contribute zero.
    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw().expect("grid_sample input");
        let gs = self.shape(grid).to_vec();
        assert_eq!(gs.len(), 4);
        assert_eq!(gs[0], n, "grid batch mismatch");
        assert_eq!(gs[3], 2);
        let (ho, wo) = (gs[1], gs[2]);
        let xs = self.value(x).data();
        let g = self.value(grid).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for i in 0..n {
            for p in 0..ho * wo {
                let gi = (i * ho * wo + p) * 2;
                let s = BilinearTap::new(g[gi], g[gi + 1], h, w);
                for ch in 0..c {
                    let plane = &xs[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                    out[(i * c + ch) * ho * wo + p] = s.sample(plane);
                }
            }
        }
        let ng = self.ng(x) || self.ng(grid);
        let value = Tensor::new(&[n, c, ho, wo], out).expect("grid_sample output");
        self.push(value, Op::GridSample { x, grid }, ng)
    }

    /// `mean((a - b)^2)` over all elements.
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mean_squared_diff shape mismatch");
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / va.len() as f64);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MeanSquaredDiff(a, b), ng)
    }

    /// `mean(-ln p)` (or `mean(-ln(1 - p))` when `complement`) with `p`
    /// clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn mean_neg_log(&mut self, x: Var, complement: bool) -> Var {
        let v = self.value(x).data();
        let s: f64 = v
            .iter()
            .map(|&p| {
                let p = clamp_prob(p);
                if complement {
                    -(1.0 - p).ln()
                } else {
                    -p.ln()
                }
            })
            .sum();
        let value = Tensor::scalar(s / v.len() as f64);
        let ng = self.ng(x);
        self.push(value, Op::MeanNegLog { x, complement }, ng)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    if self.ng(v) {
                        self.accumulate(grads, v, g.map(|x| c * x));
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cout } => {
                let n = self.shape(*x)[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    *geom,
                    self.value(*w).data(),
                    *cout,
                    g.data(),
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                self.accumulate_opt(grads, Some(*x), dx);
                self.accumulate_opt(grads, Some(*w), dw);
                self.accumulate_opt(grads, *b, db);
            }
            Op::ConvT2d { x, w, b, geom, cin } => {
                let n = self.shape(*x)[0];
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    self.value(*x).data(),
                    n,
                    *cin,
                    *geom,
                    self.value(*w).data(),
                    g.data(),
                    self.ng(*x),
                    self.ng(*w),
                    b.is_some_and(|b| self.ng(b)),
                );
                self.accumulate_opt(grads, Some(*x), dx);
                self.accumulate_opt(grads, Some(*w), dw);
                self.accumulate_opt(grads, *b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*x).nchw().expect("bn");
                let plane = h * w;
                let m = (n * plane) as f64;
                let dy = g.data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let start = (i * c + ch) * plane;
                        for j in start..start + plane {
                            sum_dy[ch] += dy[j];
                            sum_dy_xhat[ch] += dy[j] * xhat[j];
                        }
                    }
                }
                if self.ng(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; dy.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let start = (i * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for j in start..start + plane {
                                dx[j] = if *train {
                                    k * (dy[j] - sum_dy[ch] / m - xhat[j] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * dy[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx).expect("bn dx"));
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_dy_xhat).expect("bn dg"));
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_dy).expect("bn db"));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let dx = xv.zip_map(g, |v, d| if v > 0.0 { d } else { slope * d });
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = node.value.zip_map(g, |y, d| d * (1.0 - y * y));
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node.value.zip_map(g, |y, d| d * y * (1.0 - y));
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool2 { x, arg } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&src, &gv) in arg.iter().zip(g.data()) {
                    d[src] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, inp) = (xs[0], xs[1]);
                let out = self.shape(*w)[0];
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * inp];
                    kernels::gemm(n, out, inp, 1.0, g.data(), false, self.value(*w).data(), false, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(&[n, inp], dx).expect("dx"));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; out * inp];
                    kernels::gemm(out, n, inp, 1.0, g.data(), true, self.value(*x).data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(&[out, inp], dw).expect("dw"));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; out];
                    for row in g.data().chunks(out) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[out], db).expect("db"));
                }
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(*x)).expect("reshape grad");
                self.accumulate(grads, *x, dx);
            }
            Op::AffineGrid {
                params,
                height,
                width,
            } => {
                let n = self.shape(*params)[0];
                let p = self.value(*params).data();
                let gd = g.data();
                let mut dp = vec![0.0; n * 4];
                for i in 0..n {
                    let m = crate::stn::params_to_affine(&crate::stn::TransformParams::from_slice(
                        &p[i * 4..i * 4 + 4],
                    ));
                    let (a, b, d, e) = (m[0][0], m[0][1], m[1][0], m[1][1]);
                    let mut acc = [0.0; 4];
                    for y in 0..*height {
                        let ty = norm_coord(y, *height);
                        for x in 0..*width {
                            let tx = norm_coord(x, *width);
                            let gi = ((i * height + y) * width + x) * 2;
                            let (gx, gy) = (gd[gi], gd[gi + 1]);
                            // d/d log_scale scales the linear part.
                            acc[0] += gx * (a * tx + b * ty) + gy * (d * tx + e * ty);
                            // d/d rotation: d a = b, d b = -a, d d = a, d e = b.
                            acc[1] += gx * (b * tx - a * ty) + gy * (a * tx + b * ty);
                            acc[2] += gx;
                            acc[3] += gy;
                        }
                    }
                    dp[i * 4..i * 4 + 4].copy_from_slice(&acc);
                }
                self.accumulate(grads, *params, Tensor::new(&[n, 4], dp).expect("dp"));
            }
            Op::GridSample { x, grid } => {
                let (n, c, h, w) = self.value(*x).nchw().expect("grid_sample");
                let gs = self.shape(*grid);
                let (ho, wo) = (gs[1], gs[2]);
                let xs = self.value(*x).data();
                let gv = self.value(*grid).data();
                let dy = g.data();
                let want_x = self.ng(*x);
                let want_grid = self.ng(*grid);
                let mut dx = if want_x { vec![0.0; xs.len()] } else { Vec::new() };
                let mut dgrid = if want_grid { vec![0.0; gv.len()] } else { Vec::new() };
                for i in 0..n {
                    for p in 0..ho * wo {
                        let gi = (i * ho * wo + p) * 2;
                        let s = BilinearTap::new(gv[gi], gv[gi + 1], h, w);
                        let mut dgx = 0.0;
                        let mut dgy = 0.0;
                        for ch in 0..c {
                            let off = (i * c + ch) * h * w;
                            let d = dy[(i * c + ch) * ho * wo + p];
                            if want_x {
                                s.scatter(&mut dx[off..off + h * w], d);
                            }
                            if want_grid {
                                let (du, dv) = s.coord_grad(&xs[off..off + h * w]);
                                dgx += d * du;
                                dgy += d * dv;
                            }
                        }
                        if want_grid {
                            dgrid[gi] = dgx;
                            dgrid[gi + 1] = dgy;
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx).expect("dx"));
                }
                if want_grid {
                    self.accumulate(grads, *grid, Tensor::new(gs, dgrid).expect("dgrid"));
                }
            }
            Op::MeanSquaredDiff(a, b) => {
                let scale = 2.0 * g.item() / self.value(*a).len() as f64;
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| scale * (x - y));
                if self.ng(*b) {
                    self.accumulate(grads, *b, diff.map(|v| -v));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::MeanNegLog { x, complement } => {
                let xv = self.value(*x);
                let scale = g.item() / xv.len() as f64;
                let dx = xv.map(|p| {
                    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                        0.0
                    } else if *complement {
                        scale / (1.0 - p)
                    } else {
                        -scale / p
                    }
                });
                self.accumulate(grads, *x, dx);
            }
        }
    }

    fn accumulate_opt(&self, grads: &mut [Option<Tensor>], v: Option<Var>, g: Option<Vec<f64>>) {
        if let (Some(v), Some(g)) = (v, g) {
            let t = Tensor::new(self.shape(v), g).expect("grad shape");
            self.accumulate(grads, v, t);
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Normalized coordinate of pixel `i` along an axis of `n` pixels; pixel
/// centres of the first and last pixel sit at -1 and +1.
#[inline]
pub fn norm_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// The four-neighbour stencil of one bilinear sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
    w: usize,
    h: usize,
    /// d(pixel coordinate)/d(normalized coordinate) per axis.
    sx: f64,
    sy: f64,
}

impl BilinearTap {
    pub(crate) fn new(gx: f64, gy: f64, h: usize, w: usize) -> Self {
        let sx = (w.max(1) - 1) as f64 / 2.0;
        let sy = (h.max(1) - 1) as f64 / 2.0;
        let u = snap((gx + 1.0) * sx);
        let v = snap((gy + 1.0) * sy);
        // Far-away or non-finite coordinates sample nothing.
        let lim = (w.max(h) + 2) as f64;
        if !(u.is_finite() && v.is_finite()) || u.abs() > lim || v.abs() > lim {
            return BilinearTap {
                x0: -2,
                y0: -2,
                fx: 0.0,
                fy: 0.0,
                w,
                h,
                sx,
                sy,
            };
        }
        let x0 = u.floor();
        let y0 = v.floor();
        BilinearTap {
            x0: x0 as isize,
            y0: y0 as isize,
            fx: u - x0,
            fy: v - y0,
            w,
            h,
            sx,
            sy,
        }
    }

    #[inline]
    fn at(&self, plane: &[f64], x: isize, y: isize) -> f64 {
        if x < 0 || y < 0 || x >= self.w as isize || y >= self.h as isize {
            0.0
        } else {
            plane[y as usize * self.w + x as usize]
        }
    }

    #[inline]
    pub(crate) fn sample(&self, plane: &[f64]) -> f64 {
        let v00 = self.at(plane, self.x0, self.y0);
        let v10 = self.at(plane, self.x0 + 1, self.y0);
        let v01 = self.at(plane, self.x0, self.y0 + 1);
        let v11 = self.at(plane, self.x0 + 1, self.y0 + 1);
        let (fx, fy) = (self.fx, self.fy);
        if fx == 0.0 && fy == 0.0 {
            return v00;
        }
        (1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v10 + (1.0 - fx) * fy * v01 + fx * fy * v11
    }

    fn scatter(&self, dplane: &mut [f64], d: f64) {
        let (fx, fy) = (self.fx, self.fy);
        for (dx, dy, wgt) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            let (x, y) = (self.x0 + dx, self.y0 + dy);
            if x >= 0 && y >= 0 && x < self.w as isize && y < self.h as isize && wgt != 0.0 {
                dplane[y as usize * self.w + x as usize] += wgt * d;
            }
        }
    }

    /// Derivative of the sample w.r.t. the normalized `(x, y)` coordinates.
    fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let v00 = self.at(plane, self.x0, self.y0);
        let v10 = self.at(plane, self.x0 + 1, self.y0);
        let v01 = self.at(plane, self.x0, self.y0 + 1);
        let v11 = self.at(plane, self.x0 + 1, self.y0 + 1);
        let (fx, fy) = (self.fx, self.fy);
        let du = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
        let dv = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
        (du * self.sx, dv * self.sy)
    }
}

#[inline]
fn snap(u: f64) -> f64 {
    let r = u.round();
    if (u - r).abs() < SNAP_EPS {
        r
    } else {
        u
    }
}
