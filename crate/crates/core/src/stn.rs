//! Spatial transformer layers: similarity-transform parameters, sampling
//! grids, bilinear sampling and the localization networks that predict the
//! parameters from feature maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{norm_coord, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{flatten, Binding, Conv, Linear, ParamStore};
use crate::tensor::Tensor;

/// A similarity transform in normalized `[-1, 1]` image coordinates.
///
/// Maps a target location `p` to the source location
/// `exp(log_scale) * R(rotation) * p + (tx, ty)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub log_scale: f64,
    /// Radians.
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        log_scale: 0.0,
        rotation: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(log_scale: f64, rotation: f64, tx: f64, ty: f64) -> Self {
        TransformParams {
            log_scale,
            rotation,
            tx,
            ty,
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        TransformParams::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.log_scale, self.rotation, self.tx, self.ty]
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// The transform undoing `self`.
    pub fn inverse(&self) -> TransformParams {
        // x = s R p + t  =>  p = (1/s) R^-1 x - (1/s) R^-1 t
        let s_inv = (-self.log_scale).exp();
        let (sin, cos) = (-self.rotation).sin_cos();
        let tx = -s_inv * (cos * self.tx - sin * self.ty);
        let ty = -s_inv * (sin * self.tx + cos * self.ty);
        TransformParams::new(-self.log_scale, -self.rotation, tx, ty)
    }
}

/// 2x3 matrix `[s cos, -s sin, tx; s sin, s cos, ty]`.
pub fn params_to_affine(p: &TransformParams) -> [[f64; 3]; 2] {
    let s = p.scale();
    let (sin, cos) = p.rotation.sin_cos();
    [[s * cos, -s * sin, p.tx], [s * sin, s * cos, p.ty]]
}

/// `H x W x 2` grid of source coordinates `(x, y)` obtained by mapping the
/// regular target grid through `m`.
pub fn generate_grid(m: &[[f64; 3]; 2], height: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(height * width * 2);
    for y in 0..height {
        let ty = norm_coord(y, height);
        for x in 0..width {
            let tx = norm_coord(x, width);
            data.push(m[0][0] * tx + m[0][1] * ty + m[0][2]);
            data.push(m[1][0] * tx + m[1][1] * ty + m[1][2]);
        }
    }
    Tensor::new(&[height, width, 2], data).expect("grid shape")
}

/// Bilinear sampling of an `N x C x H x W` map at an `N x H' x W' x 2` grid.
pub fn bilinear_sample(x: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (n, ..) = x.nchw()?;
    let gs = grid.shape();
    if gs.len() != 4 || gs[0] != n || gs[3] != 2 {
        return Err(Error::Shape(format!(
            "grid {:?} does not match input {:?}",
            gs,
            x.shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let gv = tape.constant(grid.clone());
    let out = tape.grid_sample(xv, gv);
    Ok(tape.value(out).clone())
}

/// Warps every item of an NCHW batch by its own transform.
pub fn warp(x: &Tensor, params: &[TransformParams]) -> Result<Tensor> {
    let (n, _, h, w) = x.nchw()?;
    if params.len() != n {
        return Err(Error::Shape(format!(
            "{} transforms for a batch of {}",
            params.len(),
            n
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = tape.constant(params_tensor(params));
    let grid = tape.affine_grid(p, h, w);
    let out = tape.grid_sample(xv, grid);
    Ok(tape.value(out).clone())
}

pub fn params_tensor(params: &[TransformParams]) -> Tensor {
    let data = params.iter().flat_map(|p| p.to_array()).collect();
    Tensor::new(&[params.len(), 4], data).expect("params shape")
}

/// Where a spatial transformer sits inside the style-removal network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StnSite {
    /// After encoder layer 1 (64x64x32 at full scale).
    Encoder1,
    /// After encoder layer 2 (32x32x64).
    Encoder2,
    /// After encoder layer 3 (16x16x128).
    Encoder3,
    /// On the decoder feature map at a quarter of the image size (32x32x64).
    DecoderMid,
}

impl StnSite {
    pub const ALL: [StnSite; 4] = [
        StnSite::Encoder1,
        StnSite::Encoder2,
        StnSite::Encoder3,
        StnSite::DecoderMid,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StnSite::Encoder1 => "stn1",
            StnSite::Encoder2 => "stn2",
            StnSite::Encoder3 => "stn3",
            StnSite::DecoderMid => "stn4",
        }
    }

    /// Conv widths of the localization stack at full scale. Every conv is
    /// 3x3 + ReLU and all but the last are followed by 2x2 max pooling.
    fn table_widths(self) -> &'static [usize] {
        match self {
            StnSite::Encoder1 => &[64, 128, 256, 20, 20],
            StnSite::Encoder2 => &[128, 256, 20, 20],
            StnSite::Encoder3 => &[256, 20, 20],
            StnSite::DecoderMid => &[64, 128, 256, 20],
        }
    }
}

/// Hidden width of the first fully connected layer.
pub const LOC_HIDDEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocLayer {
    /// 3x3 conv, stride 1, ReLU, optionally followed by 2x2/2 max pooling.
    Conv {
        out: usize,
        /// Zero-pad by one pixel ("same"); otherwise no padding.
        same: bool,
        pool: bool,
    },
    Dense {
        inp: usize,
        out: usize,
        relu: bool,
    },
}

/// Architecture of one localization network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocNetSpec {
    /// `(H, W, C)` of the feature map the network reads.
    pub input: (usize, usize, usize),
    pub layers: Vec<LocLayer>,
}

impl LocNetSpec {
    /// The localization stack for `site`, with conv widths multiplied by
    /// `width_scale` (1.0 reproduces the full-size architecture).
    ///
    /// Pooling is skipped once it would shrink the map below 4x4, and the
    /// last conv drops its padding when the map is at least 3x3; at full
    /// scale this lands every stack on 2x2x20 = 80 features.
    pub fn for_site(site: StnSite, input: (usize, usize, usize), width_scale: f64) -> Self {
        let widths = site.table_widths();
        let (mut h, mut w, mut c) = input;
        let mut layers = Vec::new();
        for (i, &base) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let out = ((base as f64 * width_scale).round() as usize).max(2);
            let same = !(last && h >= 3 && w >= 3);
            if !same {
                h -= 2;
                w -= 2;
            }
            let pool = !last && h / 2 >= 4 && w / 2 >= 4;
            if pool {
                h /= 2;
                w /= 2;
            }
            c = out;
            layers.push(LocLayer::Conv { out, same, pool });
        }
        layers.push(LocLayer::Dense {
            inp: h * w * c,
            out: LOC_HIDDEN,
            relu: true,
        });
        layers.push(LocLayer::Dense {
            inp: LOC_HIDDEN,
            out: 4,
            relu: false,
        });
        LocNetSpec { input, layers }
    }

    pub fn validate(&self) -> Result<()> {
        match self.layers.last() {
            Some(LocLayer::Dense { out: 4, relu: false, .. }) => Ok(()),
            _ => Err(Error::Validation(
                "localization network must end in a linear layer with 4 outputs".into(),
            )),
        }
    }
}

#[derive(Clone, Debug)]
enum LocStage {
    Conv(Conv, bool),
    Dense(Linear, bool),
}

/// A localization network instantiated from a [`LocNetSpec`].
#[derive(Clone, Debug)]
pub struct LocNet {
    pub spec: LocNetSpec,
    stages: Vec<LocStage>,
}

impl LocNet {
    /// Registers the parameters in `store`. The final layer starts at zero so
    /// the transformer initially outputs the identity transform.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: LocNetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::new();
        let mut c = spec.input.2;
        let n = spec.layers.len();
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LocLayer::Conv { out, same, pool } => {
                    let conv = Conv::new(
                        store,
                        &format!("{name}.conv{i}"),
                        c,
                        out,
                        3,
                        1,
                        usize::from(same),
                        true,
                        rng,
                    );
                    stages.push(LocStage::Conv(conv, pool));
                    c = out;
                }
                LocLayer::Dense { inp, out, relu } => {
                    let fc_name = format!("{name}.fc{i}");
                    let lin = if i + 1 == n {
                        Linear::zeros(store, &fc_name, inp, out)
                    } else {
                        Linear::new(store, &fc_name, inp, out, rng)
                    };
                    stages.push(LocStage::Dense(lin, relu));
                }
            }
        }
        Ok(LocNet { spec, stages })
    }

    pub fn final_layer(&self) -> &Linear {
        match self.stages.last() {
            Some(LocStage::Dense(l, _)) => l,
            _ => unreachable!("validated spec ends in a dense layer"),
        }
    }

    /// `N x C x H x W` features to `N x 4` transform parameters.
    pub fn forward(&self, tape: &mut Tape, b: &mut Binding, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (h, w, c) = self.spec.input;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::Validation(format!(
                "localization input {:?} does not match spec {}x{}x{}",
                s, h, w, c
            )));
        }
        let mut cur = x;
        let mut flat = false;
        for stage in &self.stages {
            match stage {
                LocStage::Conv(conv, pool) => {
                    cur = conv.forward(tape, b, cur);
                    cur = tape.relu(cur);
                    if *pool {
                        cur = tape.max_pool2(cur);
                    }
                }
                LocStage::Dense(lin, relu) => {
                    if !flat {
                        cur = flatten(tape, cur);
                        flat = true;
                    }
                    cur = lin.forward(tape, b, cur);
                    if *relu {
                        cur = tape.relu(cur);
                    }
                }
            }
        }
        Ok(cur)
    }

    /// Predicts transform parameters for a batch of feature maps.
    pub fn localize(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<TransformParams>> {
        let empty = ParamStore::new();
        let mut tape = Tape::new();
        let mut b = Binding::new(store, &empty, false, crate::nn::Mode::Eval);
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, &mut b, x)?;
        Ok(tape
            .value(out)
            .data()
            .chunks(4)
            .map(TransformParams::from_slice)
            .collect())
    }
}

/// A full transformer: localization, grid generation and sampling.
pub fn stn_forward(tape: &mut Tape, b: &mut Binding, loc: &LocNet, x: Var) -> Result<Var> {
    let params = loc.forward(tape, b, x)?;
    let s = tape.shape(x).to_vec();
    let grid = tape.affine_grid(params, s[2], s[3]);
    Ok(tape.grid_sample(x, grid))
}
