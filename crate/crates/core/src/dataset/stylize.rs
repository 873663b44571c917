//! Deterministic image-to-image stylizers.

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub trait Stylizer: Send + Sync {
    /// Style id used in file names and manifests.
    fn id(&self) -> &str;

    fn stylize(&self, image: &ImageTensor) -> Result<ImageTensor>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityStylizer;

impl Stylizer for IdentityStylizer {
    fn id(&self) -> &str {
        "identity"
    }

    fn stylize(&self, image: &ImageTensor) -> Result<ImageTensor> {
        image.ensure_rgb()?;
        Ok(image.clone())
    }
}

/// Posterized luma on a warm paper tone with dark edge strokes.
#[derive(Clone, Copy, Debug)]
pub struct SketchStylizer {
    pub levels: usize,
    pub edge_gain: f64,
}

impl Default for SketchStylizer {
    fn default() -> Self {
        SketchStylizer {
            levels: 4,
            edge_gain: 3.0,
        }
    }
}

impl Stylizer for SketchStylizer {
    fn id(&self) -> &str {
        "sketch"
    }

    fn stylize(&self, image: &ImageTensor) -> Result<ImageTensor> {
        image.ensure_rgb()?;
        let (h, w) = (image.height(), image.width());
        let luma = image.luma();
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            luma[y * w + x]
        };
        let steps = self.levels.max(2) as f64 - 1.0;
        Ok(ImageTensor::from_fn(h, w, |y, x| {
            let (yi, xi) = (y as isize, x as isize);
            let gx = at(yi - 1, xi + 1) + 2.0 * at(yi, xi + 1) + at(yi + 1, xi + 1)
                - at(yi - 1, xi - 1)
                - 2.0 * at(yi, xi - 1)
                - at(yi + 1, xi - 1);
            let gy = at(yi + 1, xi - 1) + 2.0 * at(yi + 1, xi) + at(yi + 1, xi + 1)
                - at(yi - 1, xi - 1)
                - 2.0 * at(yi - 1, xi)
                - at(yi - 1, xi + 1);
            let edge = ((gx * gx + gy * gy).sqrt() * self.edge_gain / 8.0).min(1.0);
            let tone = (luma[y * w + x] * steps).round() / steps;
            let v = (0.35 + 0.65 * tone) * (1.0 - edge);
            [v, 0.96 * v, 0.88 * v]
        }))
    }
}

/// Maps luma through a saturated five-stop palette and blends a little of
/// the original colour back in.
#[derive(Clone, Copy, Debug)]
pub struct CandyStylizer {
    pub mix: f64,
}

impl Default for CandyStylizer {
    fn default() -> Self {
        CandyStylizer { mix: 0.8 }
    }
}

const CANDY: [[f64; 3]; 5] = [
    [0.20, 0.05, 0.35],
    [0.90, 0.15, 0.45],
    [1.00, 0.55, 0.20],
    [0.25, 0.85, 0.80],
    [1.00, 0.95, 0.55],
];

impl Stylizer for CandyStylizer {
    fn id(&self) -> &str {
        "candy"
    }

    fn stylize(&self, image: &ImageTensor) -> Result<ImageTensor> {
        image.ensure_rgb()?;
        let luma = image.luma();
        let w = image.width();
        Ok(ImageTensor::from_fn(image.height(), w, |y, x| {
            let t = luma[y * w + x].clamp(0.0, 1.0) * (CANDY.len() - 1) as f64;
            let i = (t.floor() as usize).min(CANDY.len() - 2);
            let f = t - i as f64;
            let orig = image.pixel(y, x);
            let mut out = [0.0; 3];
            for c in 0..3 {
                let pal = CANDY[i][c] * (1.0 - f) + CANDY[i + 1][c] * f;
                out[c] = self.mix * pal + (1.0 - self.mix) * orig[c];
            }
            out
        }))
    }
}

/// Block averages separated by dark grout lines.
#[derive(Clone, Copy, Debug)]
pub struct MosaicStylizer {
    pub block: usize,
    pub grout: f64,
}

impl Default for MosaicStylizer {
    fn default() -> Self {
        MosaicStylizer { block: 4, grout: 0.45 }
    }
}

impl Stylizer for MosaicStylizer {
    fn id(&self) -> &str {
        "mosaic"
    }

    fn stylize(&self, image: &ImageTensor) -> Result<ImageTensor> {
        image.ensure_rgb()?;
        if self.block == 0 {
            return Err(Error::Stylizer {
                style: self.id().into(),
                reason: "block size must be positive".into(),
            });
        }
        let (h, w, b) = (image.height(), image.width(), self.block);
        let (bh, bw) = (h.div_ceil(b), w.div_ceil(b));
        let mut means = vec![[0.0; 3]; bh * bw];
        let mut counts = vec![0usize; bh * bw];
        for y in 0..h {
            for x in 0..w {
                let k = (y / b) * bw + x / b;
                let p = image.pixel(y, x);
                for c in 0..3 {
                    means[k][c] += p[c];
                }
                counts[k] += 1;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(ImageTensor::from_fn(h, w, |y, x| {
            let m = means[(y / b) * bw + x / b];
            let edge = b > 2 && (y % b == b - 1 || x % b == b - 1);
            let k = if edge { self.grout } else { 1.0 };
            [m[0] * k, m[1] * k, m[2] * k]
        }))
    }
}

pub const BUILTIN_STYLES: [&str; 3] = ["sketch", "candy", "mosaic"];

pub fn builtin_stylizer(name: &str) -> Result<Box<dyn Stylizer>> {
    Ok(match name {
        "sketch" => Box::new(SketchStylizer::default()),
        "candy" => Box::new(CandyStylizer::default()),
        "mosaic" => Box::new(MosaicStylizer::default()),
        "identity" => Box::new(IdentityStylizer),
        other => {
            return Err(Error::Stylizer {
                style: other.into(),
                reason: format!("unknown stylizer (built-ins: identity, {})", BUILTIN_STYLES.join(", ")),
            })
        }
    })
}
