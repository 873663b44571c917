//! Procedural stand-in faces used when no photo dataset is available.
//!
//! Each identity draws its own proportions and colours (head shape, hair,
//! eye spacing and colour, brows, mouth) so that identities are separable
//! while sharing a common aligned layout.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::ImageTensor;

/// Size of the photos the default pipeline expects, `(height, width)`.
pub const SOURCE_SIZE: (usize, usize) = (218, 178);

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    /// Anti-aliased coverage of pixel centre `(x, y)`.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let r = ((x - self.cx) / self.a).hypot((y - self.cy) / self.b);
        let d = (r - 1.0) * self.a.min(self.b);
        (0.5 - d / 1.5).clamp(0.0, 1.0)
    }
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], alpha: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - alpha) + src[c] * alpha;
    }
}

fn colour(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [
        rng.random_range(lo[0]..=hi[0]),
        rng.random_range(lo[1]..=hi[1]),
        rng.random_range(lo[2]..=hi[2]),
    ]
}

/// Renders identity `index` of the family selected by `seed`.
pub fn synthetic_face(seed: u64, index: u64, height: usize, width: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (w, h) = (width as f64, height as f64);

    let bg_top = colour(&mut rng, [0.3, 0.3, 0.3], [0.95, 0.95, 0.95]);
    let bg_bottom = colour(&mut rng, [0.1, 0.1, 0.1], [0.7, 0.7, 0.7]);
    let skin = colour(&mut rng, [0.45, 0.3, 0.2], [0.98, 0.8, 0.68]);
    let hair = colour(&mut rng, [0.02, 0.02, 0.02], [0.6, 0.45, 0.3]);
    let iris = colour(&mut rng, [0.05, 0.05, 0.05], [0.4, 0.5, 0.6]);
    let lips = colour(&mut rng, [0.55, 0.15, 0.15], [0.9, 0.45, 0.45]);
    let shirt = colour(&mut rng, [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);

    let face = Ellipse {
        cx: w * rng.random_range(0.47..0.53),
        cy: h * rng.random_range(0.5..0.56),
        a: w * rng.random_range(0.24..0.32),
        b: h * rng.random_range(0.25..0.32),
    };
    let hair_top = Ellipse {
        cx: face.cx,
        cy: face.cy - face.b * rng.random_range(0.2..0.4),
        a: face.a * rng.random_range(1.05..1.3),
        b: face.b * rng.random_range(0.9..1.15),
    };
    let long_hair = rng.random_bool(0.5);
    let fringe = face.cy - face.b * rng.random_range(0.45..0.75);
    let eye_dy = face.b * rng.random_range(0.1..0.25);
    let eye_dx = face.a * rng.random_range(0.32..0.48);
    let eye_a = face.a * rng.random_range(0.12..0.2);
    let eye_b = eye_a * rng.random_range(0.45..0.7);
    let brow_gap = eye_b * rng.random_range(1.6..2.6);
    let brow_w = eye_a * rng.random_range(1.0..1.5);
    let brow_t = rng.random_range(1.5..4.0);
    let mouth = Ellipse {
        cx: face.cx,
        cy: face.cy + face.b * rng.random_range(0.45..0.62),
        a: face.a * rng.random_range(0.22..0.42),
        b: face.b * rng.random_range(0.05..0.1),
    };
    let nose_len = face.b * rng.random_range(0.2..0.35);
    let light = rng.random_range(-0.25..0.25);

    let eyes = [-1.0, 1.0].map(|side| Ellipse {
        cx: face.cx + side * eye_dx,
        cy: face.cy - eye_dy,
        a: eye_a,
        b: eye_b,
    });
    let pupils = eyes.each_ref().map(|e| Ellipse {
        cx: e.cx,
        cy: e.cy,
        a: e.b * 0.8,
        b: e.b * 0.8,
    });
    let shoulders = Ellipse {
        cx: face.cx,
        cy: h * 1.12,
        a: w * 0.55,
        b: h * 0.22,
    };

    ImageTensor::from_fn(height, width, |yi, xi| {
        let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
        let t = y / h;
        let mut p = [0.0; 3];
        for c in 0..3 {
            p[c] = bg_top[c] * (1.0 - t) + bg_bottom[c] * t;
        }
        blend(&mut p, shirt, shoulders.coverage(x, y));
        let behind = if long_hair {
            Ellipse {
                cx: face.cx,
                cy: face.cy + face.b * 0.3,
                a: face.a * 1.25,
                b: face.b * 1.2,
            }
            .coverage(x, y)
        } else {
            0.0
        };
        blend(&mut p, hair, hair_top.coverage(x, y).max(behind));

        let fc = face.coverage(x, y);
        let shade = 1.0 + light * (x - face.cx) / face.a - 0.15 * ((y - face.cy) / face.b).powi(2);
        blend(&mut p, skin.map(|v| (v * shade).clamp(0.0, 1.0)), fc);
        // Fringe: hair colour over the top of the face.
        let fringe_cov = (0.5 - (y - fringe) / 1.5).clamp(0.0, 1.0) * hair_top.coverage(x, y);
        blend(&mut p, hair, fringe_cov * fc);

        for (e, pu) in eyes.iter().zip(&pupils) {
            blend(&mut p, [0.95, 0.95, 0.93], e.coverage(x, y));
            blend(&mut p, iris, pu.coverage(x, y) * e.coverage(x, y));
            let brow = Ellipse {
                cx: e.cx,
                cy: e.cy - brow_gap,
                a: brow_w,
                b: brow_t,
            };
            blend(&mut p, hair.map(|v| v * 0.8), brow.coverage(x, y));
        }
        let nose = Ellipse {
            cx: face.cx,
            cy: face.cy + nose_len * 0.5,
            a: face.a * 0.08,
            b: nose_len * 0.6,
        };
        blend(&mut p, skin.map(|v| v * 0.82), nose.coverage(x, y) * 0.6);
        blend(&mut p, lips, mouth.coverage(x, y));
        p.map(|v| v.clamp(0.0, 1.0))
    })
}

/// Writes `count` synthetic faces as `{index:04}.png` into `dir`.
pub fn write_synthetic_sources(dir: &Path, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let (h, w) = SOURCE_SIZE;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("{i:04}.png"));
            synthetic_face(seed, i as u64, h, w).save_png(&path)?;
            Ok(path)
        })
        .collect()
}
