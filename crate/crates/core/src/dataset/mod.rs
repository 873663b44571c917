//! Paired (stylized, real) face datasets with controlled misalignment.
//!
//! Layout on disk: `rf/{id}.png` holds the aligned real face,
//! `sf/{id}_{style}.png` the misaligned stylized portrait, and
//! `manifest.json` lists every pair.

mod faces;
mod stylize;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use faces::{synthetic_face, write_synthetic_sources, SOURCE_SIZE};
pub use stylize::{
    builtin_stylizer, CandyStylizer, IdentityStylizer, MosaicStylizer, SketchStylizer, Stylizer, BUILTIN_STYLES,
};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::stn::{warp, TransformParams};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MisalignmentRanges {
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    /// Translation as a fraction of the image width, applied to both axes.
    pub translation_frac: [f64; 2],
}

impl Default for MisalignmentRanges {
    fn default() -> Self {
        MisalignmentRanges {
            rotation_deg: [-45.0, 45.0],
            scale: [0.7, 1.3],
            translation_frac: [-0.1, 0.1],
        }
    }
}

impl MisalignmentRanges {
    pub fn none() -> Self {
        MisalignmentRanges {
            rotation_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            translation_frac: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, r: [f64; 2], lo: f64, hi: f64| {
            if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
                return Err(Error::Config(format!("{name} range {r:?} must be ordered and within [{lo}, {hi}]")));
            }
            Ok(())
        };
        check("rotation_deg", self.rotation_deg, -45.0, 45.0)?;
        check("scale", self.scale, 0.7, 1.3)?;
        check("translation_frac", self.translation_frac, -0.5, 0.5)
    }

    pub fn contains(&self, p: &TransformParams) -> bool {
        let tol = 1e-9;
        let within = |v: f64, r: [f64; 2]| v >= r[0] - tol && v <= r[1] + tol;
        within(p.rotation.to_degrees(), self.rotation_deg)
            && within(p.scale(), self.scale)
            && within(p.tx / 2.0, self.translation_frac)
            && within(p.ty / 2.0, self.translation_frac)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Draws one transform, uniform per component. Scale is uniform on the
/// linear scale; translations are converted to normalized coordinates
/// (the image spans 2 units).
pub fn sample_misalignment(seed: u64, ranges: &MisalignmentRanges) -> TransformParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = uniform(&mut rng, ranges.rotation_deg).to_radians();
    let scale = uniform(&mut rng, ranges.scale);
    let tx = 2.0 * uniform(&mut rng, ranges.translation_frac);
    let ty = 2.0 * uniform(&mut rng, ranges.translation_frac);
    TransformParams::new(scale.ln(), rotation, tx, ty)
}

fn image_to_tensor(img: &ImageTensor) -> Tensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = vec![0.0; c * h * w];
    for (p, px) in img.data().chunks(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * h * w + p] = v;
        }
    }
    Tensor::new(&[1, c, h, w], data).expect("image tensor")
}

fn tensor_to_image(t: &Tensor) -> ImageTensor {
    let (_, c, h, w) = t.nchw().expect("image tensor");
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            data[p * c + ch] = t.data()[ch * h * w + p];
        }
    }
    ImageTensor::new(h, w, c, data).expect("image shape")
}

/// Warps the image content about its centre by `params` (a scale below one
/// shrinks the content), with bilinear interpolation and zero fill.
pub fn apply_affine(image: &ImageTensor, params: &TransformParams) -> Result<ImageTensor> {
    if !params.is_finite() {
        return Err(Error::Validation(format!("non-finite transform {params:?}")));
    }
    let out = warp(&image_to_tensor(image), &[params.inverse()])?;
    Ok(tensor_to_image(&out))
}

/// Takes the largest centred square and resizes it to `target x target`
/// with bilinear interpolation (pixel-centre aligned, edge clamped).
pub fn center_crop_resize(image: &ImageTensor, target: usize) -> Result<ImageTensor> {
    image.ensure_rgb()?;
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 || target == 0 {
        return Err(Error::Shape(format!("cannot crop {h}x{w} to {target}")));
    }
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let ratio = side as f64 / target as f64;
    let src = |i: usize| {
        let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (side - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(side - 1);
        (lo, hi, s - lo as f64)
    };
    Ok(ImageTensor::from_fn(target, target, |y, x| {
        let (ya, yb, fy) = src(y);
        let (xa, xb, fx) = src(x);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let g = |yy: usize, xx: usize| image.get(y0 + yy, x0 + xx, c);
            let top = g(ya, xa) * (1.0 - fx) + g(ya, xb) * fx;
            let bottom = g(yb, xa) * (1.0 - fx) + g(yb, xb) * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacePairRecord {
    pub id: String,
    pub source_id: String,
    pub style: String,
    pub split: Split,
    /// Relative to the manifest directory.
    pub sf_path: PathBuf,
    pub rf_path: PathBuf,
    pub params: TransformParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub styles: Vec<String>,
    pub ranges: MisalignmentRanges,
    pub split_counts: BTreeMap<String, usize>,
    pub records: Vec<FacePairRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> Vec<&FacePairRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// `(stylized, real)` images of a record.
    pub fn load_pair(&self, rec: &FacePairRecord) -> Result<(ImageTensor, ImageTensor)> {
        Ok((
            ImageTensor::load(&self.resolve(&rec.sf_path))?,
            ImageTensor::load(&self.resolve(&rec.rf_path))?,
        ))
    }

    /// Checks the manifest invariants, decoding every referenced image.
    pub fn validate(&self) -> Result<()> {
        let mut splits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for rec in &self.records {
            splits.entry(&rec.source_id).or_default().insert(rec.split);
            if !self.ranges.contains(&rec.params) {
                return Err(Error::Validation(format!("record {} has out-of-range misalignment", rec.id)));
            }
            for p in [&rec.sf_path, &rec.rf_path] {
                let img = ImageTensor::load(&self.resolve(p))?;
                if img.height() != self.image_size || img.width() != self.image_size {
                    return Err(Error::Validation(format!(
                        "{} is {}x{}, expected {}",
                        p.display(),
                        img.height(),
                        img.width(),
                        self.image_size
                    )));
                }
            }
        }
        if let Some((id, _)) = splits.iter().find(|(_, s)| s.len() > 1) {
            return Err(Error::Validation(format!("source {id} appears in both splits")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Number of source identities held out for testing.
    pub test_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisSpec {
    pub source_dir: PathBuf,
    pub out_dir: PathBuf,
    pub image_size: usize,
    pub ranges: MisalignmentRanges,
    pub seed: u64,
    pub split: SplitSpec,
}

/// Decodable image files in `dir`, sorted by name.
pub fn list_sources(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Per-record seed, independent of processing order.
pub fn record_seed(seed: u64, source_id: &str, style: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{source_id}:{style}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn synthesize_pairs(spec: &SynthesisSpec, stylizers: &[Box<dyn Stylizer>]) -> Result<DatasetManifest> {
    spec.ranges.validate()?;
    if stylizers.is_empty() {
        return Err(Error::Config("at least one stylizer is required".into()));
    }
    let styles: Vec<String> = stylizers.iter().map(|s| s.id().to_string()).collect();
    if styles.iter().collect::<BTreeSet<_>>().len() != styles.len() {
        return Err(Error::Config(format!("duplicate stylizer ids in {styles:?}")));
    }
    let sources = list_sources(&spec.source_dir)?;
    if sources.is_empty() {
        return Err(Error::Empty(format!("no source images in {}", spec.source_dir.display())));
    }
    if spec.split.test_count > sources.len() {
        return Err(Error::Config(format!(
            "test_count {} exceeds {} sources",
            spec.split.test_count,
            sources.len()
        )));
    }
    let mut ids: Vec<String> = sources.iter().map(|p| stem(p)).collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test: BTreeSet<String> = ids.into_iter().take(spec.split.test_count).collect();

    for sub in ["rf", "sf"] {
        let d = spec.out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }

    let per_source: Vec<Vec<FacePairRecord>> = sources
        .par_iter()
        .map(|path| -> Result<Vec<FacePairRecord>> {
            let source_id = stem(path);
            let split = if test.contains(&source_id) { Split::Test } else { Split::Train };
            let img = ImageTensor::load(path)?;
            let rf = center_crop_resize(&img, spec.image_size)?.quantized();
            let rf_path = PathBuf::from("rf").join(format!("{source_id}.png"));
            rf.save_png(&spec.out_dir.join(&rf_path))?;
            let mut records = Vec::new();
            for st in stylizers {
                let params = sample_misalignment(record_seed(spec.seed, &source_id, st.id()), &spec.ranges);
                let sf = apply_affine(&rf, &params).and_then(|warped| st.stylize(&warped));
                let sf = match sf {
                    Ok(sf) => sf,
                    Err(e) => {
                        log::warn!("skipping {source_id} / {}: {e}", st.id());
                        continue;
                    }
                };
                let id = format!("{source_id}_{}", st.id());
                let sf_path = PathBuf::from("sf").join(format!("{id}.png"));
                sf.save_png(&spec.out_dir.join(&sf_path))?;
                records.push(FacePairRecord {
                    id,
                    source_id: source_id.clone(),
                    style: st.id().to_string(),
                    split,
                    sf_path,
                    rf_path: rf_path.clone(),
                    params,
                });
            }
            Ok(records)
        })
        .collect::<Result<_>>()?;

    let records: Vec<FacePairRecord> = per_source.into_iter().flatten().collect();
    let mut split_counts = BTreeMap::new();
    for r in &records {
        *split_counts.entry(r.split.label().to_string()).or_insert(0) += 1;
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: spec.seed,
        image_size: spec.image_size,
        styles,
        ranges: spec.ranges,
        split_counts,
        records,
        root: spec.out_dir.clone(),
    };
    manifest.save(&spec.out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
