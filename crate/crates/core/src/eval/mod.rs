//! Image quality metrics, identity retrieval rates and the evaluation report.

mod fsim;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{center_crop_resize, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::image::{to_network_batch, ImageTensor};
use crate::losses::FeatureExtractor;
use crate::networks::Srn;
use crate::trainer::recover;

pub use fsim::{conv2_same, fsim, fsim_planes, luma_plane, phase_congruency, Plane, MIN_SIDE as FSIM_MIN_SIDE};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const REPORT_VERSION: u32 = 1;
/// Styles whose id starts with this form the sketch group of the report.
pub const SKETCH_PREFIX: &str = "sketch";

fn check_pair(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// PSNR over all channels for images in `[0, 1]`; identical images give
/// [`PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b, "psnr")?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::Empty("psnr on an empty image".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = taps.iter().enumerate().map(|(k, t)| t * x[y * w + xo + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = taps.iter().enumerate().map(|(k, t)| t * rows[(yo + k) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM on luma with an 11x11 Gaussian window (sigma 1.5), valid
/// positions only.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_pair(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (la, lb) = (a.luma(), b.luma());
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(&la, h, w, &taps);
    let mu_b = filter_valid(&lb, h, w, &taps);
    let e_aa = filter_valid(&prod(&la, &la), h, w, &taps);
    let e_bb = filter_valid(&prod(&lb, &lb), h, w, &taps);
    let e_ab = filter_valid(&prod(&la, &lb), h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Maps a face image to an identity embedding.
pub trait Embedder: Send + Sync {
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Raw pixels as the embedding.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(image.data().to_vec())
    }
}

/// Flattened feature map of a [`FeatureExtractor`].
pub struct FeatureEmbedder {
    pub extractor: Box<dyn FeatureExtractor>,
}

impl Embedder for FeatureEmbedder {
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.extractor.extract(&to_network_batch(std::slice::from_ref(image))?)?.data().to_vec())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest candidates by Euclidean distance, ties going
/// to the lower index.
pub fn nearest(query: &[f64], candidates: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if k == 0 || candidates.len() < k {
        return Err(Error::Config(format!("k = {k} with {} candidates", candidates.len())));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        if c.len() != query.len() {
            return Err(Error::Shape(format!("embedding lengths {} and {}", query.len(), c.len())));
        }
        scored.push((sq_dist(query, c), i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Labelled embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Labelled {
    pub label: String,
    pub embedding: Vec<f64>,
}

/// Face Recovery Rate: percentage of queries whose identity is among the `k`
/// gallery faces nearest to them.
pub fn frr(queries: &[Labelled], gallery: &[Labelled], k: usize) -> Result<f64> {
    Ok(100.0 * frr_hits(queries, gallery, k)? as f64 / queries.len() as f64)
}

fn frr_hits(queries: &[Labelled], gallery: &[Labelled], k: usize) -> Result<usize> {
    if queries.is_empty() {
        return Err(Error::Empty("FRR has no queries".into()));
    }
    let labels: BTreeSet<&str> = gallery.iter().map(|g| g.label.as_str()).collect();
    let embeddings: Vec<Vec<f64>> = gallery.iter().map(|g| g.embedding.clone()).collect();
    let mut hits = 0usize;
    for q in queries {
        if !labels.contains(q.label.as_str()) {
            return Err(Error::Validation(format!("identity {} is not in the gallery", q.label)));
        }
        if nearest(&q.embedding, &embeddings, k)?.iter().any(|&i| gallery[i].label == q.label) {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Face Consistency Rate: for each style, the percentage of its recovered faces
/// whose identity appears among the `k` nearest faces recovered from the
/// other styles, averaged over styles.
pub fn fcr(by_style: &BTreeMap<String, Vec<Labelled>>, k: usize) -> Result<f64> {
    if by_style.len() < 2 {
        return Err(Error::Config("FCR needs at least two styles".into()));
    }
    let mut total = 0.0;
    for (style, faces) in by_style {
        if faces.is_empty() {
            return Err(Error::Empty(format!("no recovered faces for style {style}")));
        }
        let others: Vec<&Labelled> = by_style
            .iter()
            .filter(|(s, _)| *s != style)
            .flat_map(|(_, v)| v.iter())
            .collect();
        let embeddings: Vec<Vec<f64>> = others.iter().map(|o| o.embedding.clone()).collect();
        let mut hits = 0usize;
        for f in faces {
            if nearest(&f.embedding, &embeddings, k)?.iter().any(|&i| others[i].label == f.label) {
                hits += 1;
            }
        }
        total += 100.0 * hits as f64 / faces.len() as f64;
    }
    Ok(total / by_style.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub fsim: f64,
}

impl MetricSummary {
    fn of(rows: &[&PairMetrics]) -> Self {
        let n = rows.len().max(1) as f64;
        MetricSummary {
            count: rows.len(),
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            fsim: rows.iter().map(|r| r.fsim).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub source_id: String,
    pub style: String,
    pub psnr: f64,
    pub ssim: f64,
    pub fsim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleReport {
    pub style: String,
    pub seen: bool,
    pub metrics: MetricSummary,
    pub frr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub styles: Vec<String>,
    pub metrics: MetricSummary,
    pub frr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub image_size: usize,
    pub k: usize,
    pub gallery_size: usize,
    pub seen_styles: Vec<String>,
    pub aggregate: MetricSummary,
    pub styles: Vec<StyleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen: Option<GroupReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen: Option<GroupReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sketch: Option<GroupReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fcr: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

pub const PAIR_CSV_HEADER: &str = "id,source_id,style,psnr,ssim,fsim";

pub fn pair_csv(rows: &[PairMetrics]) -> String {
    let mut out = String::from(PAIR_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.id, r.source_id, r.style, r.psnr, r.ssim, r.fsim
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub k: usize,
    /// Styles the model was trained on; every other test style is unseen.
    pub seen_styles: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub pairs: Vec<PairMetrics>,
    /// `(stylized, recovered, ground truth)` per test record, in manifest order.
    pub images: Vec<(ImageTensor, ImageTensor, ImageTensor)>,
}

fn fit(img: &ImageTensor, size: usize) -> Result<ImageTensor> {
    if img.height() == size && img.width() == size {
        Ok(img.clone())
    } else {
        center_crop_resize(img, size)
    }
}

/// Recovers every test record and scores it against its real face.
pub fn evaluate(
    manifest: &DatasetManifest,
    srn: &Srn,
    embedder: &dyn Embedder,
    opts: &EvalOptions,
) -> Result<EvalOutcome> {
    let size = srn.config.image_size;
    let test = manifest.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Empty("the manifest has no test records".into()));
    }
    for s in &opts.seen_styles {
        if !manifest.styles.contains(s) {
            return Err(Error::Validation(format!("seen style {s} is not in the manifest")));
        }
    }
    let loaded = test
        .par_iter()
        .map(|rec| {
            let (sf, rf) = manifest.load_pair(rec)?;
            Ok((fit(&sf, size)?, fit(&rf, size)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let sfs: Vec<ImageTensor> = loaded.iter().map(|(s, _)| s.clone()).collect();
    let recovered = recover(srn, &sfs)?;

    let pairs = test
        .par_iter()
        .zip(&recovered)
        .zip(&loaded)
        .map(|((rec, out), (_, gt))| {
            Ok(PairMetrics {
                id: rec.id.clone(),
                source_id: rec.source_id.clone(),
                style: rec.style.clone(),
                psnr: psnr(out, gt)?,
                ssim: ssim(out, gt)?,
                fsim: fsim(out, gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // Gallery: one real face per test identity.
    let mut gallery_faces: BTreeMap<&str, &ImageTensor> = BTreeMap::new();
    for (rec, (_, gt)) in test.iter().zip(&loaded) {
        gallery_faces.entry(rec.source_id.as_str()).or_insert(gt);
    }
    let gallery = gallery_faces
        .par_iter()
        .map(|(id, img)| {
            Ok(Labelled {
                label: id.to_string(),
                embedding: embedder.embed(img)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = test
        .par_iter()
        .zip(&recovered)
        .map(|(rec, img)| {
            Ok(Labelled {
                label: rec.source_id.clone(),
                embedding: embedder.embed(img)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_style: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, rec) in test.iter().enumerate() {
        by_style.entry(rec.style.clone()).or_default().push(i);
    }
    let mut styles = Vec::new();
    let mut hits_by_style = BTreeMap::new();
    for (style, idx) in &by_style {
        let q: Vec<Labelled> = idx.iter().map(|&i| queries[i].clone()).collect();
        let hits = frr_hits(&q, &gallery, opts.k)?;
        hits_by_style.insert(style.clone(), hits);
        let rows: Vec<&PairMetrics> = idx.iter().map(|&i| &pairs[i]).collect();
        styles.push(StyleReport {
            style: style.clone(),
            seen: opts.seen_styles.contains(style),
            metrics: MetricSummary::of(&rows),
            frr: 100.0 * hits as f64 / idx.len() as f64,
        });
    }
    let group = |keep: &dyn Fn(&StyleReport) -> bool| -> Option<GroupReport> {
        let members: Vec<&StyleReport> = styles.iter().filter(|s| keep(s)).collect();
        if members.is_empty() {
            return None;
        }
        let rows: Vec<&PairMetrics> = pairs
            .iter()
            .filter(|p| members.iter().any(|m| m.style == p.style))
            .collect();
        let hits: usize = members.iter().map(|m| hits_by_style[&m.style]).sum();
        Some(GroupReport {
            styles: members.iter().map(|m| m.style.clone()).collect(),
            frr: 100.0 * hits as f64 / rows.len() as f64,
            metrics: MetricSummary::of(&rows),
        })
    };
    let fcr_value = if by_style.len() >= 2 {
        let grouped: BTreeMap<String, Vec<Labelled>> = by_style
            .iter()
            .map(|(s, idx)| (s.clone(), idx.iter().map(|&i| queries[i].clone()).collect()))
            .collect();
        let min_others = by_style.values().map(|v| test.len() - v.len()).min().unwrap_or(0);
        if min_others >= opts.k {
            Some(fcr(&grouped, opts.k)?)
        } else {
            log::warn!("skipping FCR: fewer than k = {} faces from other styles", opts.k);
            None
        }
    } else {
        None
    };

    let all: Vec<&PairMetrics> = pairs.iter().collect();
    let report = EvalReport {
        report_version: REPORT_VERSION,
        image_size: size,
        k: opts.k,
        gallery_size: gallery.len(),
        seen_styles: opts.seen_styles.clone(),
        aggregate: MetricSummary::of(&all),
        seen: group(&|s| s.seen),
        unseen: group(&|s| !s.seen),
        sketch: group(&|s| s.style.starts_with(SKETCH_PREFIX)),
        styles,
        fcr: fcr_value,
    };
    let images = loaded
        .into_iter()
        .zip(recovered)
        .map(|((sf, gt), out)| (sf, out, gt))
        .collect();
    Ok(EvalOutcome { report, pairs, images })
}

/// Side-by-side grid: one row per triple, columns in tuple order.
pub fn save_grid(triples: &[(ImageTensor, ImageTensor, ImageTensor)], path: &Path) -> Result<()> {
    let first = triples.first().ok_or_else(|| Error::Empty("grid with no rows".into()))?;
    let (h, w) = (first.0.height(), first.0.width());
    let mut grid = ImageTensor::filled(h * triples.len(), w * 3, 3, 1.0);
    for (r, (a, b, c)) in triples.iter().enumerate() {
        for (col, img) in [a, b, c].into_iter().enumerate() {
            check_pair(img, &first.0, "grid")?;
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        grid.set(r * h + y, col * w + x, ch, img.get(y, x, ch));
                    }
                }
            }
        }
    }
    grid.save_png(path)
}
