use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ifrp_core::dataset::{
    builtin_stylizer, center_crop_resize, list_sources, synthesize_pairs, write_synthetic_sources, DatasetManifest,
    SplitSpec, Split, SynthesisSpec, MANIFEST_FILE,
};
use ifrp_core::eval::{evaluate, pair_csv, save_grid, EvalOptions, FeatureEmbedder};
use ifrp_core::image::to_network_batch;
use ifrp_core::style::{image_grams, mean_grams, score_styles, RankedStyle, StyleDescriptor};
use ifrp_core::trainer::{recover, srn_from_checkpoint, train, Checkpoint, PairSet, TrainOptions, TrainState};
use ifrp_core::ImageTensor;
use serde::{Deserialize, Serialize};

use crate::config::{EvaluateSection, SelectSection, SynthesizeSection};

pub struct SynthesizeArgs {
    pub sources: Option<PathBuf>,
    /// Generate this many procedural faces instead of reading `sources`.
    pub synthetic: Option<usize>,
    pub out: PathBuf,
    pub seed: u64,
    pub section: SynthesizeSection,
}

pub fn synthesize(args: &SynthesizeArgs) -> Result<DatasetManifest> {
    let source_dir = match (&args.sources, args.synthetic) {
        (Some(dir), None) => dir.clone(),
        (None, Some(n)) => {
            let dir = args.out.join("sources");
            write_synthetic_sources(&dir, n, args.seed)?;
            dir
        }
        _ => bail!("give exactly one of --sources or --synthetic"),
    };
    let stylizers = args
        .section
        .styles
        .iter()
        .map(|s| builtin_stylizer(s))
        .collect::<ifrp_core::Result<Vec<_>>>()?;
    let spec = SynthesisSpec {
        source_dir,
        out_dir: args.out.clone(),
        image_size: args.section.image_size,
        ranges: args.section.ranges,
        seed: args.seed,
        split: SplitSpec {
            test_count: args.section.test_count,
        },
    };
    let manifest = synthesize_pairs(&spec, &stylizers)?;
    log::info!(
        "wrote {} records to {}",
        manifest.records.len(),
        args.out.join(MANIFEST_FILE).display()
    );
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSelection {
    pub k: usize,
    pub selected: Vec<String>,
    pub ranking: Vec<RankedStyle>,
}

impl StyleSelection {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub enum StyleSource {
    /// Train-split portraits of a manifest, grouped by style.
    Manifest(PathBuf),
    /// One subdirectory of portraits per style, plus a directory of real faces.
    Dirs { styles: PathBuf, real: PathBuf },
}

fn load_dir(dir: &Path, size: usize) -> Result<Vec<ImageTensor>> {
    list_sources(dir)?
        .iter()
        .map(|p| Ok(center_crop_resize(&ImageTensor::load(p)?, size)?))
        .collect()
}

pub fn select_styles(source: &StyleSource, section: &SelectSection, out: &Path) -> Result<StyleSelection> {
    let (by_style, real): (BTreeMap<String, Vec<ImageTensor>>, Vec<ImageTensor>) = match source {
        StyleSource::Manifest(path) => {
            let manifest = DatasetManifest::load(path)?;
            let mut by_style: BTreeMap<String, Vec<ImageTensor>> = BTreeMap::new();
            let mut real: BTreeMap<String, ImageTensor> = BTreeMap::new();
            for rec in manifest.split(Split::Train) {
                let (sf, rf) = manifest.load_pair(rec)?;
                by_style.entry(rec.style.clone()).or_default().push(sf);
                real.entry(rec.source_id.clone()).or_insert(rf);
            }
            (by_style, real.into_values().collect())
        }
        StyleSource::Dirs { styles, real } => {
            let mut by_style = BTreeMap::new();
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(styles)
                .with_context(|| format!("listing {}", styles.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            for d in dirs {
                let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                by_style.insert(id, load_dir(&d, section.image_size)?);
            }
            (by_style, load_dir(real, section.image_size)?)
        }
    };
    if real.is_empty() {
        bail!("no real faces to compare against");
    }
    let extractor = section.extractor.build()?;
    let batch = |img: &ImageTensor| to_network_batch(std::slice::from_ref(img));
    let mut descriptors = Vec::new();
    for (id, images) in &by_style {
        let tensors = images.iter().map(batch).collect::<ifrp_core::Result<Vec<_>>>()?;
        descriptors.push(StyleDescriptor::from_images(id.clone(), extractor.as_ref(), &tensors)?);
    }
    let real_grams = real
        .iter()
        .map(|img| image_grams(extractor.as_ref(), &batch(img)?))
        .collect::<ifrp_core::Result<Vec<_>>>()?;
    let means = mean_grams(real_grams)?;
    let ranking = score_styles(&descriptors, &means, section.eps)?;
    if section.k == 0 || section.k > ranking.len() {
        bail!("k = {} with {} styles", section.k, ranking.len());
    }
    let selection = StyleSelection {
        k: section.k,
        selected: ranking.iter().take(section.k).map(|r| r.style_id.clone()).collect(),
        ranking,
    };
    write_text(out, &(serde_json::to_string_pretty(&selection)? + "\n"))?;
    log::info!("selected styles {:?}", selection.selected);
    Ok(selection)
}

pub struct TrainArgs {
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub config: ifrp_core::trainer::TrainConfig,
}

pub fn train_cmd(args: &TrainArgs) -> Result<PathBuf> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let state = match &args.resume {
        Some(path) => {
            let mut state = TrainState::from_checkpoint(&Checkpoint::load(path)?)?;
            if state.config.hash() != args.config.hash() {
                bail!("{} was trained with a different configuration", path.display());
            }
            state.config.epochs = args.config.epochs;
            state.config.max_steps = args.config.max_steps;
            state.config.checkpoint_every = args.config.checkpoint_every;
            state
        }
        None => TrainState::new(args.config.clone())?,
    };
    let data = PairSet::from_manifest(&manifest, &state.config.styles, state.config.image_size)?;
    log::info!("training on {} pairs", data.len());
    let psi = state.config.extractor.build()?;
    let outcome = train(
        state,
        &data,
        psi.as_ref(),
        &TrainOptions {
            out_dir: Some(args.out.clone()),
        },
    )?;
    if let Some(last) = outcome.metrics.last() {
        log::info!("step {} L_pix {:.5} L_dis {:.5}", last.step, last.l_pix, last.l_dis);
    }
    Ok(args.out.join("final.ckpt"))
}

pub fn recover_cmd(checkpoint: &Path, input: &Path, out: &Path) -> Result<usize> {
    let srn = srn_from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let paths = if input.is_dir() {
        list_sources(input)?
    } else {
        vec![input.to_path_buf()]
    };
    if paths.is_empty() {
        bail!("no images in {}", input.display());
    }
    let images = paths.iter().map(|p| ImageTensor::load(p)).collect::<ifrp_core::Result<Vec<_>>>()?;
    let recovered = recover(&srn, &images)?;
    for (p, img) in paths.iter().zip(&recovered) {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        img.save_png(&out.join(format!("{name}.png")))?;
    }
    log::info!("recovered {} images into {}", recovered.len(), out.display());
    Ok(recovered.len())
}

pub struct EvaluateArgs {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub pairs_csv: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub section: EvaluateSection,
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<ifrp_core::eval::EvalReport> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let srn = srn_from_checkpoint(&ckpt)?;
    let seen = if !args.section.seen_styles.is_empty() {
        args.section.seen_styles.clone()
    } else if !ckpt.header.config.styles.is_empty() {
        ckpt.header.config.styles.clone()
    } else {
        manifest.styles.clone()
    };
    let embedder = FeatureEmbedder {
        extractor: args.section.embedder.build()?,
    };
    let outcome = evaluate(
        &manifest,
        &srn,
        &embedder,
        &EvalOptions {
            k: args.section.k,
            seen_styles: seen,
        },
    )?;
    write_text(&args.out, &outcome.report.to_json()?)?;
    if let Some(path) = &args.pairs_csv {
        write_text(path, &pair_csv(&outcome.pairs))?;
    }
    if let Some(path) = &args.grid {
        let rows: Vec<_> = outcome
            .images
            .iter()
            .take(args.section.grid_rows.max(1))
            .map(|(sf, rec, gt)| (gt.clone(), sf.clone(), rec.clone()))
            .collect();
        save_grid(&rows, path)?;
    }
    let a = &outcome.report.aggregate;
    log::info!("PSNR {:.3} dB, SSIM {:.4}, FSIM {:.4} over {} pairs", a.psnr, a.ssim, a.fsim, a.count);
    Ok(outcome.report)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
