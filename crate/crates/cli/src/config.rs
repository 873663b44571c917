//! Run configuration file. Every subcommand reads its own section; flags on
//! the command line override file values.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ifrp_core::dataset::{MisalignmentRanges, BUILTIN_STYLES};
use ifrp_core::losses::ExtractorSpec;
use ifrp_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub synthesize: SynthesizeSection,
    pub select_styles: SelectSection,
    pub train: TrainConfig,
    pub evaluate: EvaluateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesizeSection {
    pub image_size: usize,
    pub styles: Vec<String>,
    pub ranges: MisalignmentRanges,
    pub test_count: usize,
}

impl Default for SynthesizeSection {
    fn default() -> Self {
        SynthesizeSection {
            image_size: 32,
            styles: BUILTIN_STYLES.iter().map(|s| s.to_string()).collect(),
            ranges: MisalignmentRanges::default(),
            test_count: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    pub k: usize,
    pub extractor: ExtractorSpec,
    /// Fixed regularizer; the trace-scaled default is used when absent.
    pub eps: Option<f64>,
    /// Images are resized to this side when read from directories.
    pub image_size: usize,
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection {
            k: 3,
            extractor: ExtractorSpec::default(),
            eps: None,
            image_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub k: usize,
    /// Styles counted as seen; empty means the styles the checkpoint was
    /// trained on.
    pub seen_styles: Vec<String>,
    pub embedder: ExtractorSpec,
    /// Rows in the optional comparison grid.
    pub grid_rows: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            k: 5,
            seen_styles: Vec::new(),
            embedder: ExtractorSpec::default(),
            grid_rows: 8,
        }
    }
}

impl RunConfig {
    /// Reads TOML when the extension is `.toml`, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }
}

pub fn split_list(s: &str) -> Result<Vec<String>> {
    let items: Vec<String> = s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect();
    if items.is_empty() {
        bail!("empty list `{s}`");
    }
    Ok(items)
}
