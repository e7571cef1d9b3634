//! Run configuration files.
//!
//! A config is a TOML document with one table per concern. Every key is
//! optional and falls back to its documented default; keys that are not
//! recognised are rejected so that a typo cannot silently change a run.
//!
//! ```toml
//! [dataset]
//! kind = "shading-toy"   # "gmm-oracle", "shading-toy" or "file"
//! seed = 0
//!
//! [train]
//! iterations = 20000
//! batch_size = 512
//!
//! [bench]
//! components = 10000
//! ```

use std::path::{Path, PathBuf};

use ndgauss::datasets::{read_tensor_file, Dataset, ShadingToyConfig};
use ndgauss::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GmmOracle,
    ShadingToy,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub seed: u64,
    /// Dimension of a gmm-oracle target.
    pub dims: usize,
    /// Hidden component count of a gmm-oracle target.
    pub components: usize,
    /// Which role groups the shading toy exposes.
    pub shading: ShadingSection,
    /// Tensor file for `kind = "file"`, relative to the config file.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::ShadingToy,
            seed: 0,
            dims: 6,
            components: 8,
            shading: ShadingSection::default(),
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadingSection {
    pub direction: bool,
    pub albedo: bool,
    pub roughness: bool,
    pub variables: usize,
}

impl Default for ShadingSection {
    fn default() -> Self {
        let d = ShadingToyConfig::default();
        Self {
            direction: d.direction,
            albedo: d.albedo,
            roughness: d.roughness,
            variables: d.variables,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Isotropic,
    Anisotropic,
}

impl Population {
    pub fn name(self) -> &'static str {
        match self {
            Population::Isotropic => "isotropic",
            Population::Anisotropic => "anisotropic",
        }
    }
}

/// Parameters of the culling benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub seed: u64,
    pub dims: usize,
    pub components: usize,
    /// Side length of the square image slice that forms the query set.
    pub image_size: usize,
    pub tile_sizes: Vec<usize>,
    pub projections: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub populations: Vec<Population>,
    /// Timed repetitions per row; the fastest is reported.
    pub repeats: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: 10,
            components: 10_000,
            image_size: 64,
            tile_sizes: vec![64, 256],
            projections: vec![4, 8, 16, 32],
            multipliers: vec![1.0, 2.0, 3.0, 4.0],
            populations: vec![Population::Isotropic, Population::Anisotropic],
            repeats: 1,
        }
    }
}

/// A whole config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub bench: BenchSection,
}

impl RunConfig {
    /// Parses TOML text. Errors carry the line, column and offending key.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, col) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((0, 0));
            CliError::Config(format!(
                "{origin}:{line}:{col}: {}",
                e.message().trim_end()
            ))
        })?;
        cfg.train
            .validate()
            .map_err(|e| CliError::Config(format!("{origin}: [train] {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        if let Some(p) = &cfg.dataset.path {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.dataset.path = Some(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    /// Canonical text form, stored in checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn build_dataset(&self) -> Result<Dataset, CliError> {
        let d = &self.dataset;
        let ds = match d.kind {
            DatasetKind::GmmOracle => Dataset::gmm_oracle(d.seed, d.dims, d.components),
            DatasetKind::ShadingToy => Dataset::shading_toy(ShadingToyConfig {
                seed: d.seed,
                direction: d.shading.direction,
                albedo: d.shading.albedo,
                roughness: d.shading.roughness,
                variables: d.shading.variables,
            }),
            DatasetKind::File => {
                let path = d
                    .path
                    .as_ref()
                    .ok_or_else(|| CliError::Config("[dataset] kind = \"file\" needs a path".into()))?;
                Dataset::from_tensor(&read_tensor_file(path)?)
            }
        };
        ds.map_err(|e| CliError::Config(format!("[dataset] {e}")))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}
