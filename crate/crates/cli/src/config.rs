//! Optional TOML run configuration. Every key mirrors a command-line flag;
//! flags given on the command line win over the file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub forge: ForgeSection,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ForgeSection {
    pub scans: Option<PathBuf>,
    pub meshes: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub policy: Option<String>,
    pub dataset: Option<String>,
    pub seed: Option<u64>,
    pub sensor: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub heights: Option<PathBuf>,
    pub sigma: Option<f64>,
    pub k: Option<usize>,
    pub normalization: Option<String>,
    pub dense_points: Option<usize>,
    pub scale_min: Option<f64>,
    pub scale_max: Option<f64>,
    pub workers: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ScoreSection {
    pub features: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub radius: Option<f64>,
    pub inner_product: Option<bool>,
    pub labels: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub lambda: Option<Vec<f64>>,
    pub literal_denominator: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalSection {
    pub scores: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub velodyne: Option<PathBuf>,
    pub dataset: Option<String>,
    pub anomaly_label: Option<u16>,
    pub ignore: Option<Vec<u16>>,
    pub per_scan: Option<bool>,
    pub report: Option<PathBuf>,
}

impl FileConfig {
    /// Reads the file; relative paths inside it are taken relative to the
    /// file's own directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        let f = &mut cfg.forge;
        for p in [&mut f.scans, &mut f.meshes, &mut f.out, &mut f.sensor, &mut f.catalog, &mut f.heights] {
            fix(p);
        }
        let s = &mut cfg.score;
        for p in [&mut s.features, &mut s.prototypes, &mut s.out, &mut s.labels] {
            fix(p);
        }
        let e = &mut cfg.eval;
        for p in [&mut e.scores, &mut e.labels, &mut e.velodyne, &mut e.report] {
            fix(p);
        }
        Ok(cfg)
    }
}

/// Command-line value, else file value, else an error naming the flag.
pub fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .with_context(|| format!("--{name} is required (on the command line or in the config file)"))
}
