use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use lidar_ood::insertion::{discover_scans, forge_split, DatasetStyle, ForgeParams, SplitKind};
use lidar_ood::intensity_synth::NormalizationPolicy;
use lidar_ood::mesh_bank::{HeightTable, MeshBank, ReflectivityCatalog};
use lidar_ood::scan_io::SensorConfig;

use crate::config::{required, ForgeSection};

#[derive(Debug, Args)]
pub struct ForgeArgs {
    /// Sequence directory with `velodyne/*.bin` and `labels/*.label`.
    #[arg(long, value_name = "DIR")]
    scans: Option<PathBuf>,
    /// Mesh tree laid out as `<category>/**/*.off`.
    #[arg(long, value_name = "DIR")]
    meshes: Option<PathBuf>,
    /// Output directory; must not exist yet.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Split policy: single or multi.
    #[arg(long)]
    policy: Option<String>,
    /// Label conventions and sensor preset: kitti, poss or nuscenes.
    #[arg(long)]
    dataset: Option<String>,
    /// Master seed; every random choice derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Sensor TOML replacing the dataset preset.
    #[arg(long, value_name = "FILE")]
    sensor: Option<PathBuf>,
    /// Reflectivity overrides (TOML, `category = value`).
    #[arg(long, value_name = "FILE")]
    catalog: Option<PathBuf>,
    /// Target-height overrides in meters (TOML, `category = value`).
    #[arg(long, value_name = "FILE")]
    heights: Option<PathBuf>,
    /// Relative intensity noise.
    #[arg(long)]
    sigma: Option<f64>,
    /// Neighbors for normal estimation.
    #[arg(long)]
    k: Option<usize>,
    /// mean-match or max-match.
    #[arg(long)]
    normalization: Option<String>,
    /// Surface samples per object before insertion.
    #[arg(long)]
    dense_points: Option<usize>,
    /// Lower bound of the random scale factor.
    #[arg(long)]
    scale_min: Option<f64>,
    /// Upper bound of the random scale factor.
    #[arg(long)]
    scale_max: Option<f64>,
    /// Worker threads; the output does not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

pub fn run(a: ForgeArgs, f: ForgeSection) -> Result<()> {
    let scans_dir = required(a.scans, f.scans, "scans")?;
    let meshes_dir = required(a.meshes, f.meshes, "meshes")?;
    let out = required(a.out, f.out, "out")?;
    let kind: SplitKind = a.policy.or(f.policy).as_deref().unwrap_or("single").parse()?;
    let style: DatasetStyle = a.dataset.or(f.dataset).as_deref().unwrap_or("kitti").parse()?;
    let seed = a.seed.or(f.seed).unwrap_or(0);

    let mut params = ForgeParams::new(style, kind, seed);
    if let Some(path) = a.sensor.or(f.sensor) {
        params.sensor = SensorConfig::load(&path)?;
        params.policy.max_radius = params.sensor.max_insert_radius_m;
    }
    let catalog_path = a.catalog.or(f.catalog);
    if let Some(path) = &catalog_path {
        params.catalog = ReflectivityCatalog::load(path)?;
    }
    if let Some(path) = a.heights.or(f.heights) {
        params.heights = HeightTable::load(&path)?;
    }
    if let Some(v) = a.sigma.or(f.sigma) {
        params.intensity.sigma = v;
    }
    if let Some(v) = a.k.or(f.k) {
        params.intensity.neighbors = v;
    }
    if let Some(v) = a.normalization.or(f.normalization) {
        params.intensity.normalization = v.parse::<NormalizationPolicy>()?;
    }
    if let Some(v) = a.dense_points.or(f.dense_points) {
        params.dense_points = v;
    }
    let lo = a.scale_min.or(f.scale_min).unwrap_or(params.scale_range.0);
    let hi = a.scale_max.or(f.scale_max).unwrap_or(params.scale_range.1);
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        bail!("scale range [{lo}, {hi}] must satisfy 0 < min <= max");
    }
    params.scale_range = (lo, hi);
    params.workers = a.workers.or(f.workers).unwrap_or(1);
    if params.workers == 0 {
        bail!("--workers must be at least 1");
    }

    let bank = MeshBank::load_dir(&meshes_dir, &params.catalog)
        .with_context(|| format!("loading meshes from {}", meshes_dir.display()))?;
    let scans = discover_scans(&scans_dir).with_context(|| format!("listing scans in {}", scans_dir.display()))?;
    log::info!("forging {} scans with {} meshes", scans.len(), bank.len());
    for (k, v) in params.describe() {
        log::info!("{k} = {v}");
    }
    let manifest = forge_split(&scans, &bank, &params, &out)?;
    for (k, v) in manifest.aggregates() {
        println!("{k}\t{v}");
    }
    if !manifest.skipped.is_empty() {
        bail!(
            "{} of {} scans could not be forged (see manifest.tsv in {})",
            manifest.skipped.len(),
            scans.len(),
            out.display()
        );
    }
    Ok(())
}
