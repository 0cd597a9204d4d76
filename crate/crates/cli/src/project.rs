use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use lidar_ood::insertion::DatasetStyle;
use lidar_ood::range_projection::{cell_of, project};
use lidar_ood::scan_io::{read_scan, SensorConfig};

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Scan in KITTI `.bin` layout.
    #[arg(long, value_name = "FILE")]
    scan: PathBuf,
    /// Sensor preset when no --sensor file is given.
    #[arg(long, default_value = "kitti")]
    dataset: String,
    /// Sensor TOML.
    #[arg(long, value_name = "FILE")]
    sensor: Option<PathBuf>,
    /// Write the range image as a binary PGM (nearer is brighter).
    #[arg(long, value_name = "FILE")]
    pgm: Option<PathBuf>,
}

pub fn run(a: ProjectArgs) -> Result<()> {
    let cfg = match &a.sensor {
        Some(p) => SensorConfig::load(p)?,
        None => a.dataset.parse::<DatasetStyle>()?.sensor(),
    };
    let cloud = read_scan(&a.scan)?;
    let img = project(&cloud, &cfg)?;
    let in_view = cloud.points().iter().filter(|p| cell_of(p, &cfg).is_some()).count();
    let kept = img.occupied_count();
    println!("points\t{}", cloud.len());
    println!("outside_fov\t{}", cloud.len() - in_view);
    println!("occluded\t{}", in_view - kept);
    println!("kept\t{kept}");
    println!("cells\t{}", cfg.beams * cfg.width);
    println!("occupancy\t{:.6}", kept as f64 / (cfg.beams * cfg.width) as f64);
    if let Some(path) = &a.pgm {
        fs::write(path, img.to_pgm()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
