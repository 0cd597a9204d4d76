use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use lidar_ood::feature_scoring::read_scores;
use lidar_ood::insertion::DatasetStyle;
use lidar_ood::metrics::{per_scan_reports, EvalPair, MetricReport};
use lidar_ood::scan_io::{read_labels, read_scan};

use crate::config::{required, EvalSection};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `<id>.scores` files.
    #[arg(long, value_name = "DIR")]
    scores: Option<PathBuf>,
    /// Directory of `<id>.label` files.
    #[arg(long, value_name = "DIR")]
    labels: Option<PathBuf>,
    /// Directory of `<id>.bin` scans; enables the range-binned AP.
    #[arg(long, value_name = "DIR")]
    velodyne: Option<PathBuf>,
    /// Dataset whose anomaly label applies: kitti, poss or nuscenes.
    #[arg(long)]
    dataset: Option<String>,
    /// Explicit anomaly label id, overriding --dataset.
    #[arg(long)]
    anomaly_label: Option<u16>,
    /// Label ids excluded from evaluation (comma-separated).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    ignore: Option<Vec<u16>>,
    /// Also report metrics per scan.
    #[arg(long)]
    per_scan: bool,
    /// Write the pooled metrics as `key=value` lines to this file.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

fn score_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "scores"))
        .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    if ids.is_empty() {
        bail!("no .scores files in {}", dir.display());
    }
    Ok(ids)
}

pub fn run(a: EvalArgs, f: EvalSection) -> Result<()> {
    let scores_dir = required(a.scores, f.scores, "scores")?;
    let labels_dir = required(a.labels, f.labels, "labels")?;
    let velodyne = a.velodyne.or(f.velodyne);
    let style: DatasetStyle = a.dataset.or(f.dataset).as_deref().unwrap_or("kitti").parse()?;
    let anomaly = a.anomaly_label.or(f.anomaly_label).unwrap_or(style.anomaly_label());
    let ignore = a.ignore.or(f.ignore).unwrap_or_default();
    if ignore.contains(&anomaly) {
        bail!("anomaly label {anomaly} is also in --ignore");
    }
    let per_scan = a.per_scan || f.per_scan.unwrap_or(false);
    let report_path = a.report.or(f.report);

    let ids = score_ids(&scores_dir)?;
    let mut pairs = Vec::with_capacity(ids.len());
    for id in &ids {
        let scores = read_scores(scores_dir.join(format!("{id}.scores")))?;
        let labels = read_labels(labels_dir.join(format!("{id}.label")))?;
        if labels.len() != scores.len() {
            bail!("scan {id}: {} scores for {} labels", scores.len(), labels.len());
        }
        let ranges = match &velodyne {
            Some(dir) => {
                let cloud = read_scan(dir.join(format!("{id}.bin")))?;
                if cloud.len() != scores.len() {
                    bail!("scan {id}: {} scores for {} points", scores.len(), cloud.len());
                }
                Some(cloud.points().iter().map(|p| p.range()).collect::<Vec<_>>())
            }
            None => None,
        };
        let keep: Vec<usize> = (0..labels.len()).filter(|&i| !ignore.contains(&labels.class(i))).collect();
        let pair = EvalPair::new(
            keep.iter().map(|&i| scores[i]).collect(),
            keep.iter().map(|&i| labels.class(i) == anomaly).collect(),
            ranges.map(|r| keep.iter().map(|&i| r[i]).collect()),
        )
        .with_context(|| format!("scan {id}"))?;
        pairs.push((id.clone(), pair));
    }

    let mut pooled = EvalPair::default();
    for (_, p) in &pairs {
        pooled.extend(p);
    }
    let report = MetricReport::compute(&pooled).context("pooled metrics")?;
    print!("{}", report.to_table());
    print!("{}", report.to_key_values());

    if per_scan {
        println!("scan\tpoints\tanomalies\tauroc\tfpr_at_95tpr\tap");
        for (id, r) in per_scan_reports(&pairs) {
            match r {
                Some(r) => println!(
                    "{id}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                    r.points, r.anomalies, r.auroc, r.fpr_at_95tpr, r.ap
                ),
                None => println!("{id}\t-\t-\tnan\tnan\tnan"),
            }
        }
    }

    if let Some(path) = report_path {
        let mut text = String::new();
        let _ = writeln!(text, "# scores={}", scores_dir.display());
        let _ = writeln!(text, "# labels={}", labels_dir.display());
        let _ = writeln!(text, "# anomaly_label={anomaly}");
        let ignored: Vec<String> = ignore.iter().map(u16::to_string).collect();
        let _ = writeln!(text, "# ignore={}", ignored.join(","));
        let _ = writeln!(text, "# scans={}", ids.len());
        text.push_str(&report.to_key_values());
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
