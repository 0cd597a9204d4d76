use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use lidar_ood::feature_scoring::{
    score_all, write_scores, FeatureMatrix, FeatureSet, PrototypeBank, ScoreOptions, Similarity, DEFAULT_RADIUS,
};
use lidar_ood::loss_forward::{
    loss_ce, loss_contrastive, loss_heads, loss_lovasz, loss_objectosphere, loss_prototype, ContrastiveDenominator,
    LossComponents, LossWeights,
};
use lidar_ood::scan_io::read_labels;

use crate::config::{required, ScoreSection};
use crate::staging::Staged;

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Directory of `<id>.sem` and `<id>.cont` feature files.
    #[arg(long, value_name = "DIR")]
    features: Option<PathBuf>,
    /// Prototype matrix (one row per class) in the feature file format.
    #[arg(long, value_name = "FILE")]
    prototypes: Option<PathBuf>,
    /// Output directory; must not exist yet.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Objectosphere radius r.
    #[arg(long)]
    radius: Option<f64>,
    /// Classify with the raw inner product instead of cosine similarity.
    #[arg(long)]
    inner_product: bool,
    /// Directory of `<id>.label` files with training class ids; enables the
    /// loss report `losses.tsv`. Ids outside the class range are ignored.
    #[arg(long, value_name = "DIR")]
    labels: Option<PathBuf>,
    /// Contrastive temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Five comma-separated loss weights: ce, lovasz, prototype, contrastive,
    /// objectosphere.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    lambda: Option<Vec<f64>>,
    /// Use the contrastive denominator exactly as printed (constant C·log C).
    #[arg(long)]
    literal_denominator: bool,
}

/// Feature ids present as both `<id>.sem` and `<id>.cont`, sorted.
fn feature_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "sem") {
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            if !dir.join(format!("{id}.cont")).exists() {
                bail!("{} has no matching {id}.cont", path.display());
            }
            ids.push(id);
        }
    }
    ids.sort();
    if ids.is_empty() {
        bail!("no .sem feature files in {}", dir.display());
    }
    Ok(ids)
}

fn rows_of(m: &FeatureMatrix, keep: &[usize]) -> Result<FeatureMatrix> {
    let data = keep.iter().flat_map(|&i| m.row(i).iter().copied()).collect();
    Ok(FeatureMatrix::new(keep.len(), m.cols(), data)?)
}

fn losses_for(
    features: &FeatureSet,
    labels: &[u16],
    bank: &PrototypeBank,
    weights: &LossWeights,
    denominator: ContrastiveDenominator,
) -> Result<Option<LossComponents>> {
    let c = features.classes();
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| (labels[i] as usize) < c).collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let y: Vec<usize> = keep.iter().map(|&i| labels[i] as usize).collect();
    let sem = rows_of(&features.sem, &keep)?;
    let cont = rows_of(&features.cont, &keep)?;
    Ok(Some(LossComponents {
        ce: loss_ce(&sem, &y, &vec![1.0; c])?.value,
        lovasz: loss_lovasz(&sem, &y)?.value,
        prototype: loss_prototype(&sem, &y, bank)?.value,
        contrastive: loss_contrastive(&cont, &y, bank, weights.temperature, denominator)?.value,
        objectosphere: loss_objectosphere(&cont, &vec![true; y.len()], weights.radius)?.value,
    }))
}

pub fn run(a: ScoreArgs, f: ScoreSection) -> Result<()> {
    let features_dir = required(a.features, f.features, "features")?;
    let proto_path = required(a.prototypes, f.prototypes, "prototypes")?;
    let out = required(a.out, f.out, "out")?;
    let radius = a.radius.or(f.radius).unwrap_or(DEFAULT_RADIUS);
    let inner = a.inner_product || f.inner_product.unwrap_or(false);
    let literal = a.literal_denominator || f.literal_denominator.unwrap_or(false);
    let labels_dir = a.labels.or(f.labels);
    let mut weights = LossWeights {
        radius,
        ..LossWeights::default()
    };
    if let Some(t) = a.temperature.or(f.temperature) {
        weights.temperature = t;
    }
    if let Some(l) = a.lambda.or(f.lambda) {
        let [ce, lovasz, prototype, contrastive, objectosphere] = l[..] else {
            bail!("--lambda takes exactly five weights, got {}", l.len());
        };
        weights = LossWeights {
            ce,
            lovasz,
            prototype,
            contrastive,
            objectosphere,
            ..weights
        };
    }
    weights.validate()?;
    let opts = ScoreOptions {
        radius,
        similarity: if inner { Similarity::Inner } else { Similarity::Cosine },
    };
    let denominator = if literal {
        ContrastiveDenominator::Literal
    } else {
        ContrastiveDenominator::AllPrototypes
    };

    let bank = PrototypeBank::from_matrix(
        FeatureMatrix::read(&proto_path).with_context(|| format!("reading prototypes {}", proto_path.display()))?,
    );
    let ids = feature_ids(&features_dir)?;
    let staged = Staged::create(&out)?;

    let mut manifest = String::new();
    let config = [
        ("features", features_dir.display().to_string()),
        ("prototypes", proto_path.display().to_string()),
        ("radius", radius.to_string()),
        ("similarity", format!("{:?}", opts.similarity).to_lowercase()),
        ("temperature", weights.temperature.to_string()),
        (
            "lambda",
            format!(
                "{},{},{},{},{}",
                weights.ce, weights.lovasz, weights.prototype, weights.contrastive, weights.objectosphere
            ),
        ),
        ("contrastive_denominator", format!("{denominator:?}")),
        (
            "labels",
            labels_dir.as_ref().map_or("none".into(), |p| p.display().to_string()),
        ),
    ];
    for (k, v) in &config {
        let _ = writeln!(manifest, "# {k}={v}");
    }
    let mut losses = String::from("scan\tce\tlovasz\tprototype\tcontrastive\tobjectosphere\tshead\tchead\n");

    for id in &ids {
        let sem = FeatureMatrix::read(features_dir.join(format!("{id}.sem")))?;
        let cont = FeatureMatrix::read(features_dir.join(format!("{id}.cont")))?;
        let features = FeatureSet::new(sem, cont).with_context(|| format!("scan {id}"))?;
        let scores = score_all(&features, &bank, &opts).with_context(|| format!("scoring scan {id}"))?;
        write_scores(staged.path().join(format!("{id}.scores")), &scores.fused)?;
        let mean = scores.fused.iter().sum::<f64>() / scores.fused.len().max(1) as f64;
        let sidecar = format!(
            "points={}\nclasses={}\nsemantic_max={}\nmean_fused={mean}\n",
            features.len(),
            features.classes(),
            scores.semantic_max
        );
        let path = staged.path().join(format!("{id}.scores.txt"));
        fs::write(&path, sidecar).with_context(|| format!("writing {}", path.display()))?;
        let _ = writeln!(manifest, "scan\t{id}\t{}", features.len());

        if let Some(dir) = &labels_dir {
            let labels: Vec<u16> = read_labels(dir.join(format!("{id}.label")))?.classes().collect();
            if labels.len() != features.len() {
                bail!("scan {id}: {} labels for {} feature rows", labels.len(), features.len());
            }
            if let Some(parts) = losses_for(&features, &labels, &bank, &weights, denominator)? {
                let (shead, chead) = loss_heads(&parts, &weights);
                let _ = writeln!(
                    losses,
                    "{id}\t{}\t{}\t{}\t{}\t{}\t{shead}\t{chead}",
                    parts.ce, parts.lovasz, parts.prototype, parts.contrastive, parts.objectosphere
                );
            }
        }
    }
    let path = staged.path().join("score_manifest.tsv");
    fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))?;
    if labels_dir.is_some() {
        let path = staged.path().join("losses.tsv");
        fs::write(&path, losses).with_context(|| format!("writing {}", path.display()))?;
    }
    staged.commit()?;
    println!("scored\t{}", ids.len());
    Ok(())
}
