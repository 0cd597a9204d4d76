//! Anomaly insertion: placement on planar surfaces, occlusion-aware
//! composition into the scan, and whole-split forging with a manifest.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::intensity_synth::{
    lambert_intensity, normalize_and_noise, NormalEstimator, NormalizationPolicy, DEFAULT_NEIGHBORS,
    DEFAULT_NOISE_SIGMA,
};
use crate::mesh_bank::{AnomalyObject, AugmentParams, HeightTable, MeshBank, ReflectivityCatalog, Vec3};
use crate::range_projection::{cell_of, project_tagged, Provenance, SurfaceOccluder};
use crate::scan_io::{read_pair, write_labels, write_scan, LabelArray, Point, PointCloud, SensorConfig};

/// Keeps inserted points strictly inside the radius after the cast to `f32`.
const RADIUS_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Single,
    Multi,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            other => Err(Error::validation(format!("unknown split `{other}` (expected single or multi)"))),
        }
    }
}

/// Base benchmark whose label conventions the split follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetStyle {
    SemanticKitti,
    SemanticPoss,
    NuScenes,
}

impl std::str::FromStr for DatasetStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti" | "semantickitti" => Ok(Self::SemanticKitti),
            "poss" | "semanticposs" => Ok(Self::SemanticPoss),
            "nuscenes" => Ok(Self::NuScenes),
            other => Err(Error::validation(format!(
                "unknown dataset `{other}` (expected kitti, poss or nuscenes)"
            ))),
        }
    }
}

impl DatasetStyle {
    pub fn anomaly_label(self) -> u16 {
        match self {
            Self::SemanticKitti | Self::SemanticPoss => 2,
            Self::NuScenes => 100,
        }
    }

    /// Raw class ids of the planar surfaces objects may rest on.
    pub fn surface_classes(self, kind: SplitKind) -> BTreeSet<u16> {
        let ids: &[u16] = match (self, kind) {
            // road; + parking, sidewalk, other-ground
            (Self::SemanticKitti, SplitKind::Single) => &[40],
            (Self::SemanticKitti, SplitKind::Multi) => &[40, 44, 48, 49],
            // ground
            (Self::SemanticPoss, _) => &[22],
            // flat.driveable_surface; + flat.other, flat.sidewalk
            (Self::NuScenes, SplitKind::Single) => &[24],
            (Self::NuScenes, SplitKind::Multi) => &[24, 25, 26],
        };
        ids.iter().copied().collect()
    }

    pub fn sensor(self) -> SensorConfig {
        match self {
            Self::SemanticKitti => SensorConfig::kitti(),
            Self::SemanticPoss => SensorConfig::poss(),
            Self::NuScenes => SensorConfig::nuscenes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPolicy {
    pub kind: SplitKind,
    /// Probability that a scan receives anomalies.
    pub anomaly_ratio: f64,
    pub surface_classes: BTreeSet<u16>,
    /// `count_distribution[i]` is the probability of inserting `i + 1` objects.
    pub count_distribution: Vec<f64>,
    pub anomaly_label: u16,
    pub max_radius: f64,
    /// Minimum surface points within the radius for a scan to be usable.
    pub min_surface_points: usize,
    /// xy radius of the neighborhood used for the ground height.
    pub neighborhood_radius: f64,
    /// Largest z spread tolerated in that neighborhood.
    pub max_z_spread: f64,
    /// Placement attempts per object before it is declared infeasible.
    pub retries: usize,
}

impl SplitPolicy {
    pub fn new(kind: SplitKind, style: DatasetStyle) -> Self {
        let (anomaly_ratio, count_distribution) = match kind {
            SplitKind::Single => (0.40, vec![1.0]),
            SplitKind::Multi => (0.60, vec![0.40, 0.30, 0.20, 0.10]),
        };
        Self {
            kind,
            anomaly_ratio,
            surface_classes: style.surface_classes(kind),
            count_distribution,
            anomaly_label: style.anomaly_label(),
            max_radius: 50.0,
            min_surface_points: 30,
            neighborhood_radius: 1.0,
            max_z_spread: 0.15,
            retries: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.anomaly_ratio) {
            return Err(Error::validation("anomaly ratio must lie in [0, 1]"));
        }
        let sum: f64 = self.count_distribution.iter().sum();
        if self.count_distribution.is_empty()
            || self.count_distribution.iter().any(|&p| !(p >= 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::validation("object-count distribution must be non-negative and sum to 1"));
        }
        if !(self.max_radius > 0.0) {
            return Err(Error::validation("max radius must be positive"));
        }
        if self.surface_classes.is_empty() {
            return Err(Error::validation("policy has no insertion surface classes"));
        }
        Ok(())
    }

    pub fn draw_object_count(&self, rng: &mut impl Rng) -> usize {
        let dist = WeightedIndex::new(&self.count_distribution).expect("validated distribution");
        dist.sample(rng) + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub x: f64,
    pub y: f64,
    pub ground_z: f64,
}

/// A region already claimed by an earlier object in the same scan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// Allowed-surface points of one scan within the insertion radius, indexed
/// for repeated placement draws.
pub struct PlacementSurface {
    /// Sorted by xy distance from the sensor.
    points: Vec<Vec3>,
    radii: Vec<f64>,
    tree: ImmutableKdTree<f64, u64, 2, 32>,
}

impl PlacementSurface {
    pub fn new(scene: &PointCloud, labels: &LabelArray, policy: &SplitPolicy) -> Result<Self> {
        labels.check_pairs_with(scene)?;
        let mut points: Vec<Vec3> = scene
            .points()
            .iter()
            .zip(labels.classes())
            .filter(|(p, c)| policy.surface_classes.contains(c) && p.xy_norm() <= policy.max_radius)
            .map(|(p, _)| p.xyz())
            .collect();
        if points.len() < policy.min_surface_points {
            return Err(Error::PlacementInfeasible(format!(
                "{} surface points within {} m, need {}",
                points.len(),
                policy.max_radius,
                policy.min_surface_points
            )));
        }
        points.sort_by(|a, b| a[0].hypot(a[1]).total_cmp(&b[0].hypot(b[1])));
        let radii = points.iter().map(|p| p[0].hypot(p[1])).collect();
        let xy: Vec<[f64; 2]> = points.iter().map(|p| [p[0], p[1]]).collect();
        let tree = ImmutableKdTree::new_from_slice(&xy);
        Ok(Self { points, radii, tree })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Draws a site uniformly among the surface points.
    ///
    /// `clearance` is the xy radius of the object: the site must keep the
    /// whole object inside `policy.max_radius` and away from every
    /// `occupied` footprint. The neighborhood of the site must be flat; its
    /// median height becomes the ground level.
    pub fn pick(
        &self,
        policy: &SplitPolicy,
        clearance: f64,
        occupied: &[Footprint],
        rng: &mut impl Rng,
    ) -> Result<Placement> {
        let limit = policy.max_radius - clearance - RADIUS_MARGIN;
        let candidates = self.radii.partition_point(|&r| r <= limit);
        if candidates == 0 {
            return Err(Error::PlacementInfeasible(format!(
                "no surface point leaves {clearance:.2} m clearance inside the radius"
            )));
        }
        let r2 = policy.neighborhood_radius * policy.neighborhood_radius;
        let attempts = 20 * policy.retries.max(1);
        for _ in 0..attempts {
            let [x, y, _] = self.points[rng.random_range(0..candidates)];
            if occupied
                .iter()
                .any(|f| (f.x - x).hypot(f.y - y) < f.radius + clearance)
            {
                continue;
            }
            let mut zs: Vec<f64> = self
                .tree
                .within_unsorted::<SquaredEuclidean>(&[x, y], r2)
                .iter()
                .map(|n| self.points[n.item as usize][2])
                .collect();
            if zs.len() < 3 {
                continue;
            }
            zs.sort_by(f64::total_cmp);
            if zs[zs.len() - 1] - zs[0] > policy.max_z_spread {
                continue;
            }
            let mid = zs.len() / 2;
            let ground_z = if zs.len() % 2 == 1 {
                zs[mid]
            } else {
                0.5 * (zs[mid - 1] + zs[mid])
            };
            return Ok(Placement { x, y, ground_z });
        }
        Err(Error::PlacementInfeasible(format!(
            "no flat, unoccupied site found in {attempts} draws"
        )))
    }
}

/// One-off placement draw; see [`PlacementSurface::pick`].
pub fn pick_placement(
    scene: &PointCloud,
    labels: &LabelArray,
    policy: &SplitPolicy,
    clearance: f64,
    occupied: &[Footprint],
    rng: &mut impl Rng,
) -> Result<Placement> {
    PlacementSurface::new(scene, labels, policy)?.pick(policy, clearance, occupied, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntensityParams {
    pub neighbors: usize,
    pub sigma: f64,
    pub normalization: NormalizationPolicy,
}

impl Default for IntensityParams {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            sigma: DEFAULT_NOISE_SIGMA,
            normalization: NormalizationPolicy::MeanMatch,
        }
    }
}

/// What happened to one inserted object.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectOutcome {
    pub category: String,
    pub yaw: f64,
    pub scale: f64,
    pub translation: [f64; 3],
    /// Half-open index range of the object's points in the output cloud.
    pub start: usize,
    pub end: usize,
}

impl ObjectOutcome {
    pub fn surviving(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Clone, Debug)]
pub struct ComposedScan {
    pub cloud: PointCloud,
    pub labels: LabelArray,
    pub objects: Vec<ObjectOutcome>,
    /// Scene points kept after projection.
    pub scene_points: usize,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Indices of `merged` that survive projection, in increasing order.
///
/// Nearest-point-per-cell leaves grazing cells at an object's silhouette
/// where only samples from a face turned away from the sensor landed. For
/// objects that carry their source mesh, such winners are ray-cast against
/// that mesh; hidden samples in the cell are removed and the image is built
/// again until every object winner has a clear line of sight.
fn visible_points(
    merged: &PointCloud,
    n_scene: usize,
    objects: &[AnomalyObject],
    ranges: &[Range<usize>],
    cfg: &SensorConfig,
) -> Result<Vec<usize>> {
    let occluders: Vec<Option<SurfaceOccluder>> = objects
        .iter()
        .map(|o| o.world_surface().map(|(v, f)| SurfaceOccluder::new(v, f, cfg)))
        .collect();
    let owner = |i: usize| ranges.partition_point(|r| r.end <= i);
    let mut by_cell: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for i in n_scene..merged.len() {
        if occluders[owner(i)].is_some() {
            if let Some(cell) = cell_of(&merged.points()[i], cfg) {
                by_cell.entry(cell).or_default().push(i);
            }
        }
    }
    let mut hidden = vec![false; merged.len()];
    loop {
        let keep: Vec<usize> = (0..merged.len()).filter(|&i| !hidden[i]).collect();
        let cloud = if keep.len() == merged.len() {
            merged.clone()
        } else {
            PointCloud::new(keep.iter().map(|&i| merged.points()[i]).collect())?
        };
        let img = project_tagged(&cloud, cfg, keep.partition_point(|&i| i < n_scene))?;
        let mut changed = false;
        for (row, col, c) in img.occupied() {
            if c.provenance != Provenance::Object {
                continue;
            }
            let i = keep[c.index];
            let Some(occ) = &occluders[owner(i)] else {
                continue;
            };
            if !occ.hides(merged.points()[i].xyz(), (row, col)) {
                continue;
            }
            for &j in &by_cell[&(row, col)] {
                if !hidden[j] {
                    if let Some(o) = &occluders[owner(j)] {
                        if o.hides(merged.points()[j].xyz(), (row, col)) {
                            hidden[j] = true;
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return Ok(img.surviving_indices().into_iter().map(|k| keep[k]).collect());
        }
    }
}

/// Merges already placed objects into the scene.
///
/// The merged cloud goes through projection and reprojection, so occluded
/// scene and object points disappear and object points follow the beam
/// pattern. Surviving object points get synthesized intensities and the
/// policy's anomaly label. Output order: surviving scene points in original
/// order, then each object's surviving points.
pub fn compose_scan(
    scene: &PointCloud,
    labels: &LabelArray,
    objects: &[AnomalyObject],
    cfg: &SensorConfig,
    policy: &SplitPolicy,
    intensity: &IntensityParams,
    seed: u64,
) -> Result<ComposedScan> {
    labels.check_pairs_with(scene)?;
    let n_scene = scene.len();
    let mut merged = scene.points().to_vec();
    let mut ranges = Vec::with_capacity(objects.len());
    for (k, obj) in objects.iter().enumerate() {
        let pts = obj.scan_points();
        if let Some(p) = pts.iter().find(|p| p.xy_norm() > policy.max_radius) {
            return Err(Error::validation(format!(
                "object {k} ({}) has a point at {:.3} m, beyond the {} m insertion radius",
                obj.category,
                p.xy_norm(),
                policy.max_radius
            )));
        }
        ranges.push(merged.len()..merged.len() + pts.len());
        merged.extend(pts);
    }
    let merged = PointCloud::new(merged)?;
    let survivors = visible_points(&merged, n_scene, objects, &ranges, cfg)?;
    let split = survivors.partition_point(|&i| i < n_scene);

    let mut out: Vec<Point> = survivors[..split].iter().map(|&i| merged.points()[i]).collect();
    let mut words: Vec<u32> = survivors[..split].iter().map(|&i| labels.words()[i]).collect();
    let scene_points = out.len();
    let scene_mean = scene.mean_intensity();

    let mut outcomes = Vec::with_capacity(objects.len());
    let mut rest = &survivors[split..];
    for (k, (obj, range)) in objects.iter().zip(&ranges).enumerate() {
        let cut = rest.partition_point(|&i| i < range.end);
        let (mine, tail) = rest.split_at(cut);
        rest = tail;
        let start = out.len();
        if !mine.is_empty() {
            let estimator = NormalEstimator::new(obj.world_points(), intensity.neighbors)?;
            let raw = mine
                .iter()
                .map(|&i| {
                    let p = merged.points()[i].xyz();
                    let (n, _) = estimator.normal_at(p);
                    lambert_intensity(p, n, obj.reflectivity)
                })
                .collect::<Result<Vec<_>>>()?;
            let values = normalize_and_noise(
                &raw,
                scene_mean,
                intensity.sigma,
                intensity.normalization,
                mix_seed(seed, k as u64 + 1),
            )?;
            for (&i, v) in mine.iter().zip(values) {
                let p = merged.points()[i];
                out.push(Point::new(p.x, p.y, p.z, v as f32));
                words.push(policy.anomaly_label as u32);
            }
        }
        outcomes.push(ObjectOutcome {
            category: obj.category.clone(),
            yaw: obj.yaw,
            scale: obj.scale,
            translation: obj.translation,
            start,
            end: out.len(),
        });
    }
    Ok(ComposedScan {
        cloud: PointCloud::new(out)?,
        labels: LabelArray::from_words(words),
        objects: outcomes,
        scene_points,
    })
}

#[derive(Clone, Debug)]
pub struct InsertionResult {
    pub scan: ComposedScan,
    /// Categories of objects that could not be placed visibly.
    pub dropped: Vec<String>,
}

/// Places each object in turn, retrying while it ends up fully occluded
/// or out of view, then composes the final scan.
pub fn insert_objects(
    scene: &PointCloud,
    labels: &LabelArray,
    objects: &[AnomalyObject],
    cfg: &SensorConfig,
    policy: &SplitPolicy,
    intensity: &IntensityParams,
    seed: u64,
) -> Result<InsertionResult> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let compose_seed = rng.random::<u64>();
    let mut placed: Vec<AnomalyObject> = Vec::new();
    let mut footprints: Vec<Footprint> = Vec::new();
    let mut current: Option<ComposedScan> = None;
    let mut dropped = Vec::new();

    let surface = match PlacementSurface::new(scene, labels, policy) {
        Ok(s) => Some(s),
        Err(Error::PlacementInfeasible(why)) => {
            log::debug!("no placement possible in this scan: {why}");
            None
        }
        Err(e) => return Err(e),
    };
    for obj in objects {
        let clearance = obj.xy_radius();
        let mut accepted = false;
        for _ in 0..policy.retries {
            let Some(surface) = &surface else {
                break;
            };
            let site = match surface.pick(policy, clearance, &footprints, &mut rng) {
                Ok(site) => site,
                Err(Error::PlacementInfeasible(why)) => {
                    log::debug!("placement of {} infeasible: {why}", obj.category);
                    break;
                }
                Err(e) => return Err(e),
            };
            let mut trial = placed.clone();
            trial.push(obj.placed_at(site.x, site.y, site.ground_z));
            let composed = compose_scan(scene, labels, &trial, cfg, policy, intensity, compose_seed)?;
            if composed.objects.iter().all(|o| o.surviving() > 0) {
                placed = trial;
                footprints.push(Footprint {
                    x: site.x,
                    y: site.y,
                    radius: clearance,
                });
                current = Some(composed);
                accepted = true;
                break;
            }
        }
        if !accepted {
            dropped.push(obj.category.clone());
        }
    }
    let scan = match current {
        Some(scan) => scan,
        None => compose_scan(scene, labels, &[], cfg, policy, intensity, compose_seed)?,
    };
    Ok(InsertionResult { scan, dropped })
}

/// A scan to forge, with its label file.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSource {
    pub id: String,
    pub scan: PathBuf,
    pub labels: PathBuf,
}

/// Lists `<root>/velodyne/*.bin` paired with `<root>/labels/*.label`.
pub fn discover_scans(root: impl AsRef<Path>) -> Result<Vec<ScanSource>> {
    let root = root.as_ref();
    let vel = root.join("velodyne");
    let mut out: Vec<ScanSource> = fs::read_dir(&vel)
        .map_err(|e| Error::io(&vel, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .map(|scan| {
            let id = scan.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let labels = root.join("labels").join(format!("{id}.label"));
            ScanSource { id, scan, labels }
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Per-scan seed derived from the master seed and the scan id only.
pub fn scan_seed(master_seed: u64, scan_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(scan_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Debug)]
pub struct ForgeParams {
    pub style: DatasetStyle,
    pub policy: SplitPolicy,
    pub sensor: SensorConfig,
    pub catalog: ReflectivityCatalog,
    pub heights: HeightTable,
    pub scale_range: (f64, f64),
    /// Surface samples per object before insertion.
    pub dense_points: usize,
    pub intensity: IntensityParams,
    pub master_seed: u64,
    pub workers: usize,
}

impl ForgeParams {
    pub fn new(style: DatasetStyle, kind: SplitKind, master_seed: u64) -> Self {
        let sensor = style.sensor();
        let mut policy = SplitPolicy::new(kind, style);
        policy.max_radius = sensor.max_insert_radius_m;
        Self {
            style,
            policy,
            sensor,
            catalog: ReflectivityCatalog::default(),
            heights: HeightTable::default(),
            scale_range: (0.5, 1.0),
            dense_points: 50_000,
            intensity: IntensityParams::default(),
            master_seed,
            workers: 1,
        }
    }

    /// Every setting that influences the output, as key-value pairs.
    pub fn describe(&self) -> Vec<(String, String)> {
        let p = &self.policy;
        let s = &self.sensor;
        let classes: Vec<String> = p.surface_classes.iter().map(u16::to_string).collect();
        let counts: Vec<String> = p.count_distribution.iter().map(f64::to_string).collect();
        vec![
            ("dataset".into(), format!("{:?}", self.style)),
            ("split".into(), format!("{:?}", p.kind).to_lowercase()),
            ("master_seed".into(), self.master_seed.to_string()),
            ("anomaly_ratio".into(), p.anomaly_ratio.to_string()),
            ("count_distribution".into(), counts.join(",")),
            ("surface_classes".into(), classes.join(",")),
            ("anomaly_label".into(), p.anomaly_label.to_string()),
            ("max_insert_radius_m".into(), p.max_radius.to_string()),
            ("min_surface_points".into(), p.min_surface_points.to_string()),
            ("neighborhood_radius_m".into(), p.neighborhood_radius.to_string()),
            ("max_z_spread_m".into(), p.max_z_spread.to_string()),
            ("retries".into(), p.retries.to_string()),
            ("beams".into(), s.beams.to_string()),
            ("width".into(), s.width.to_string()),
            ("fov_up_deg".into(), s.fov_up_deg.to_string()),
            ("fov_down_deg".into(), s.fov_down_deg.to_string()),
            ("scale_range".into(), format!("{},{}", self.scale_range.0, self.scale_range.1)),
            ("dense_points".into(), self.dense_points.to_string()),
            ("normal_neighbors".into(), self.intensity.neighbors.to_string()),
            ("noise_sigma".into(), self.intensity.sigma.to_string()),
            ("normalization".into(), format!("{:?}", self.intensity.normalization)),
            ("reflectivity".into(), table(self.catalog.categories().map(|c| {
                (c, self.catalog.reflectivity_of(c).expect("listed category"))
            }))),
            ("target_heights".into(), table(self.heights.entries())),
        ]
    }
}

fn table<'a>(entries: impl Iterator<Item = (&'a str, f64)>) -> String {
    entries.map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanRecord {
    pub scan_id: String,
    pub seed: u64,
    /// Whether the Bernoulli draw asked for anomalies.
    pub anomaly_drawn: bool,
    pub requested: usize,
    pub points: usize,
    pub objects: Vec<ObjectOutcome>,
    pub dropped: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub config: Vec<(String, String)>,
    pub scans: Vec<ScanRecord>,
    pub skipped: Vec<(String, String)>,
}

impl Manifest {
    pub fn anomaly_scans(&self) -> usize {
        self.scans.iter().filter(|s| !s.objects.is_empty()).count()
    }

    pub fn inserted_objects(&self) -> usize {
        self.scans.iter().map(|s| s.objects.len()).sum()
    }

    pub fn aggregates(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("scans_total", self.scans.len() + self.skipped.len()),
            ("scans_written", self.scans.len()),
            ("scans_skipped", self.skipped.len()),
            ("anomaly_scans_drawn", self.scans.iter().filter(|s| s.anomaly_drawn).count()),
            ("anomaly_scans", self.anomaly_scans()),
            ("objects_requested", self.scans.iter().map(|s| s.requested).sum()),
            ("objects_inserted", self.inserted_objects()),
            (
                "objects_dropped",
                self.scans.iter().map(|s| s.dropped.len()).sum(),
            ),
            (
                "anomaly_points",
                self.scans
                    .iter()
                    .flat_map(|s| &s.objects)
                    .map(ObjectOutcome::surviving)
                    .sum(),
            ),
        ]
    }

    /// Tab-separated manifest. Lines starting with `#` carry the resolved
    /// configuration; every other line starts with its record kind:
    ///
    /// ```text
    /// scan     <id> <seed> <anomaly_drawn> <requested> <inserted> <points>
    /// object   <id> <k> <category> <yaw> <scale> <tx> <ty> <tz> <start> <end> <m_prime>
    /// dropped  <id> <category>
    /// skipped  <id> <reason>
    /// total    <key> <value>
    /// ```
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# lidar-ood forge manifest\n");
        for (k, v) in &self.config {
            let _ = writeln!(s, "# {k}={v}");
        }
        for r in &self.scans {
            let _ = writeln!(
                s,
                "scan\t{}\t{}\t{}\t{}\t{}\t{}",
                r.scan_id,
                r.seed,
                r.anomaly_drawn as u8,
                r.requested,
                r.objects.len(),
                r.points
            );
            for (k, o) in r.objects.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "object\t{}\t{k}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.scan_id,
                    o.category,
                    o.yaw,
                    o.scale,
                    o.translation[0],
                    o.translation[1],
                    o.translation[2],
                    o.start,
                    o.end,
                    o.surviving()
                );
            }
            for c in &r.dropped {
                let _ = writeln!(s, "dropped\t{}\t{c}", r.scan_id);
            }
        }
        for (id, why) in &self.skipped {
            let _ = writeln!(s, "skipped\t{id}\t{}", why.replace(['\t', '\n'], " "));
        }
        for (k, v) in self.aggregates() {
            let _ = writeln!(s, "total\t{k}\t{v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (ln, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                line: ln + 1,
                msg: msg.to_string(),
            };
            if let Some(kv) = line.strip_prefix("# ") {
                if let Some((k, v)) = kv.split_once('=') {
                    m.config.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad numeric field"))
            };
            match f[0] {
                "scan" if f.len() == 7 => m.scans.push(ScanRecord {
                    scan_id: f[1].to_string(),
                    seed: f[2].parse().map_err(|_| bad("bad seed"))?,
                    anomaly_drawn: f[3] == "1",
                    requested: num(4)? as usize,
                    points: num(6)? as usize,
                    objects: Vec::new(),
                    dropped: Vec::new(),
                }),
                "object" if f.len() == 12 => {
                    let rec = m
                        .scans
                        .last_mut()
                        .filter(|r| r.scan_id == f[1])
                        .ok_or_else(|| bad("object line without its scan line"))?;
                    rec.objects.push(ObjectOutcome {
                        category: f[3].to_string(),
                        yaw: num(4)?,
                        scale: num(5)?,
                        translation: [num(6)?, num(7)?, num(8)?],
                        start: num(9)? as usize,
                        end: num(10)? as usize,
                    });
                }
                "dropped" if f.len() == 3 => {
                    let rec = m
                        .scans
                        .last_mut()
                        .filter(|r| r.scan_id == f[1])
                        .ok_or_else(|| bad("dropped line without its scan line"))?;
                    rec.dropped.push(f[2].to_string());
                }
                "skipped" if f.len() == 3 => m.skipped.push((f[1].to_string(), f[2].to_string())),
                "total" | "" => {}
                _ => return Err(bad("unrecognized manifest line")),
            }
        }
        Ok(m)
    }
}

fn forge_one(
    src: &ScanSource,
    bank: &MeshBank,
    params: &ForgeParams,
    out_dir: &Path,
) -> Result<ScanRecord> {
    let (scene, labels) = read_pair(&src.scan, &src.labels)?;
    let seed = scan_seed(params.master_seed, &src.id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = &params.policy;
    let anomaly_drawn = rng.random_bool(policy.anomaly_ratio);
    let requested = if anomaly_drawn {
        policy.draw_object_count(&mut rng)
    } else {
        0
    };
    let mut templates = Vec::with_capacity(requested);
    for _ in 0..requested {
        let entry = &bank.entries[rng.random_range(0..bank.len())];
        let sample_seed = rng.random::<u64>();
        let augment_seed = rng.random::<u64>();
        let obj = AnomalyObject::from_mesh(
            &entry.mesh,
            &entry.category,
            &params.catalog,
            params.dense_points,
            sample_seed,
        )?;
        let augment = AugmentParams {
            scale_range: params.scale_range,
            fixed_yaw: None,
            target_height: params.heights.height_of(&entry.category),
        };
        templates.push(obj.augment(&augment, augment_seed));
    }
    let insert_seed = rng.random::<u64>();
    let result = insert_objects(
        &scene,
        &labels,
        &templates,
        &params.sensor,
        policy,
        &params.intensity,
        insert_seed,
    )?;
    write_scan(&result.scan.cloud, out_dir.join("velodyne").join(format!("{}.bin", src.id)))?;
    write_labels(&result.scan.labels, out_dir.join("labels").join(format!("{}.label", src.id)))?;
    Ok(ScanRecord {
        scan_id: src.id.clone(),
        seed,
        anomaly_drawn,
        requested,
        points: result.scan.cloud.len(),
        objects: result.scan.objects,
        dropped: result.dropped,
    })
}

/// Forges a whole split into `out_dir`.
///
/// Output is written to a sibling staging directory and renamed into place
/// only after every scan and the manifest are written. The result depends on
/// the master seed and scan ids only, never on `params.workers`.
pub fn forge_split(
    scans: &[ScanSource],
    bank: &MeshBank,
    params: &ForgeParams,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if scans.is_empty() {
        return Err(Error::validation("no scans to forge"));
    }
    if bank.is_empty() {
        return Err(Error::validation("mesh bank is empty"));
    }
    params.policy.validate()?;
    params.sensor.validate()?;
    if out_dir.exists() {
        return Err(Error::validation(format!(
            "output directory {} already exists",
            out_dir.display()
        )));
    }
    let name = out_dir
        .file_name()
        .ok_or_else(|| Error::validation("output path has no directory name"))?
        .to_string_lossy();
    let staging = out_dir.with_file_name(format!(".{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    for sub in ["velodyne", "labels"] {
        let d = staging.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.workers.max(1))
        .build()
        .map_err(|e| Error::validation(e.to_string()))?;
    let results: Vec<Result<ScanRecord>> =
        pool.install(|| scans.par_iter().map(|s| forge_one(s, bank, params, &staging)).collect());

    let mut manifest = Manifest {
        config: params.describe(),
        ..Manifest::default()
    };
    for (src, res) in scans.iter().zip(results) {
        match res {
            Ok(rec) => manifest.scans.push(rec),
            Err(e) => {
                log::warn!("skipping scan {}: {e}", src.id);
                manifest.skipped.push((src.id.clone(), e.to_string()));
            }
        }
    }
    let mpath = staging.join("manifest.tsv");
    fs::write(&mpath, manifest.to_tsv()).map_err(|e| Error::io(&mpath, e))?;
    fs::rename(&staging, out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::range_projection::{project, reproject};
    use crate::synthetic::{flat_road_scan, FlatSceneParams};

    fn disc_scene(radius: f64, z: f32, n: usize, seed: u64) -> (PointCloud, LabelArray) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                let r = radius * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                Point::new((r * a.cos()) as f32, (r * a.sin()) as f32, z, 0.3)
            })
            .collect();
        (PointCloud::new(pts).unwrap(), LabelArray::from_classes(vec![40; n]))
    }

    #[test]
    fn policy_constants() {
        let s = SplitPolicy::new(SplitKind::Single, DatasetStyle::SemanticKitti);
        assert_eq!(s.anomaly_ratio, 0.40);
        assert_eq!(s.count_distribution, vec![1.0]);
        assert_eq!(s.anomaly_label, 2);
        let m = SplitPolicy::new(SplitKind::Multi, DatasetStyle::NuScenes);
        assert_eq!(m.anomaly_ratio, 0.60);
        assert_eq!(m.count_distribution, vec![0.40, 0.30, 0.20, 0.10]);
        assert_eq!(m.anomaly_label, 100);
        assert_eq!(m.max_radius, 50.0);
        s.validate().unwrap();
        m.validate().unwrap();
    }

    #[test]
    fn flat_disc_placement() {
        let (scene, labels) = disc_scene(20.0, -1.7, 5000, 1);
        let policy = SplitPolicy::new(SplitKind::Single, DatasetStyle::SemanticKitti);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = pick_placement(&scene, &labels, &policy, 0.5, &[], &mut rng).unwrap();
            assert!(p.x.hypot(p.y) <= 20.0);
            assert!((p.ground_z + 1.7).abs() <= 0.02);
        }
    }

    #[test]
    fn no_road_is_infeasible() {
        let (scene, _) = disc_scene(20.0, -1.7, 500, 1);
        let labels = LabelArray::from_classes(vec![48; 500]);
        let policy = SplitPolicy::new(SplitKind::Single, DatasetStyle::SemanticKitti);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            pick_placement(&scene, &labels, &policy, 0.5, &[], &mut rng),
            Err(Error::PlacementInfeasible(_))
        ));
        // sidewalk is allowed in the multi split
        let multi = SplitPolicy::new(SplitKind::Multi, DatasetStyle::SemanticKitti);
        assert!(pick_placement(&scene, &labels, &multi, 0.5, &[], &mut rng).is_ok());
    }

    #[test]
    fn steps_are_rejected_as_not_flat() {
        // alternating heights 0.5 m apart everywhere
        let (scene, labels) = disc_scene(10.0, -1.7, 2000, 4);
        let pts: Vec<Point> = scene
            .points()
            .iter()
            .enumerate()
            .map(|(i, p)| Point::new(p.x, p.y, p.z + if i % 2 == 0 { 0.5 } else { 0.0 }, p.intensity))
            .collect();
        let scene = PointCloud::new(pts).unwrap();
        let policy = SplitPolicy::new(SplitKind::Single, DatasetStyle::SemanticKitti);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pick_placement(&scene, &labels, &policy, 0.1, &[], &mut rng).is_err());
    }

    #[test]
    fn occupied_footprints_are_avoided() {
        let (scene, labels) = disc_scene(20.0, -1.7, 5000, 3);
        let policy = SplitPolicy::new(SplitKind::Multi, DatasetStyle::SemanticKitti);
        let taken = [Footprint {
            x: 0.0,
            y: 0.0,
            radius: 15.0,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = pick_placement(&scene, &labels, &policy, 1.0, &taken, &mut rng).unwrap();
            assert!(p.x.hypot(p.y) >= 16.0);
        }
    }

    #[test]
    fn empty_insertion_is_plain_reprojection() {
        let cfg = SensorConfig::kitti();
        let (scene, labels) = flat_road_scan(&cfg, &FlatSceneParams::default(), 3);
        let policy = SplitPolicy::new(SplitKind::Single, DatasetStyle::SemanticKitti);
        let composed = compose_scan(&scene, &labels, &[], &cfg, &policy, &IntensityParams::default(), 0).unwrap();
        let expected = reproject(&project(&scene, &cfg).unwrap(), &scene);
        assert!(composed.cloud.bit_eq(&expected));
        let idx = project(&scene, &cfg).unwrap().surviving_indices();
        let expected_words: Vec<u32> = idx.iter().map(|&i| labels.words()[i]).collect();
        assert_eq!(composed.labels.words(), &expected_words[..]);
    }

    #[test]
    fn seeds_are_stable() {
        assert_eq!(scan_seed(7, "000001"), scan_seed(7, "000001"));
        assert_ne!(scan_seed(7, "000001"), scan_seed(7, "000002"));
        assert_ne!(scan_seed(7, "000001"), scan_seed(8, "000001"));
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            config: vec![("split".into(), "multi".into())],
            scans: vec![ScanRecord {
                scan_id: "000003".into(),
                seed: 99,
                anomaly_drawn: true,
                requested: 2,
                points: 120,
                objects: vec![ObjectOutcome {
                    category: "flower pot".into(),
                    yaw: 1.25,
                    scale: 0.5,
                    translation: [10.0, -2.5, -1.73],
                    start: 100,
                    end: 120,
                }],
                dropped: vec!["tent".into()],
            }],
            skipped: vec![("000004".into(), "I/O error".into())],
        };
        let text = m.to_tsv();
        assert!(text.contains("total\tobjects_inserted\t1"));
        assert_eq!(Manifest::parse(&text).unwrap(), m);
    }
}
