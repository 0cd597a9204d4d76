//! Anomaly object meshes: OFF loading, area-uniform surface sampling,
//! material reflectivity and pose/scale augmentation.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scan_io::Point;

pub type Vec3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some((fi, f)) = faces.iter().enumerate().find(|(_, f)| f.iter().any(|&i| i >= n)) {
            return Err(Error::validation(format!(
                "face {fi} references vertex {:?} but mesh has {n} vertices",
                f
            )));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("mesh has a non-finite vertex"));
        }
        Ok(Self { vertices, faces })
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face].map(|i| self.vertices[i]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn face_areas(&self) -> Vec<f64> {
        (0..self.faces.len()).map(|f| self.face_area(f)).collect()
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas().iter().sum()
    }
}

/// Parses ASCII OFF. Tolerates the header glued to the counts line
/// (`OFF4 4 0`), which occurs in ModelNet. Polygons are fan-triangulated.
pub fn parse_off(text: &str) -> Result<TriangleMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file, expected OFF header".into(),
    })?;
    let rest = header.strip_prefix("OFF").ok_or_else(|| Error::Parse {
        line: hline,
        msg: format!("expected OFF header, found `{header}`"),
    })?;
    let (cline, counts) = if rest.trim().is_empty() {
        lines.next().ok_or(Error::Parse {
            line: hline + 1,
            msg: "missing counts line".into(),
        })?
    } else {
        (hline, rest.trim())
    };

    let parse_usize = |tok: &str, line: usize| {
        tok.parse::<usize>().map_err(|_| Error::Parse {
            line,
            msg: format!("expected non-negative integer, found `{tok}`"),
        })
    };
    let counts: Vec<&str> = counts.split_whitespace().collect();
    if counts.len() < 2 {
        return Err(Error::Parse {
            line: cline,
            msg: "counts line needs vertex and face counts".into(),
        });
    }
    let n_vert = parse_usize(counts[0], cline)?;
    let n_face = parse_usize(counts[1], cline)?;

    let mut vertices = Vec::with_capacity(n_vert);
    for _ in 0..n_vert {
        let (line, text) = lines.next().ok_or(Error::Parse {
            line: cline,
            msg: format!("expected {n_vert} vertices, file ended after {}", vertices.len()),
        })?;
        let vals: Vec<f64> = text
            .split_whitespace()
            .take(3)
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line,
                msg: format!("bad vertex `{text}`"),
            })?;
        if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: format!("bad vertex `{text}`"),
            });
        }
        vertices.push([vals[0], vals[1], vals[2]]);
    }

    let mut faces = Vec::with_capacity(n_face);
    for read in 0..n_face {
        let (line, text) = lines.next().ok_or(Error::Parse {
            line: cline,
            msg: format!("expected {n_face} faces, file ended after {read}"),
        })?;
        let toks: Vec<&str> = text.split_whitespace().collect();
        let k = parse_usize(toks[0], line)?;
        if k < 3 || toks.len() < k + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("bad face `{text}`"),
            });
        }
        let idx = toks[1..=k]
            .iter()
            .map(|t| parse_usize(t, line))
            .collect::<Result<Vec<_>>>()?;
        if let Some(bad) = idx.iter().find(|&&i| i >= n_vert) {
            return Err(Error::Parse {
                line,
                msg: format!("face index {bad} out of range for {n_vert} vertices"),
            });
        }
        for j in 1..k - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    TriangleMesh::new(vertices, faces)
}

pub fn load_off(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_off(&text)
}

pub fn write_off(mesh: &TriangleMesh) -> String {
    let mut s = format!("OFF\n{} {} 0\n", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        s.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in &mesh.faces {
        s.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    s
}

/// Samples `n` points uniformly over the surface, returning the face each
/// point was drawn from alongside it.
pub fn sample_surface_with_faces(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<(usize, Vec3)>> {
    if n == 0 {
        return Err(Error::validation("sample count must be positive"));
    }
    let areas = mesh.face_areas();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) {
        return Err(Error::validation("mesh has zero surface area"));
    }
    let faces = WeightedIndex::new(&areas).map_err(|e| Error::validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let f = faces.sample(&mut rng);
            let [a, b, c] = mesh.faces[f].map(|i| mesh.vertices[i]);
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let p = std::array::from_fn(|k| a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]));
            (f, p)
        })
        .collect())
}

pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    Ok(sample_surface_with_faces(mesh, n, seed)?
        .into_iter()
        .map(|(_, p)| p)
        .collect())
}

/// Reflectivity table for the anomaly categories, keyed by category name.
#[derive(Clone, Debug, PartialEq)]
pub struct ReflectivityCatalog {
    entries: BTreeMap<String, f64>,
}

const REFLECTIVITY: [(&str, f64); 29] = [
    ("bathtub", 0.60),
    ("bed", 0.40),
    ("bookshelf", 0.40),
    ("bottle", 0.25),
    ("bowl", 0.60),
    ("chair", 0.35),
    ("cup", 0.60),
    ("desk", 0.40),
    ("dresser", 0.40),
    ("flower pot", 0.45),
    ("glass box", 0.20),
    ("lamp", 0.35),
    ("laptop", 0.30),
    ("mantel", 0.40),
    ("monitor", 0.25),
    ("night stand", 0.40),
    ("piano", 0.50),
    ("radio", 0.35),
    ("range hood", 0.45),
    ("sink", 0.60),
    ("sofa", 0.40),
    ("stool", 0.35),
    ("table", 0.40),
    ("tent", 0.30),
    ("toilet", 0.60),
    ("tv stand", 0.40),
    ("vase", 0.55),
    ("wardrobe", 0.40),
    ("xbox", 0.30),
];

/// Approximate real-world heights in meters used as the scale target.
const TARGET_HEIGHT_M: [(&str, f64); 29] = [
    ("bathtub", 0.60),
    ("bed", 0.60),
    ("bookshelf", 1.20),
    ("bottle", 0.35),
    ("bowl", 0.20),
    ("chair", 0.90),
    ("cup", 0.15),
    ("desk", 0.75),
    ("dresser", 1.00),
    ("flower pot", 0.40),
    ("glass box", 0.50),
    ("lamp", 0.60),
    ("laptop", 0.30),
    ("mantel", 1.00),
    ("monitor", 0.50),
    ("night stand", 0.60),
    ("piano", 1.10),
    ("radio", 0.30),
    ("range hood", 0.60),
    ("sink", 0.40),
    ("sofa", 0.80),
    ("stool", 0.60),
    ("table", 0.75),
    ("tent", 1.20),
    ("toilet", 0.75),
    ("tv stand", 0.60),
    ("vase", 0.45),
    ("wardrobe", 1.60),
    ("xbox", 0.30),
];

/// ModelNet directory names use underscores (`flower_pot`).
pub fn normalize_category(name: &str) -> String {
    name.trim().replace('_', " ").to_lowercase()
}

fn load_table(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, f64> = toml::from_str(&text).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(raw.into_iter().map(|(k, v)| (normalize_category(&k), v)).collect())
}

impl Default for ReflectivityCatalog {
    fn default() -> Self {
        Self {
            entries: REFLECTIVITY.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl ReflectivityCatalog {
    pub fn new(entries: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((k, v)) = entries.iter().find(|(_, &v)| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::validation(format!(
                "reflectivity for `{k}` is {v}, expected a value in (0, 1]"
            )));
        }
        Ok(Self {
            entries: entries.into_iter().map(|(k, v)| (normalize_category(&k), v)).collect(),
        })
    }

    /// Loads `"category" = value` lines; entries override the built-in table.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut entries = Self::default().entries;
        entries.extend(load_table(path.as_ref())?);
        Self::new(entries)
    }

    pub fn reflectivity_of(&self, category: &str) -> Result<f64> {
        self.entries
            .get(&normalize_category(category))
            .copied()
            .ok_or_else(|| Error::UnknownCategory {
                category: category.to_string(),
                known: self.entries.keys().cloned().collect::<Vec<_>>().join(", "),
            })
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-category physical target height used to size objects in the scene.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightTable {
    entries: BTreeMap<String, f64>,
}

impl Default for HeightTable {
    fn default() -> Self {
        Self {
            entries: TARGET_HEIGHT_M.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

impl HeightTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut entries = Self::default().entries;
        entries.extend(load_table(path.as_ref())?);
        if let Some((k, v)) = entries.iter().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
            return Err(Error::validation(format!("target height for `{k}` is {v}")));
        }
        Ok(Self { entries })
    }

    pub fn height_of(&self, category: &str) -> Option<f64> {
        self.entries.get(&normalize_category(category)).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Surface-sampled anomaly instance.
///
/// `local` holds the points in the object frame: centered in xy, resting on
/// z = 0, already rotated and scaled. `translation` moves the frame into the
/// scan.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyObject {
    pub category: String,
    pub reflectivity: f64,
    pub local: Vec<Vec3>,
    pub yaw: f64,
    pub scale: f64,
    pub translation: Vec3,
    /// Source mesh in the object frame, kept in step with `local`. Used to
    /// decide which samples the object hides from the sensor itself.
    pub surface: Option<TriangleMesh>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Relative scale drawn uniformly from this closed range.
    pub scale_range: (f64, f64),
    /// Forces the yaw instead of drawing it from [0, 2π).
    pub fixed_yaw: Option<f64>,
    /// When set, the relative scale is applied to the factor that brings the
    /// object's current height to this many meters.
    pub target_height: Option<f64>,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale_range: (0.5, 1.0),
            fixed_yaw: None,
            target_height: None,
        }
    }
}

/// Offset that moves the xy bounding-box center to the origin and the
/// lowest point to z = 0.
fn frame_offset(pts: &[Vec3]) -> Vec3 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, lo[2]]
}

impl AnomalyObject {
    /// Samples `n` surface points and moves them into the object frame.
    pub fn from_mesh(
        mesh: &TriangleMesh,
        category: &str,
        catalog: &ReflectivityCatalog,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let reflectivity = catalog.reflectivity_of(category)?;
        let pts = sample_surface(mesh, n, seed)?;
        let shift = frame_offset(&pts);
        let mut obj = Self::from_points(normalize_category(category), reflectivity, pts);
        let vertices = mesh
            .vertices
            .iter()
            .map(|v| [v[0] - shift[0], v[1] - shift[1], v[2] - shift[2]])
            .collect();
        obj.surface = Some(TriangleMesh {
            vertices,
            faces: mesh.faces.clone(),
        });
        Ok(obj)
    }

    /// Wraps raw points, recentering them so the xy bounding-box center is
    /// the origin and the lowest point sits on z = 0.
    pub fn from_points(category: String, reflectivity: f64, mut pts: Vec<Vec3>) -> Self {
        let shift = frame_offset(&pts);
        for p in &mut pts {
            for k in 0..3 {
                p[k] -= shift[k];
            }
        }
        Self {
            category,
            reflectivity,
            local: pts,
            yaw: 0.0,
            scale: 1.0,
            translation: [0.0; 3],
            surface: None,
        }
    }

    pub fn height(&self) -> f64 {
        self.local.iter().map(|p| p[2]).fold(0.0, f64::max)
    }

    /// Largest xy distance of a point from the object's vertical axis.
    pub fn xy_radius(&self) -> f64 {
        self.local.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max)
    }

    /// Rotates about the vertical axis and scales about the frame origin.
    pub fn augment(&self, params: &AugmentParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let yaw = params.fixed_yaw.unwrap_or_else(|| rng.random_range(0.0..TAU));
        let (lo, hi) = params.scale_range;
        let rel = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let base = match params.target_height {
            Some(target) if self.height() > 0.0 => target / self.height(),
            _ => 1.0,
        };
        self.transformed(yaw, rel * base)
    }

    pub fn transformed(&self, yaw: f64, factor: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let apply = |p: &Vec3| {
            [
                factor * (c * p[0] - s * p[1]),
                factor * (s * p[0] + c * p[1]),
                factor * p[2],
            ]
        };
        let local = self.local.iter().map(apply).collect();
        let surface = self.surface.as_ref().map(|m| TriangleMesh {
            vertices: m.vertices.iter().map(apply).collect(),
            faces: m.faces.clone(),
        });
        Self {
            local,
            surface,
            yaw: (self.yaw + yaw).rem_euclid(TAU),
            scale: self.scale * factor,
            ..self.clone()
        }
    }

    /// Places the object so its frame origin sits at `(x, y, ground_z)`.
    pub fn placed_at(&self, x: f64, y: f64, ground_z: f64) -> Self {
        Self {
            translation: [x, y, ground_z],
            ..self.clone()
        }
    }

    pub fn world_points(&self) -> Vec<Vec3> {
        let t = self.translation;
        self.local
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect()
    }

    /// Source mesh vertices in scan coordinates.
    pub fn world_surface(&self) -> Option<(Vec<Vec3>, &[[usize; 3]])> {
        let t = self.translation;
        self.surface.as_ref().map(|m| {
            let v = m.vertices.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
            (v, m.faces.as_slice())
        })
    }

    /// World points as scan points with the temporary zero intensity.
    pub fn scan_points(&self) -> Vec<Point> {
        self.world_points()
            .into_iter()
            .map(|p| Point::new(p[0] as f32, p[1] as f32, p[2] as f32, 0.0))
            .collect()
    }
}

/// A loaded mesh collection: `<root>/<category>/**/*.off`.
#[derive(Clone, Debug, Default)]
pub struct MeshBank {
    pub entries: Vec<MeshEntry>,
}

#[derive(Clone, Debug)]
pub struct MeshEntry {
    pub category: String,
    pub path: PathBuf,
    pub mesh: TriangleMesh,
}

fn collect_off(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_off(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("off")) {
            out.push(p);
        }
    }
    Ok(())
}

impl MeshBank {
    /// Loads every mesh under `root`, keeping only categories in `catalog`.
    pub fn load_dir(root: impl AsRef<Path>, catalog: &ReflectivityCatalog) -> Result<Self> {
        let root = root.as_ref();
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut entries = Vec::new();
        for dir in dirs {
            let category = normalize_category(&dir.file_name().unwrap_or_default().to_string_lossy());
            if catalog.reflectivity_of(&category).is_err() {
                log::warn!("skipping mesh category `{category}`: no reflectivity entry");
                continue;
            }
            let mut files = Vec::new();
            collect_off(&dir, &mut files)?;
            for path in files {
                let mesh = load_off(&path)?;
                entries.push(MeshEntry {
                    category: category.clone(),
                    path,
                    mesh,
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::validation(format!(
                "no usable OFF meshes found under {}",
                root.display()
            )));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
