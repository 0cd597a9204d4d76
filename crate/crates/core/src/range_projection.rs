//! Spherical range-image projection with nearest-return occlusion.
//!
//! Each cell keeps the index of the closest point that falls into it, so
//! reprojection recovers the original points without quantization.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scan_io::{Point, PointCloud, SensorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Scene,
    Object,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub range: f64,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    height: usize,
    width: usize,
    cells: Vec<Option<Cell>>,
}

/// Continuous `(v, u)` image coordinates of a direction, before flooring
/// and clamping. `None` at the origin.
pub fn image_coords(p: [f64; 3], cfg: &SensorConfig) -> Option<(f64, f64)> {
    let [x, y, z] = p;
    let r = (x * x + y * y + z * z).sqrt();
    if !(r > 0.0) {
        return None;
    }
    // atan2(0, 0) is 0, so points on the vertical axis are well defined
    let u = 0.5 * (1.0 - y.atan2(x) / PI) * cfg.width as f64;
    let v = (1.0 - ((z / r).asin() + cfg.fov_down_rad()) / cfg.fov_total_rad()) * cfg.beams as f64;
    Some((v, u))
}

/// Row and column of a point, floored and clamped into the image.
///
/// Returns `None` for points at the origin and for points more than one row
/// outside the vertical field of view; those never reach a sensor beam.
pub fn cell_of(p: &Point, cfg: &SensorConfig) -> Option<(usize, usize)> {
    let (v, u) = image_coords(p.xyz(), cfg)?;
    if !(-1.0..cfg.beams as f64 + 1.0).contains(&v) {
        return None;
    }
    let col = (u.floor().max(0.0) as usize).min(cfg.width - 1);
    let row = (v.floor().max(0.0) as usize).min(cfg.beams - 1);
    Some((row, col))
}

/// Projects a cloud whose points are all scene points.
pub fn project(cloud: &PointCloud, cfg: &SensorConfig) -> Result<RangeImage> {
    project_tagged(cloud, cfg, cloud.len())
}

/// Projects a cloud in which indices `>= first_object` are inserted object
/// points. Collisions keep the smaller range, then the smaller index.
pub fn project_tagged(cloud: &PointCloud, cfg: &SensorConfig, first_object: usize) -> Result<RangeImage> {
    cfg.validate()?;
    let mut img = RangeImage {
        height: cfg.beams,
        width: cfg.width,
        cells: vec![None; cfg.beams * cfg.width],
    };
    for (index, p) in cloud.points().iter().enumerate() {
        let range = p.range();
        if !(range > 0.0) {
            return Err(Error::validation(format!(
                "point {index} lies at the sensor origin (zero range)"
            )));
        }
        let Some((row, col)) = cell_of(p, cfg) else {
            continue;
        };
        let slot = &mut img.cells[row * cfg.width + col];
        let wins = match slot {
            None => true,
            Some(c) => range < c.range,
        };
        if wins {
            let provenance = if index >= first_object {
                Provenance::Object
            } else {
                Provenance::Scene
            };
            *slot = Some(Cell {
                index,
                range,
                provenance,
            });
        }
    }
    Ok(img)
}

impl RangeImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&Cell> {
        self.cells[row * self.width + col].as_ref()
    }

    /// Nonempty cells as `(row, col, cell)` in row-major order.
    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize, &Cell)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i / self.width, i % self.width, c)))
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Indices of winning points, ascending.
    pub fn surviving_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.occupied().map(|(_, _, c)| c.index).collect();
        idx.sort_unstable();
        idx
    }

    /// Grayscale binary PGM. Empty cells are black; occupied cells map range
    /// linearly so the nearest return is brightest.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (lo, hi) = self
            .occupied()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, _, c)| {
                (lo.min(c.range), hi.max(c.range))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.cells.iter().map(|c| match c {
            None => 0u8,
            Some(c) => (1.0 + 254.0 * (1.0 - (c.range - lo) / span)).round() as u8,
        }));
        out
    }
}

/// The winning points of every nonempty cell, in ascending index order,
/// bit-identical to the input.
pub fn reproject(img: &RangeImage, cloud: &PointCloud) -> PointCloud {
    let pts = cloud.points();
    let kept: Vec<Point> = img.surviving_indices().into_iter().map(|i| pts[i]).collect();
    PointCloud::new(kept).expect("subset of a valid cloud is valid")
}

/// Surviving point indices of one provenance grouped by image row (beam).
pub fn beam_rows_of(img: &RangeImage, provenance: Provenance) -> BTreeMap<usize, Vec<usize>> {
    let mut rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, _, c) in img.occupied() {
        if c.provenance == provenance {
            rows.entry(row).or_default().push(c.index);
        }
    }
    rows
}

/// Depth below which a surface hit in front of a sample is treated as the
/// sample's own face.
const OCCLUSION_MARGIN_M: f64 = 2e-5;

/// Triangles of one surface bucketed by the range-image cells they cover,
/// for line-of-sight tests from the sensor origin.
#[derive(Clone, Debug)]
pub struct SurfaceOccluder {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    width: usize,
    bins: HashMap<(usize, usize), Vec<u32>>,
}

impl SurfaceOccluder {
    pub fn new(vertices: Vec<[f64; 3]>, faces: &[[usize; 3]], cfg: &SensorConfig) -> Self {
        let (h, w) = (cfg.beams as i64, cfg.width as i64);
        let mut bins: HashMap<(usize, usize), Vec<u32>> = HashMap::new();
        for (k, f) in faces.iter().enumerate() {
            let Some(coords) = f
                .iter()
                .map(|&i| image_coords(vertices[i], cfg))
                .collect::<Option<Vec<_>>>()
            else {
                continue;
            };
            let vmin = coords.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
            let vmax = coords.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
            let mut umin = coords.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
            let mut umax = coords.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            if umax - umin > w as f64 / 2.0 {
                // straddles the azimuth seam: walk from the high side across it
                let lo = umax;
                umax = umin + w as f64;
                umin = lo;
            }
            // one cell of padding covers the curvature of projected edges
            let rows = (vmin.floor() as i64 - 1).max(0)..=(vmax.floor() as i64 + 1).min(h - 1);
            let cols = umin.floor() as i64 - 1..=umax.floor() as i64 + 1;
            for r in rows {
                for c in cols.clone() {
                    bins.entry((r as usize, c.rem_euclid(w) as usize)).or_default().push(k as u32);
                }
            }
        }
        Self {
            vertices,
            faces: faces.to_vec(),
            width: cfg.width,
            bins,
        }
    }

    /// Whether the segment from the origin to `p`, which projects into
    /// `cell`, crosses the surface clearly before reaching `p`.
    pub fn hides(&self, p: [f64; 3], cell: (usize, usize)) -> bool {
        debug_assert!(cell.1 < self.width);
        let Some(candidates) = self.bins.get(&cell) else {
            return false;
        };
        let dist = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let limit = 1.0 - OCCLUSION_MARGIN_M / dist;
        candidates.iter().any(|&k| {
            let [a, b, c] = self.faces[k as usize].map(|i| self.vertices[i]);
            ray_hit(p, a, b, c).is_some_and(|t| t > 0.0 && t < limit)
        })
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Möller-Trumbore intersection of the ray `t·d` (origin at the sensor) with
/// triangle `abc`; returns `t`.
fn ray_hit(d: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> Option<f64> {
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let h = cross(d, e2);
    let det = dot3(e1, h);
    if det.abs() < 1e-15 {
        return None;
    }
    let inv = 1.0 / det;
    let s = [-a[0], -a[1], -a[2]];
    let u = inv * dot3(s, h);
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(s, e1);
    let v = inv * dot3(d, q);
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(inv * dot3(e2, q))
}
