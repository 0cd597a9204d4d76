//! Procedural scans and meshes for tests, demos and smoke runs.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh_bank::{write_off, TriangleMesh};
use crate::scan_io::{write_labels, write_scan, LabelArray, Point, PointCloud, SensorConfig};

/// Class ids written into synthetic scenes.
#[derive(Clone, Copy, Debug)]
pub struct SceneClasses {
    pub road: u16,
    pub sidewalk: u16,
    pub building: u16,
}

impl SceneClasses {
    /// SemanticKITTI raw ids.
    pub const KITTI: Self = Self {
        road: 40,
        sidewalk: 48,
        building: 50,
    };
}

#[derive(Clone, Debug)]
pub struct FlatSceneParams {
    /// Sensor height above the ground plane.
    pub sensor_height: f64,
    /// Half-width of the road strip along x.
    pub road_half_width: f64,
    /// Ground returns beyond this xy range are dropped; the ray hits the wall.
    pub ground_range: f64,
    /// Radius of the cylindrical wall that closes the scene.
    pub wall_radius: f64,
    /// Azimuth samples per beam.
    pub azimuth_steps: usize,
    pub classes: SceneClasses,
}

impl Default for FlatSceneParams {
    fn default() -> Self {
        Self {
            sensor_height: 1.73,
            road_half_width: 6.0,
            ground_range: 55.0,
            wall_radius: 60.0,
            azimuth_steps: 1024,
            classes: SceneClasses::KITTI,
        }
    }
}

/// Ray-casts a flat-ground scene: a road strip along x flanked by sidewalk,
/// enclosed by a cylindrical building wall.
pub fn flat_road_scan(cfg: &SensorConfig, params: &FlatSceneParams, seed: u64) -> (PointCloud, LabelArray) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fov = cfg.fov_up_deg + cfg.fov_down_deg;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for row in 0..cfg.beams {
        let elev = (cfg.fov_up_deg - (row as f64 + 0.5) * fov / cfg.beams as f64).to_radians();
        for step in 0..params.azimuth_steps {
            let az = (step as f64 + rng.random_range(0.0..1.0)) * TAU / params.azimuth_steps as f64;
            let (s, c) = az.sin_cos();
            let ground = if elev < 0.0 {
                Some(params.sensor_height / (-elev).tan())
            } else {
                None
            };
            let (xy, z, class) = match ground {
                Some(d) if d <= params.ground_range => {
                    let y = d * s;
                    let class = if y.abs() <= params.road_half_width {
                        params.classes.road
                    } else {
                        params.classes.sidewalk
                    };
                    let jitter = rng.random_range(-0.005..0.005);
                    (d, -params.sensor_height + jitter, class)
                }
                _ => (params.wall_radius, params.wall_radius * elev.tan(), params.classes.building),
            };
            let intensity: f32 = rng.random_range(0.1..0.5);
            points.push(Point::new((xy * c) as f32, (xy * s) as f32, z as f32, intensity));
            labels.push(class);
        }
    }
    (
        PointCloud::new(points).expect("synthetic points are finite"),
        LabelArray::from_classes(labels),
    )
}

/// One point at the center ray of every range-image cell whose column lies
/// within `half_angle_deg` of the +x axis, all on the plane `x = distance`.
/// Whatever sits behind that plane inside the angular window is occluded.
pub fn occluding_wall(cfg: &SensorConfig, distance: f64, half_angle_deg: f64, class: u16) -> (PointCloud, LabelArray) {
    let fov = cfg.fov_total_rad();
    let mut points = Vec::new();
    for row in 0..cfg.beams {
        let elev = (1.0 - (row as f64 + 0.5) / cfg.beams as f64) * fov - cfg.fov_down_rad();
        for col in 0..cfg.width {
            let az = std::f64::consts::PI * (1.0 - 2.0 * (col as f64 + 0.5) / cfg.width as f64);
            if az.abs() > half_angle_deg.to_radians() {
                continue;
            }
            let t = distance / (elev.cos() * az.cos());
            points.push(Point::new(
                (t * elev.cos() * az.cos()) as f32,
                (t * elev.cos() * az.sin()) as f32,
                (t * elev.sin()) as f32,
                0.3,
            ));
        }
    }
    let n = points.len();
    (
        PointCloud::new(points).expect("wall points are finite"),
        LabelArray::from_classes(vec![class; n]),
    )
}

/// Axis-aligned box with its base on z = 0.
pub fn box_mesh(sx: f64, sy: f64, sz: f64) -> TriangleMesh {
    let (hx, hy) = (sx / 2.0, sy / 2.0);
    let v = vec![
        [-hx, -hy, 0.0],
        [hx, -hy, 0.0],
        [hx, hy, 0.0],
        [-hx, hy, 0.0],
        [-hx, -hy, sz],
        [hx, -hy, sz],
        [hx, hy, sz],
        [-hx, hy, sz],
    ];
    let f = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    TriangleMesh::new(v, f).expect("box is well formed")
}

/// Latitude-longitude sphere.
pub fn uv_sphere(radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    let mut v = vec![[0.0, 0.0, radius]];
    for r in 1..rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = TAU * s as f64 / segments as f64;
            v.push([
                radius * theta.sin() * phi.cos(),
                radius * theta.sin() * phi.sin(),
                radius * theta.cos(),
            ]);
        }
    }
    v.push([0.0, 0.0, -radius]);
    let south = v.len() - 1;
    let idx = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
    let mut f = Vec::new();
    for s in 0..segments {
        f.push([0, idx(1, s), idx(1, s + 1)]);
        f.push([south, idx(rings - 1, s + 1), idx(rings - 1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            f.push([idx(r, s), idx(r + 1, s), idx(r + 1, s + 1)]);
            f.push([idx(r, s), idx(r + 1, s + 1), idx(r, s + 1)]);
        }
    }
    TriangleMesh::new(v, f).expect("sphere is well formed")
}

/// Writes a small ModelNet-style mesh tree (`<category>/train/*.off`).
pub fn write_mesh_bank(root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    let meshes = [
        ("chair", box_mesh(0.5, 0.5, 0.9)),
        ("glass_box", box_mesh(0.6, 0.4, 0.5)),
        ("bowl", uv_sphere(0.3, 8, 12)),
        ("wardrobe", box_mesh(1.0, 0.6, 1.8)),
    ];
    for (cat, mesh) in meshes {
        let dir = root.join(cat).join("train");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{cat}_0001.off"));
        fs::write(&path, write_off(&mesh)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Writes `count` flat-road scans in KITTI layout (`velodyne/`, `labels/`),
/// named `000000` upward.
pub fn write_flat_road_sequence(
    root: impl AsRef<Path>,
    cfg: &SensorConfig,
    params: &FlatSceneParams,
    count: usize,
    seed: u64,
) -> Result<()> {
    let root = root.as_ref();
    for sub in ["velodyne", "labels"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for i in 0..count {
        let (cloud, labels) = flat_road_scan(cfg, params, seed.wrapping_add(i as u64));
        write_scan(&cloud, root.join("velodyne").join(format!("{i:06}.bin")))?;
        write_labels(&labels, root.join("labels").join(format!("{i:06}.label")))?;
    }
    Ok(())
}
