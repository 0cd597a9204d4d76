//! Remission synthesis for inserted object points: PCA normals from the
//! dense surface sample, a Lambertian return model, then scan-relative
//! normalization with Gaussian noise.

use std::num::NonZeroUsize;

use kiddo::immutable::float::kdtree::ImmutableKdTree;
use kiddo::SquaredEuclidean;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::mesh_bank::Vec3;

pub const DEFAULT_NEIGHBORS: usize = 10;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;

type Tree = ImmutableKdTree<f64, u64, 3, 32>;

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceNormalField {
    pub normals: Vec<Vec3>,
    /// Set where the neighborhood had rank < 2; the normal then faces the sensor.
    pub degenerate: Vec<bool>,
    pub k: usize,
}

/// kNN index over a dense surface sample.
pub struct NormalEstimator {
    support: Vec<Vec3>,
    tree: Tree,
    k: usize,
}

impl NormalEstimator {
    pub fn new(support: Vec<Vec3>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::validation("normal estimation needs k >= 2"));
        }
        if support.len() < k + 1 {
            return Err(Error::validation(format!(
                "normal estimation with k = {k} needs at least {} points, got {}",
                k + 1,
                support.len()
            )));
        }
        let tree = Tree::new_from_slice(&support);
        Ok(Self { support, tree, k })
    }

    /// Normal at `query` from the covariance of its k nearest support points,
    /// oriented toward the sensor at the origin. The flag is set when the
    /// neighborhood is degenerate.
    pub fn normal_at(&self, query: Vec3) -> (Vec3, bool) {
        let nn = self
            .tree
            .nearest_n::<SquaredEuclidean>(&query, NonZeroUsize::new(self.k).unwrap());
        let nbrs: Vec<Vec3> = nn.iter().map(|n| self.support[n.item as usize]).collect();
        pca_normal(&nbrs, query)
    }
}

fn toward_sensor(query: Vec3) -> Vec3 {
    let d = (query[0] * query[0] + query[1] * query[1] + query[2] * query[2]).sqrt();
    if d > 0.0 {
        [-query[0] / d, -query[1] / d, -query[2] / d]
    } else {
        [0.0, 0.0, 1.0]
    }
}

/// Smallest-eigenvalue eigenvector of the neighborhood covariance.
pub fn pca_normal(nbrs: &[Vec3], query: Vec3) -> (Vec3, bool) {
    let n = nbrs.len() as f64;
    let mean = nbrs.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
    let mut cov = Matrix3::zeros();
    for p in nbrs {
        let d = Vector3::from(*p) - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (small, mid, large) = (order[0], order[1], order[2]);
    let lmax = eig.eigenvalues[large];
    if !(lmax > 0.0) || eig.eigenvalues[mid] <= 1e-10 * lmax {
        return (toward_sensor(query), true);
    }
    let v = eig.eigenvectors.column(small);
    let mut normal = [v[0], v[1], v[2]];
    let len = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
    normal.iter_mut().for_each(|c| *c /= len);
    // sign convention first, then orientation toward the sensor
    if let Some(first) = normal.iter().copied().find(|c| *c != 0.0) {
        if first < 0.0 {
            normal.iter_mut().for_each(|c| *c = -*c);
        }
    }
    let dot = normal[0] * query[0] + normal[1] * query[1] + normal[2] * query[2];
    if dot > 0.0 {
        normal.iter_mut().for_each(|c| *c = -*c);
    }
    (normal, false)
}

/// Normals for every point of `points` estimated from its own k nearest
/// neighbors (the point itself included).
pub fn estimate_normals(points: &[Vec3], k: usize) -> Result<SurfaceNormalField> {
    let est = NormalEstimator::new(points.to_vec(), k)?;
    let (normals, degenerate) = points.iter().map(|&p| est.normal_at(p)).unzip();
    Ok(SurfaceNormalField { normals, degenerate, k })
}

/// Lambertian return `ρ · max(0, −⟨n, r⟩) / d²` for a sensor at the origin,
/// with `r` the unit beam direction toward the point.
pub fn lambert_intensity(p: Vec3, normal: Vec3, reflectivity: f64) -> Result<f64> {
    let d2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
    if !(d2 > 0.0) {
        return Err(Error::validation("intensity undefined at zero distance"));
    }
    let d = d2.sqrt();
    let cos = -(normal[0] * p[0] + normal[1] * p[1] + normal[2] * p[2]) / d;
    Ok(reflectivity * cos.max(0.0) / d2)
}

#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationPolicy {
    /// Scale so the object's mean raw intensity equals the scan mean.
    MeanMatch,
    /// Scale so the object's maximum raw intensity equals the scan mean.
    MaxMatch,
}

impl std::str::FromStr for NormalizationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-match" => Ok(Self::MeanMatch),
            "max-match" => Ok(Self::MaxMatch),
            other => Err(Error::validation(format!(
                "unknown normalization `{other}` (expected mean-match or max-match)"
            ))),
        }
    }
}

/// Rescales raw object intensities relative to `scene_mean`, adds
/// `N(0, (sigma · scene_mean)²)` per point and clamps to [0, 1].
pub fn normalize_and_noise(
    raw: &[f64],
    scene_mean: f64,
    sigma: f64,
    policy: NormalizationPolicy,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(scene_mean > 0.0 && scene_mean.is_finite()) {
        return Err(Error::validation(format!(
            "scene mean intensity must be positive, got {scene_mean}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if raw.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(Error::validation("raw intensities must be finite and non-negative"));
    }
    let reference = match policy {
        NormalizationPolicy::MeanMatch => raw.iter().sum::<f64>() / raw.len().max(1) as f64,
        NormalizationPolicy::MaxMatch => raw.iter().copied().fold(0.0, f64::max),
    };
    let scale = if reference > 0.0 { scene_mean / reference } else { 1.0 };
    let noise = Normal::new(0.0, sigma * scene_mean).map_err(|e| Error::validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(raw
        .iter()
        .map(|&v| {
            let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v * scale + n).clamp(0.0, 1.0)
        })
        .collect())
}
