//! KITTI-layout scan and label files and the in-memory point cloud.
//!
//! A `.bin` scan is a flat sequence of little-endian `f32` quadruples
//! `(x, y, z, intensity)`. A `.label` file holds one little-endian `u32` per
//! point: the low 16 bits are the semantic class, the high 16 bits an instance
//! id that is carried through untouched.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

const POINT_BYTES: usize = 16;
const LABEL_BYTES: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    /// Euclidean distance to the sensor origin, computed in `f64`.
    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    pub fn xy_norm(&self) -> f64 {
        (self.x as f64).hypot(self.y as f64)
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.intensity.is_finite()
            && self.intensity >= 0.0
    }

    fn bits(&self) -> [u32; 4] {
        [
            self.x.to_bits(),
            self.y.to_bits(),
            self.z.to_bits(),
            self.intensity.to_bits(),
        ]
    }
}

/// A validated scan: every coordinate finite, every intensity non-negative.
#[derive(Clone, Debug, Default)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(idx) = points.iter().position(|p| !p.is_valid()) {
            return Err(Error::validation(format!(
                "point {idx} is not finite or has negative intensity: {:?}",
                points[idx]
            )));
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Mean intensity over all points, 0 for an empty cloud.
    pub fn mean_intensity(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|p| p.intensity as f64).sum::<f64>() / self.points.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * POINT_BYTES);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.intensity] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(POINT_BYTES) {
            return Err(Error::Format {
                offset: (bytes.len() / POINT_BYTES * POINT_BYTES) as u64,
                msg: format!(
                    "scan length {} is not a multiple of {POINT_BYTES} bytes",
                    bytes.len()
                ),
            });
        }
        let points = bytes
            .chunks_exact(POINT_BYTES)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
                Point::new(f(0), f(4), f(8), f(12))
            })
            .collect();
        Self::new(points)
    }

    /// Bitwise equality including NaN payloads and signed zeros.
    pub fn bit_eq(&self, other: &PointCloud) -> bool {
        self.points.len() == other.points.len()
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| a.bits() == b.bits())
    }
}

/// Per-point label words. The semantic class lives in the low 16 bits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelArray {
    words: Vec<u32>,
}

impl LabelArray {
    pub fn from_words(words: Vec<u32>) -> Self {
        Self { words }
    }

    pub fn from_classes(classes: impl IntoIterator<Item = u16>) -> Self {
        Self {
            words: classes.into_iter().map(u32::from).collect(),
        }
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn class(&self, idx: usize) -> u16 {
        (self.words[idx] & 0xFFFF) as u16
    }

    pub fn classes(&self) -> impl Iterator<Item = u16> + '_ {
        self.words.iter().map(|w| (w & 0xFFFF) as u16)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(LABEL_BYTES) {
            return Err(Error::Format {
                offset: (bytes.len() / LABEL_BYTES * LABEL_BYTES) as u64,
                msg: format!(
                    "label length {} is not a multiple of {LABEL_BYTES} bytes",
                    bytes.len()
                ),
            });
        }
        Ok(Self {
            words: bytes
                .chunks_exact(LABEL_BYTES)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        })
    }

    /// Rejects a label array that does not pair with `cloud`.
    pub fn check_pairs_with(&self, cloud: &PointCloud) -> Result<()> {
        if self.len() != cloud.len() {
            return Err(Error::validation(format!(
                "label count {} does not match point count {}",
                self.len(),
                cloud.len()
            )));
        }
        Ok(())
    }
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PointCloud::from_bytes(&bytes)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LabelArray::from_bytes(&bytes)
}

/// Reads a scan and its labels, rejecting a length mismatch.
pub fn read_pair(scan: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<(PointCloud, LabelArray)> {
    let cloud = read_scan(scan)?;
    let labels = read_labels(labels)?;
    labels.check_pairs_with(&cloud)?;
    Ok((cloud, labels))
}

pub fn write_scan(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cloud.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_labels(labels: &LabelArray, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Sensor geometry used for the range image.
///
/// `fov_up_deg` is the upward inclination of the top beam and `fov_down_deg`
/// the downward inclination of the bottom beam, both as positive angles, so
/// the vertical field of view is `|fov_up + fov_down|`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub beams: usize,
    pub width: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    #[serde(default = "default_radius")]
    pub max_insert_radius_m: f64,
}

fn default_radius() -> f64 {
    50.0
}

impl SensorConfig {
    /// HDL-64E as used by SemanticKITTI.
    pub fn kitti() -> Self {
        Self {
            beams: 64,
            width: 2048,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
            max_insert_radius_m: 50.0,
        }
    }

    /// Pandora 40-beam as used by SemanticPOSS.
    pub fn poss() -> Self {
        Self {
            beams: 40,
            width: 2048,
            fov_up_deg: 7.0,
            fov_down_deg: 16.0,
            max_insert_radius_m: 50.0,
        }
    }

    /// HDL-32E as used by nuScenes.
    pub fn nuscenes() -> Self {
        Self {
            beams: 32,
            width: 2048,
            fov_up_deg: 10.0,
            fov_down_deg: 30.0,
            max_insert_radius_m: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 || self.width == 0 {
            return Err(Error::validation("sensor beams and width must be positive"));
        }
        let fov = self.fov_total_rad();
        if !(fov.is_finite() && fov > 0.0) {
            return Err(Error::validation(
                "sensor vertical field of view |fov_up + fov_down| must be positive",
            ));
        }
        if !(self.max_insert_radius_m.is_finite() && self.max_insert_radius_m > 0.0) {
            return Err(Error::validation("max_insert_radius_m must be positive"));
        }
        Ok(())
    }

    pub fn fov_up_rad(&self) -> f64 {
        self.fov_up_deg.to_radians()
    }

    pub fn fov_down_rad(&self) -> f64 {
        self.fov_down_deg.to_radians()
    }

    pub fn fov_total_rad(&self) -> f64 {
        (self.fov_up_deg + self.fov_down_deg).abs().to_radians()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: SensorConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: "<inline>".into(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SensorConfig = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(vals: &[f32]) -> Vec<u8> {
        vals.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn single_point_layout() {
        let cloud = PointCloud::from_bytes(&encode(&[1.0, 2.0, 3.0, 0.5])).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points()[0], Point::new(1.0, 2.0, 3.0, 0.5));
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let cloud = PointCloud::from_bytes(&[]).unwrap();
        assert!(cloud.is_empty());
        assert!(cloud.to_bytes().is_empty());
    }

    #[test]
    fn truncated_scan_reports_offset() {
        let mut bytes = encode(&[1.0, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.1]);
        bytes.push(0);
        assert_eq!(bytes.len(), 33);
        match PointCloud::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 32),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_value_names_index() {
        let bytes = encode(&[1.0, 2.0, 3.0, 0.5, f32::NAN, 0.0, 0.0, 0.0]);
        let err = PointCloud::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("point 1"), "{err}");
    }

    #[test]
    fn nan_cloud_is_rejected_before_write() {
        assert!(PointCloud::new(vec![Point::new(f32::INFINITY, 0.0, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn label_masking() {
        let labels = LabelArray::from_bytes(&[0x0001_0002u32, 0x64].iter().flat_map(|w: &u32| w.to_le_bytes()).collect::<Vec<_>>()).unwrap();
        assert_eq!(labels.class(0), 2);
        assert_eq!(labels.class(1), 100);
        assert_eq!(labels.words()[0] >> 16, 1);
    }

    #[test]
    fn seven_byte_label_file_is_format_error() {
        assert!(matches!(
            LabelArray::from_bytes(&[0u8; 7]),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn pairing_rejects_length_mismatch() {
        let cloud = PointCloud::new(vec![Point::new(1.0, 0.0, 0.0, 0.0)]).unwrap();
        let labels = LabelArray::from_classes([1, 2]);
        assert!(labels.check_pairs_with(&cloud).is_err());
    }

    #[test]
    fn files_round_trip_with_path_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![Point::new(1.5, -2.0, 0.25, 0.75)]).unwrap();
        let labels = LabelArray::from_words(vec![0xABCD_0028]);
        write_scan(&cloud, dir.path().join("a.bin")).unwrap();
        write_labels(&labels, dir.path().join("a.label")).unwrap();
        let (c2, l2) = read_pair(dir.path().join("a.bin"), dir.path().join("a.label")).unwrap();
        assert!(cloud.bit_eq(&c2));
        assert_eq!(labels, l2);

        let missing = dir.path().join("missing.bin");
        let err = read_scan(&missing).unwrap_err().to_string();
        assert!(err.contains("missing.bin"), "{err}");
    }

    #[test]
    fn sensor_config_parses_documented_keys() {
        let cfg = SensorConfig::parse(
            "beams = 64\nwidth = 2048\nfov_up_deg = 3.0\nfov_down_deg = 25.0\nmax_insert_radius_m = 50.0\n",
        )
        .unwrap();
        assert_eq!(cfg, SensorConfig::kitti());
        assert!(SensorConfig::parse("beams = 0\nwidth = 10\nfov_up_deg = 1\nfov_down_deg = 1\n").is_err());
        assert!(SensorConfig::parse("beams = 4\nwidth = 10\nfov_up_deg = 1\nfov_down_deg = -1\n").is_err());
    }

    fn finite_point() -> impl Strategy<Value = Point> {
        (
            -1.0e4f32..1.0e4,
            -1.0e4f32..1.0e4,
            -1.0e4f32..1.0e4,
            0.0f32..10.0,
        )
            .prop_map(|(x, y, z, i)| Point::new(x, y, z, i))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn scan_bytes_round_trip(points in proptest::collection::vec(finite_point(), 0..64)) {
            let cloud = PointCloud::new(points).unwrap();
            let bytes = cloud.to_bytes();
            let back = PointCloud::from_bytes(&bytes).unwrap();
            prop_assert!(cloud.bit_eq(&back));
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn label_bytes_round_trip(words in proptest::collection::vec(any::<u32>(), 0..64)) {
            let labels = LabelArray::from_words(words);
            prop_assert_eq!(LabelArray::from_bytes(&labels.to_bytes()).unwrap(), labels);
        }
    }
}
