#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lidar_ood::feature_scoring::FeatureMatrix;
use lidar_ood::scan_io::{read_labels, write_labels, LabelArray, SensorConfig};
use lidar_ood::synthetic::{write_flat_road_sequence, write_mesh_bank, FlatSceneParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lidar-ood"))
}

pub fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed: {cmd:?}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

/// `key=value` lines of a command's output.
pub fn value_of(text: &str, key: &str) -> Option<f64> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == key)
        .and_then(|(_, v)| v.trim().parse().ok())
}

/// A flat-road sequence plus a mesh tree under `root`.
pub fn write_inputs(root: &Path, scans: usize, azimuth_steps: usize) -> (PathBuf, PathBuf) {
    let seq = root.join("seq");
    let meshes = root.join("meshes");
    let params = FlatSceneParams {
        azimuth_steps,
        ..FlatSceneParams::default()
    };
    write_flat_road_sequence(&seq, &SensorConfig::kitti(), &params, scans, 11).unwrap();
    write_mesh_bank(&meshes).unwrap();
    (seq, meshes)
}

/// Files under `root` with their bytes, sorted by relative path.
pub fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn label_ids(dir: &Path) -> Vec<String> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "label"))
        .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    ids
}

/// Stand-in network outputs for a labeled scan: inliers get a confident
/// semantic row aligned with the prototype of their class and a large
/// contrastive norm; anomalies get diffuse rows near the origin.
pub fn synthetic_features(labels: &LabelArray, anomaly: u16, classes: usize, seed: u64) -> (FeatureMatrix, FeatureMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let n = labels.len();
    let mut sem = Vec::with_capacity(n * classes);
    let mut cont = Vec::with_capacity(n * classes);
    for c in labels.classes() {
        if c == anomaly {
            for _ in 0..classes {
                sem.push(noise.sample(&mut rng));
                cont.push(0.6 * noise.sample(&mut rng));
            }
        } else {
            let k = c as usize % classes;
            let gain: f64 = rng.random_range(3.0..5.0);
            for j in 0..classes {
                let hot = if j == k { gain } else { 0.0 };
                sem.push(hot + noise.sample(&mut rng));
                cont.push(if j == k { 3.0 } else { 0.0 } + noise.sample(&mut rng));
            }
        }
    }
    (
        FeatureMatrix::new(n, classes, sem).unwrap(),
        FeatureMatrix::new(n, classes, cont).unwrap(),
    )
}

/// Identity prototypes, one per class.
pub fn identity_prototypes(classes: usize) -> FeatureMatrix {
    let mut data = vec![0.0; classes * classes];
    for k in 0..classes {
        data[k * classes + k] = 1.0;
    }
    FeatureMatrix::new(classes, classes, data).unwrap()
}

/// Writes features for every labeled scan of a forged tree, plus training
/// labels (`class % classes`, anomalies mapped out of range).
pub fn write_features(forged: &Path, out: &Path, classes: usize, anomaly: u16) -> usize {
    fs::create_dir_all(out.join("features")).unwrap();
    fs::create_dir_all(out.join("train_labels")).unwrap();
    let ids = label_ids(&forged.join("labels"));
    for (i, id) in ids.iter().enumerate() {
        let labels = read_labels(forged.join("labels").join(format!("{id}.label"))).unwrap();
        let (sem, cont) = synthetic_features(&labels, anomaly, classes, 1000 + i as u64);
        sem.write(out.join("features").join(format!("{id}.sem"))).unwrap();
        cont.write(out.join("features").join(format!("{id}.cont"))).unwrap();
        let train = LabelArray::from_classes(labels.classes().map(|c| {
            if c == anomaly {
                u16::MAX
            } else {
                c % classes as u16
            }
        }));
        write_labels(&train, out.join("train_labels").join(format!("{id}.label"))).unwrap();
    }
    identity_prototypes(classes).write(out.join("prototypes.feat")).unwrap();
    ids.len()
}
