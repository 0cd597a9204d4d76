//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use lidar_ood::feature_scoring::{
    classify, score_all, score_contrastive, score_cosine, score_entropy, score_fused, score_semantic, softmax,
    FeatureMatrix, FeatureSet, PrototypeBank, ScoreOptions, Similarity, DEFAULT_RADIUS,
};
use lidar_ood::insertion::{
    compose_scan, discover_scans, forge_split, DatasetStyle, ForgeParams, IntensityParams, SplitKind, SplitPolicy,
};
use lidar_ood::intensity_synth::{estimate_normals, lambert_intensity};
use lidar_ood::loss_forward::{
    loss_ce, loss_contrastive, loss_lovasz, loss_objectosphere, loss_prototype, ContrastiveDenominator, LossValue,
    LossWeights,
};
use lidar_ood::mesh_bank::{sample_surface, AnomalyObject, MeshBank, ReflectivityCatalog};
use lidar_ood::metrics::{auroc, average_precision, fpr_at_tpr};
use lidar_ood::range_projection::{cell_of, project, reproject};
use lidar_ood::scan_io::{read_labels, read_scan, LabelArray, Point, PointCloud, SensorConfig};
use lidar_ood::synthetic::{box_mesh, occluding_wall, uv_sphere, write_flat_road_sequence, write_mesh_bank, FlatSceneParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    let s = elapsed.as_secs_f64();
    ensure!(s < limit_s, "took {s:.2} s, limit {limit_s} s");
    Ok(())
}

// 1. Metrics against brute-force oracles.

fn random_eval(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..40);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let prevalence = rng.random_range(0.05..0.6);
        let t: Vec<bool> = (0..n).map(|_| rng.random_bool(prevalence)).collect();
        if t.iter().any(|&x| x) && t.iter().any(|&x| !x) {
            return (s, t);
        }
    }
}

fn pairwise_auroc(s: &[f64], t: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| t[i]) {
        for j in (0..s.len()).filter(|&j| !t[j]) {
            pairs += 1.0;
            wins += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

/// `(tp, fp)` at every distinct threshold, highest first, by direct counting.
fn thresholds(s: &[f64], t: &[bool]) -> Vec<(usize, usize)> {
    let mut thr = s.to_vec();
    thr.sort_by(|a, b| b.total_cmp(a));
    thr.dedup();
    thr.iter()
        .map(|&th| {
            let tp = (0..s.len()).filter(|&i| t[i] && s[i] >= th).count();
            let fp = (0..s.len()).filter(|&i| !t[i] && s[i] >= th).count();
            (tp, fp)
        })
        .collect()
}

fn metric_oracles() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let (s, t) = random_eval(&mut rng);
        let pos = t.iter().filter(|&&x| x).count() as f64;
        let neg = t.len() as f64 - pos;
        let got = auroc(&s, &t).map_err(|e| e.to_string())?;
        let err = (got - pairwise_auroc(&s, &t)).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-12, "instance {k}: auroc off by {err}");

        let table = thresholds(&s, &t);
        let (_, fp) = *table.iter().find(|(tp, _)| *tp as f64 / pos >= 0.95).unwrap();
        let fpr = fpr_at_tpr(&s, &t, 0.95).map_err(|e| e.to_string())?;
        ensure!(fpr == fp as f64 / neg, "instance {k}: fpr {fpr} vs {}", fp as f64 / neg);

        let mut ap = 0.0;
        let mut prev = 0.0;
        for &(tp, fp) in &table {
            let recall = tp as f64 / pos;
            ap += (recall - prev) * (tp as f64 / (tp + fp) as f64);
            prev = recall;
        }
        let got = average_precision(&s, &t).map_err(|e| e.to_string())?;
        ensure!(got == ap, "instance {k}: ap {got} vs {ap}");
    }
    within(start.elapsed(), 10.0)?;
    Ok(format!("1000 instances, worst auroc error {worst:.1e}, {:.2} s", start.elapsed().as_secs_f64()))
}

// 2. Projection keeps the nearest point of each cell.

fn projection_exhaustive() -> Result<String, String> {
    let start = Instant::now();
    let cfg = SensorConfig::kitti();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut kept = 0;
    for k in 0..100 {
        let n = rng.random_range(1_000..20_000);
        let pts: Vec<Point> = (0..n)
            .map(|_| {
                let r = rng.random_range(0.5..90.0f64);
                let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let el = rng.random_range(-28.0f64..5.0).to_radians();
                Point::new(
                    (r * el.cos() * az.cos()) as f32,
                    (r * el.cos() * az.sin()) as f32,
                    (r * el.sin()) as f32,
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        let cloud = PointCloud::new(pts).map_err(|e| e.to_string())?;
        let img = project(&cloud, &cfg).map_err(|e| e.to_string())?;
        let mut best = vec![None::<(f64, usize)>; cfg.beams * cfg.width];
        for (i, p) in cloud.points().iter().enumerate() {
            if let Some((r, c)) = cell_of(p, &cfg) {
                let slot = &mut best[r * cfg.width + c];
                if slot.is_none_or(|(d, _)| p.range() < d) {
                    *slot = Some((p.range(), i));
                }
            }
        }
        for r in 0..cfg.beams {
            for c in 0..cfg.width {
                let got = img.get(r, c).map(|cell| cell.index);
                let want = best[r * cfg.width + c].map(|b| b.1);
                ensure!(got == want, "cloud {k}, cell ({r}, {c}): holds {got:?}, nearest is {want:?}");
            }
        }
        let back = reproject(&img, &cloud);
        let idx = img.surviving_indices();
        ensure!(back.len() == idx.len(), "cloud {k}: reprojected {} of {} cells", back.len(), idx.len());
        for (p, i) in back.points().iter().zip(idx) {
            let o = &cloud.points()[i];
            ensure!(
                p.x.to_bits() == o.x.to_bits() && p.y.to_bits() == o.y.to_bits() && p.z.to_bits() == o.z.to_bits(),
                "cloud {k}: point {i} changed on reprojection"
            );
        }
        kept += back.len();
    }
    within(start.elapsed(), 30.0)?;
    Ok(format!("100 clouds, {kept} cells checked, {:.2} s", start.elapsed().as_secs_f64()))
}

// 3. A wall hides an object completely.

fn occlusion_fixture() -> Result<String, String> {
    const GROUND: f64 = -1.73;
    let cfg = SensorConfig::kitti();
    let policy = SplitPolicy::new(SplitKind::Single, DatasetStyle::SemanticKitti);
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let road: Vec<Point> = (0..2000)
        .map(|_| Point::new(rng.random_range(8.0..12.0), rng.random_range(-2.0..2.0), GROUND as f32, 0.3))
        .collect();
    let road_labels = LabelArray::from_classes(vec![40; road.len()]);
    let obj = AnomalyObject::from_mesh(&box_mesh(1.0, 1.0, 1.0), "chair", &ReflectivityCatalog::default(), 20_000, 3)
        .map_err(|e| e.to_string())?
        .placed_at(10.0, 0.0, GROUND);

    let (wall, wall_labels) = occluding_wall(&cfg, 5.0, 40.0, 50);
    let scene = PointCloud::new([wall.points(), road.as_slice()].concat()).unwrap();
    let labels = LabelArray::from_words([wall_labels.words(), road_labels.words()].concat());
    let hidden = compose_scan(&scene, &labels, std::slice::from_ref(&obj), &cfg, &policy, &IntensityParams::default(), 1)
        .map_err(|e| e.to_string())?;
    let m_hidden = hidden.objects[0].surviving();
    ensure!(m_hidden == 0, "{m_hidden} object points survive behind the wall");

    let open_scene = PointCloud::new(road).unwrap();
    let open = compose_scan(&open_scene, &road_labels, &[obj], &cfg, &policy, &IntensityParams::default(), 1)
        .map_err(|e| e.to_string())?;
    let o = &open.objects[0];
    ensure!(o.surviving() > 0, "no object points without the wall");
    // Unit box centered at (10, 0) on the ground: outward normals and plane offsets.
    let faces: [([f64; 3], f64, usize); 6] = [
        ([-1.0, 0.0, 0.0], 9.5, 0),
        ([1.0, 0.0, 0.0], 10.5, 0),
        ([0.0, -1.0, 0.0], -0.5, 1),
        ([0.0, 1.0, 0.0], 0.5, 1),
        ([0.0, 0.0, -1.0], GROUND, 2),
        ([0.0, 0.0, 1.0], GROUND + 1.0, 2),
    ];
    for i in o.start..o.end {
        let p = open.cloud.points()[i].xyz();
        let front = faces
            .iter()
            .filter(|(_, off, axis)| (p[*axis] - off).abs() < 1e-4)
            .any(|(n, _, _)| n[0] * p[0] + n[1] * p[1] + n[2] * p[2] < 0.0);
        ensure!(front, "surviving point {p:?} is not on a front-facing surface");
    }
    Ok(format!("M' = 0 behind the wall, M' = {} on front faces without it", o.surviving()))
}

// 4. Lambertian intensity.

fn intensity_law() -> Result<String, String> {
    let rho = 0.6;
    let e = |r: lidar_ood::Result<f64>| r.map_err(|e| e.to_string());
    let head_on = e(lambert_intensity([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], rho))?;
    let grazing = e(lambert_intensity([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], rho))?;
    let far = e(lambert_intensity([2.0, 0.0, 0.0], [-1.0, 0.0, 0.0], rho))?;
    ensure!((head_on - rho).abs() <= 1e-12, "head-on 1 m gives {head_on}");
    ensure!(grazing.abs() <= 1e-12, "perpendicular gives {grazing}");
    ensure!((far - rho / 4.0).abs() <= 1e-12, "head-on 2 m gives {far}");

    let (center, radius) = ([10.0, 0.0, 0.0], 0.5);
    let unit = sample_surface(&uv_sphere(1.0, 96, 192), 10_000, 104).map_err(|e| e.to_string())?;
    let pts: Vec<[f64; 3]> = unit
        .iter()
        .map(|p| {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            [center[0] + radius * p[0] / n, radius * p[1] / n, radius * p[2] / n]
        })
        .collect();
    let field = estimate_normals(&pts, 10).map_err(|e| e.to_string())?;
    let bins = 9;
    let (mut sum, mut count) = (vec![0.0; bins], vec![0usize; bins]);
    for (p, n) in pts.iter().zip(&field.normals) {
        let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let outward = [(p[0] - center[0]) / radius, p[1] / radius, p[2] / radius];
        let cos = -(outward[0] * p[0] + outward[1] * p[1] + outward[2] * p[2]) / d;
        let angle = cos.clamp(-1.0, 1.0).acos().to_degrees();
        if angle >= 90.0 {
            continue;
        }
        let b = ((angle / 10.0) as usize).min(bins - 1);
        sum[b] += e(lambert_intensity(*p, *n, rho))?;
        count[b] += 1;
    }
    let means: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect();
    ensure!(count.iter().all(|&c| c > 0), "empty incidence bin: {count:?}");
    for (i, w) in means.windows(2).enumerate() {
        ensure!(w[1] <= w[0] + 0.02 * means[0], "bin {} rises: {means:?}", i + 1);
    }
    Ok(format!(
        "analytic cases exact, {} visible sphere points, bin means {:.4} .. {:.4}",
        count.iter().sum::<usize>(),
        means[0],
        means[bins - 1]
    ))
}

// 5. Split statistics on 500 synthetic scans.

fn split_statistics() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SensorConfig::kitti();
    let scene = FlatSceneParams {
        azimuth_steps: 256,
        ..FlatSceneParams::default()
    };
    write_flat_road_sequence(tmp.path().join("seq"), &cfg, &scene, 500, 105).map_err(|e| e.to_string())?;
    write_mesh_bank(tmp.path().join("meshes")).map_err(|e| e.to_string())?;
    let catalog = ReflectivityCatalog::default();
    let bank = MeshBank::load_dir(tmp.path().join("meshes"), &catalog).map_err(|e| e.to_string())?;
    let scans = discover_scans(tmp.path().join("seq")).map_err(|e| e.to_string())?;
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get());
    let mut report = Vec::new();

    for kind in [SplitKind::Single, SplitKind::Multi] {
        let mut params = ForgeParams::new(DatasetStyle::SemanticKitti, kind, 2024);
        params.dense_points = 2_000;
        params.workers = workers;
        let out = tmp.path().join(format!("{kind:?}"));
        let m = forge_split(&scans, &bank, &params, &out).map_err(|e| e.to_string())?;
        ensure!(m.skipped.is_empty(), "{kind:?}: {} scans skipped", m.skipped.len());

        let mut anomaly_points = 0;
        for rec in &m.scans {
            let cloud = read_scan(out.join("velodyne").join(format!("{}.bin", rec.scan_id))).map_err(|e| e.to_string())?;
            let labels =
                read_labels(out.join("labels").join(format!("{}.label", rec.scan_id))).map_err(|e| e.to_string())?;
            for (p, c) in cloud.points().iter().zip(labels.classes()) {
                if c == 2 {
                    anomaly_points += 1;
                    ensure!(p.xy_norm() <= 50.0, "{kind:?}: anomaly point at {:.3} m in {}", p.xy_norm(), rec.scan_id);
                }
            }
        }
        ensure!(anomaly_points > 0, "{kind:?}: no anomaly points at all");

        match kind {
            SplitKind::Single => {
                let frac = m.anomaly_scans() as f64 / m.scans.len() as f64;
                ensure!((0.34..=0.46).contains(&frac), "single: anomaly-scan fraction {frac:.3}");
                report.push(format!("single fraction {frac:.3}"));
            }
            SplitKind::Multi => {
                let mut hist = [0usize; 4];
                for rec in m.scans.iter().filter(|r| !r.objects.is_empty()) {
                    let k = rec.objects.len();
                    ensure!((1..=4).contains(&k), "multi: {k} objects in {}", rec.scan_id);
                    hist[k - 1] += 1;
                }
                let n: usize = hist.iter().sum();
                let probs = [0.4, 0.3, 0.2, 0.1];
                let chi2: f64 = hist
                    .iter()
                    .zip(probs)
                    .map(|(&o, p)| {
                        let e = n as f64 * p;
                        (o as f64 - e).powi(2) / e
                    })
                    .sum();
                let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);
                let dropped: usize = m.scans.iter().map(|r| r.dropped.len()).sum();
                ensure!(p > 0.01, "multi: histogram {hist:?} gives chi2 {chi2:.2}, p = {p:.4}");
                report.push(format!(
                    "multi histogram {hist:?} p = {p:.3}, {:.2} objects per scan, {dropped} dropped",
                    m.inserted_objects() as f64 / m.scans.len() as f64
                ));
            }
        }
    }
    report.push("all anomaly points within 50 m".into());
    Ok(report.join("; "))
}

// 6. Scoring constants and forms.

fn scoring_constants() -> Result<String, String> {
    let w = LossWeights::default();
    ensure!(DEFAULT_RADIUS == 5.0 && ScoreOptions::default().radius == 5.0, "default radius is not 5");
    ensure!(w.radius == 5.0 && w.temperature == 0.1, "default r, tau = {}, {}", w.radius, w.temperature);
    let lambda = [w.ce, w.lovasz, w.prototype, w.contrastive, w.objectosphere];
    ensure!(lambda == [1.0, 1.5, 0.1, 0.5, 0.5], "default weights {lambda:?}");

    let edge = FeatureMatrix::new(2, 2, vec![1.0, 2.0, 0.0, 0.0]).unwrap();
    let s = score_contrastive(&edge, 5.0).map_err(|e| e.to_string())?;
    ensure!(s[0] == 0.0, "score at norm^2 = r is {}", s[0]);
    ensure!(s[1] == 1.0, "score at the origin is {}", s[1]);

    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut total = 0;
    for chunk in 0..100 {
        let c = [2, 4, 8, 20][chunk % 4];
        let n = 1000;
        let scale = [0.1, 1.0, 3.0, 10.0][(chunk / 4) % 4];
        let mut m = |s: f64| FeatureMatrix::new(n, c, (0..n * c).map(|_| rng.random_range(-s..s)).collect()).unwrap();
        let (sem, cont, protos) = (m(scale), m(scale), m(1.0));
        let protos = FeatureMatrix::new(c, c, protos.as_slice()[..c * c].to_vec()).unwrap();
        let bank = PrototypeBank::from_matrix(protos);
        let features = FeatureSet::new(sem, cont).unwrap();
        for similarity in [Similarity::Cosine, Similarity::Inner] {
            let v = score_all(&features, &bank, &ScoreOptions { radius: 5.0, similarity }).map_err(|e| e.to_string())?;
            for (name, s) in [
                ("cosine", &v.cosine),
                ("entropy", &v.entropy),
                ("semantic", &v.semantic),
                ("contrastive", &v.contrastive),
                ("fused", &v.fused),
            ] {
                ensure!(s.len() == n, "{name}: {} scores for {n} points", s.len());
                if let Some(bad) = s.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                    return Err(format!("{name} score {bad} outside [0, 1]"));
                }
            }
            for i in 0..n {
                ensure!(v.fused[i] == 0.5 * (v.semantic[i] + v.contrastive[i]), "fused is not the mean at {i}");
            }
            // The composite must equal the separately computed parts.
            let cls = classify(&features.sem, &bank, similarity).map_err(|e| e.to_string())?;
            let cos = score_cosine(&cls.sim);
            let ent = score_entropy(&features.sem).map_err(|e| e.to_string())?;
            let (sem, _) = score_semantic(&cos, &ent);
            let cont = score_contrastive(&features.cont, 5.0).map_err(|e| e.to_string())?;
            ensure!(score_fused(&sem, &cont) == v.fused, "score_all disagrees with its parts");
        }
        total += n;
    }
    Ok(format!("defaults verified, {total} points x 2 similarity modes in [0, 1], fused exact"))
}

// 7. Loss gradients.

const GN: usize = 10;
const GC: usize = 4;
const H: f64 = 1e-6;

fn random_matrix(rng: &mut ChaCha8Rng, scale: f64) -> FeatureMatrix {
    FeatureMatrix::new(GN, GC, (0..GN * GC).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn gradient_error(x: &FeatureMatrix, v: &LossValue, f: impl Fn(&FeatureMatrix) -> f64) -> f64 {
    let numeric: Vec<f64> = (0..x.as_slice().len())
        .map(|k| {
            let mut d = x.as_slice().to_vec();
            d[k] += H;
            let plus = f(&FeatureMatrix::new(GN, GC, d.clone()).unwrap());
            d[k] -= 2.0 * H;
            let minus = f(&FeatureMatrix::new(GN, GC, d).unwrap());
            (plus - minus) / (2.0 * H)
        })
        .collect();
    let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = v.grad.as_slice().iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(v.grad.as_slice()).max(norm(&numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn lovasz_tie_free(x: &FeatureMatrix, y: &[usize]) -> bool {
    (0..GC).all(|c| {
        let mut e: Vec<f64> = (0..GN)
            .map(|i| {
                let p = softmax(x.row(i))[c];
                if y[i] == c {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        e.sort_by(f64::total_cmp);
        e.windows(2).all(|w| w[1] - w[0] >= 1e-4)
    })
}

fn loss_gradients() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut worst = [0.0f64; 5];
    let names = ["ce", "lovasz", "prototype", "contrastive", "objectosphere"];
    let mut lovasz_checked = 0;
    let mut instance = 0;
    while lovasz_checked < 100 || instance < 100 {
        let x = random_matrix(&mut rng, 3.0);
        let xc = random_matrix(&mut rng, 1.0);
        let y: Vec<usize> = (0..GN).map(|_| rng.random_range(0..GC)).collect();
        let cw: Vec<f64> = (0..GC).map(|_| rng.random_range(0.5..2.0)).collect();
        let bank = PrototypeBank::from_matrix(
            FeatureMatrix::new(GC, GC, (0..GC * GC).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
        );
        let inlier: Vec<bool> = (0..GN).map(|_| rng.random_bool(0.7)).collect();
        let e = |r: lidar_ood::Result<LossValue>| r.unwrap();
        let mut errs = [0.0; 5];
        if instance < 100 {
            errs[0] = gradient_error(&x, &e(loss_ce(&x, &y, &cw)), |m| e(loss_ce(m, &y, &cw)).value);
            errs[2] = gradient_error(&x, &e(loss_prototype(&x, &y, &bank)), |m| e(loss_prototype(m, &y, &bank)).value);
            let den = ContrastiveDenominator::AllPrototypes;
            errs[3] = gradient_error(&xc, &e(loss_contrastive(&xc, &y, &bank, 0.1, den)), |m| {
                e(loss_contrastive(m, &y, &bank, 0.1, den)).value
            });
            let xo = random_matrix(&mut rng, 2.0);
            errs[4] = gradient_error(&xo, &e(loss_objectosphere(&xo, &inlier, 5.0)), |m| {
                e(loss_objectosphere(m, &inlier, 5.0)).value
            });
            instance += 1;
        }
        if lovasz_checked < 100 && lovasz_tie_free(&x, &y) {
            errs[1] = gradient_error(&x, &e(loss_lovasz(&x, &y)), |m| e(loss_lovasz(m, &y)).value);
            lovasz_checked += 1;
        }
        for (k, err) in errs.iter().enumerate() {
            worst[k] = worst[k].max(*err);
            ensure!(*err < 1e-4, "{} gradient relative error {err:.2e}", names[k]);
        }
    }

    let uniform = FeatureMatrix::new(GN, GC, vec![0.7; GN * GC]).unwrap();
    let y: Vec<usize> = (0..GN).map(|i| i % GC).collect();
    let ce = loss_ce(&uniform, &y, &[1.0; GC]).map_err(|e| e.to_string())?.value;
    ensure!((ce - (GC as f64).ln()).abs() <= 1e-12, "uniform-logit CE {ce} vs ln C");

    let big: Vec<f64> = (0..GN * GC).map(|_| rng.random_range(1.2..3.0)).collect();
    let big = FeatureMatrix::new(GN, GC, big).unwrap();
    let obj = loss_objectosphere(&big, &[true; GN], 5.0).map_err(|e| e.to_string())?.value;
    ensure!(obj == 0.0, "all-inlier objectosphere with large norms is {obj}");

    let worst: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Ok(format!("100 instances each, worst relative error: {}", worst.join(", ")))
}

// 8. Forge, score and evaluate end to end.

fn end_to_end() -> Result<String, String> {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (seq, meshes) = write_inputs(tmp.path(), 20, 512);
    let forged = tmp.path().join("forged");
    run_ok(bin()
        .args(["forge", "--policy", "multi", "--seed", "8", "--dense-points", "5000", "--workers", "4"])
        .arg("--scans")
        .arg(&seq)
        .arg("--meshes")
        .arg(&meshes)
        .arg("--out")
        .arg(&forged));
    let n = write_features(&forged, tmp.path(), 8, 2);
    ensure!(n == 20, "{n} forged scans");
    run_ok(bin()
        .arg("score")
        .arg("--features")
        .arg(tmp.path().join("features"))
        .arg("--prototypes")
        .arg(tmp.path().join("prototypes.feat"))
        .arg("--labels")
        .arg(tmp.path().join("train_labels"))
        .arg("--out")
        .arg(tmp.path().join("scores")));
    let out = run_ok(bin()
        .arg("eval")
        .arg("--scores")
        .arg(tmp.path().join("scores"))
        .arg("--labels")
        .arg(forged.join("labels"))
        .arg("--velodyne")
        .arg(forged.join("velodyne")));
    let auroc = value_of(&out, "auroc").ok_or("eval printed no auroc")?;
    let anomalies = value_of(&out, "anomalies").unwrap_or(0.0);
    ensure!(anomalies > 0.0, "no anomaly points in the forged split");
    ensure!(auroc > 0.95, "AUROC {auroc}");
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "AUROC {auroc:.4} over {anomalies} anomaly points, AP {:.4}, {:.2} s",
        value_of(&out, "ap").unwrap_or(f64::NAN),
        start.elapsed().as_secs_f64()
    ))
}

// 9. Byte-identical output across runs and worker counts.

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (seq, meshes) = write_inputs(tmp.path(), 12, 512);
    let mut trees = Vec::new();
    for (name, workers) in [("w1a", "1"), ("w1b", "1"), ("w8", "8")] {
        let out = tmp.path().join(name);
        run_ok(bin()
            .args(["forge", "--policy", "multi", "--seed", "99", "--dense-points", "5000", "--workers", workers])
            .arg("--scans")
            .arg(&seq)
            .arg("--meshes")
            .arg(&meshes)
            .arg("--out")
            .arg(&out));
        trees.push(tree_bytes(&out));
    }
    ensure!(trees[0] == trees[1], "two runs with one worker differ");
    ensure!(trees[0] == trees[2], "one and eight workers differ");
    let bytes: usize = trees[0].iter().map(|(_, b)| b.len()).sum();
    let manifest = fs::read_to_string(tmp.path().join("w1a/manifest.tsv")).map_err(|e| e.to_string())?;
    ensure!(manifest.lines().count() > 12, "manifest is incomplete");
    Ok(format!("{} files, {bytes} bytes identical across 3 runs", trees[0].len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 9] = [
        ("metric oracle equivalence", metric_oracles),
        ("projection correctness", projection_exhaustive),
        ("occlusion fixture", occlusion_fixture),
        ("intensity law", intensity_law),
        ("split statistics", split_statistics),
        ("scoring constants and forms", scoring_constants),
        ("loss gradient checks", loss_gradients),
        ("end-to-end smoke", end_to_end),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
