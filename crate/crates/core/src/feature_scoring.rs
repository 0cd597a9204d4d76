//! Inference-time scoring from per-point head features: confidence-weighted
//! class prototypes, similarity classification, and the cosine, entropy,
//! semantic, contrastive and fused anomaly scores.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix of finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// `b"LOODFEAT"` read as a little-endian `u64`.
pub const TENSOR_MAGIC: u64 = u64::from_le_bytes(*b"LOODFEAT");
const HEADER_BYTES: usize = 24;

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "matrix data has {} values, expected {rows} x {cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite feature at row {}, column {}",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::validation("rows have different lengths"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Header `magic, rows, cols` as little-endian `u64`, then row-major `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 4 * self.data.len());
        out.extend_from_slice(&TENSOR_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: "feature file shorter than its 24-byte header".into(),
            });
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        if word(0) != TENSOR_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad feature file magic".into(),
            });
        }
        let (rows, cols) = (word(1) as usize, word(2) as usize);
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_BYTES))
            .ok_or_else(|| Error::Format {
                offset: 8,
                msg: "feature shape overflows".into(),
            })?;
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected) as u64,
                msg: format!("{rows} x {cols} feature file should be {expected} bytes, found {}", bytes.len()),
            });
        }
        let data = bytes[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(rows, cols, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Semantic-head and contrastive-head features of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub sem: FeatureMatrix,
    pub cont: FeatureMatrix,
}

impl FeatureSet {
    pub fn new(sem: FeatureMatrix, cont: FeatureMatrix) -> Result<Self> {
        if sem.rows() != cont.rows() || sem.cols() != cont.cols() {
            return Err(Error::validation(format!(
                "head shapes differ: semantic {} x {}, contrastive {} x {}",
                sem.rows(),
                sem.cols(),
                cont.rows(),
                cont.cols()
            )));
        }
        Ok(Self { sem, cont })
    }

    pub fn len(&self) -> usize {
        self.sem.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.sem.rows() == 0
    }

    pub fn classes(&self) -> usize {
        self.sem.cols()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Per-class confidence-weighted prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    protos: FeatureMatrix,
    weights: Vec<f64>,
}

impl PrototypeBank {
    /// Wraps an existing prototype matrix; rows that are entirely zero are
    /// treated as uninitialized.
    pub fn from_matrix(protos: FeatureMatrix) -> Self {
        let weights = protos
            .iter_rows()
            .map(|r| if r.iter().any(|&v| v != 0.0) { 1.0 } else { 0.0 })
            .collect();
        Self { protos, weights }
    }

    pub fn classes(&self) -> usize {
        self.protos.rows()
    }

    pub fn dim(&self) -> usize {
        self.protos.cols()
    }

    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.is_initialized(class).then(|| self.protos.row(class))
    }

    pub fn weight(&self, class: usize) -> f64 {
        self.weights[class]
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.weights[class] > 0.0
    }

    pub fn is_fully_initialized(&self) -> bool {
        (0..self.classes()).all(|c| self.is_initialized(c))
    }

    pub fn is_empty(&self) -> bool {
        (0..self.classes()).all(|c| !self.is_initialized(c))
    }

    pub fn matrix(&self) -> &FeatureMatrix {
        &self.protos
    }
}

/// Added to shifted confidences so the least confident point keeps a
/// nonzero weight.
pub const KAPPA_EPSILON: f64 = 1e-6;

/// Confidence-weighted mean of true-positive features per class, with
/// confidence `κ = max(f)`.
pub fn accumulate_prototypes(
    sem: &FeatureMatrix,
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<PrototypeBank> {
    let kappa: Vec<f64> = sem
        .iter_rows()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    accumulate_prototypes_weighted(sem, labels, predictions, &kappa, num_classes)
}

/// Prototype accumulation with caller-supplied confidences.
///
/// When a class has a true positive with `κ ≤ 0`, that class's confidences
/// are shifted by `−min κ + ε` for weighting.
pub fn accumulate_prototypes_weighted(
    sem: &FeatureMatrix,
    labels: &[usize],
    predictions: &[usize],
    kappa: &[f64],
    num_classes: usize,
) -> Result<PrototypeBank> {
    let n = sem.rows();
    if labels.len() != n || predictions.len() != n || kappa.len() != n {
        return Err(Error::validation(
            "labels, predictions and confidences must match the feature rows",
        ));
    }
    let dim = sem.cols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, (&y, &p)) in labels.iter().zip(predictions).enumerate() {
        if y == p && y < num_classes {
            members[y].push(i);
        }
    }
    let mut protos = FeatureMatrix::zeros(num_classes, dim);
    let mut weights = vec![0.0; num_classes];
    for (c, pts) in members.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let min = pts.iter().map(|&i| kappa[i]).fold(f64::INFINITY, f64::min);
        let shift = if min <= 0.0 {
            log::warn!("class {c}: non-positive confidence {min}, shifting weights");
            -min + KAPPA_EPSILON
        } else {
            0.0
        };
        let row = protos.row_mut(c);
        let mut total = 0.0;
        for &i in pts {
            let w = kappa[i] + shift;
            total += w;
            for (acc, v) in row.iter_mut().zip(sem.row(i)) {
                *acc += w * v;
            }
        }
        row.iter_mut().for_each(|v| *v /= total);
        weights[c] = total;
    }
    Ok(PrototypeBank { protos, weights })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Similarity {
    /// Inner product of unit-normalized vectors.
    #[default]
    Cosine,
    /// Raw inner product.
    Inner,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub predicted: Vec<usize>,
    /// `N × C` similarities.
    pub sim: FeatureMatrix,
    /// Points whose feature vector had zero norm (all similarities 0).
    pub zero_norm: Vec<bool>,
}

/// Predicts each point's class as the most similar prototype; ties go to
/// the smaller class id.
pub fn classify(sem: &FeatureMatrix, bank: &PrototypeBank, mode: Similarity) -> Result<Classification> {
    if !bank.is_fully_initialized() {
        let missing: Vec<String> = (0..bank.classes())
            .filter(|&c| !bank.is_initialized(c))
            .map(|c| c.to_string())
            .collect();
        return Err(Error::validation(format!(
            "prototype bank has uninitialized classes: {}",
            missing.join(", ")
        )));
    }
    if bank.dim() != sem.cols() {
        return Err(Error::validation(format!(
            "prototype dimension {} does not match feature dimension {}",
            bank.dim(),
            sem.cols()
        )));
    }
    let classes = bank.classes();
    let proto_norms: Vec<f64> = (0..classes).map(|c| l2(bank.protos.row(c))).collect();
    let mut sim = FeatureMatrix::zeros(sem.rows(), classes);
    let mut predicted = Vec::with_capacity(sem.rows());
    let mut zero_norm = Vec::with_capacity(sem.rows());
    for n in 0..sem.rows() {
        let f = sem.row(n);
        let fnorm = l2(f);
        let degenerate = fnorm == 0.0;
        let out = sim.row_mut(n);
        if !degenerate {
            for c in 0..classes {
                let ip = dot(f, bank.protos.row(c));
                out[c] = match mode {
                    Similarity::Inner => ip,
                    Similarity::Cosine if proto_norms[c] > 0.0 => (ip / (fnorm * proto_norms[c])).clamp(-1.0, 1.0),
                    Similarity::Cosine => 0.0,
                };
            }
        }
        let mut best = 0;
        for c in 1..classes {
            if out[c] > out[best] {
                best = c;
            }
        }
        predicted.push(best);
        zero_norm.push(degenerate);
    }
    Ok(Classification {
        predicted,
        sim,
        zero_norm,
    })
}

/// `1 − max_c sim`, with the maximum similarity clamped to [0, 1] so the
/// score stays in [0, 1].
pub fn score_cosine(sim: &FeatureMatrix) -> Vec<f64> {
    sim.iter_rows()
        .map(|r| {
            let best = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            1.0 - best.clamp(0.0, 1.0)
        })
        .collect()
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax entropy normalized by `log C`.
pub fn score_entropy(sem: &FeatureMatrix) -> Result<Vec<f64>> {
    let c = sem.cols();
    if c < 2 {
        return Err(Error::validation(format!("entropy undefined for C<2 (got C={c})")));
    }
    let norm = (c as f64).ln();
    Ok(sem
        .iter_rows()
        .map(|r| {
            let h: f64 = softmax(r)
                .into_iter()
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            (h / norm).clamp(0.0, 1.0)
        })
        .collect())
}

/// Elementwise product divided by its maximum over the scan. Returns the
/// scores and the maximum used (0 leaves the products unchanged).
pub fn score_semantic(s_cos: &[f64], s_ent: &[f64]) -> (Vec<f64>, f64) {
    let prod: Vec<f64> = s_cos.iter().zip(s_ent).map(|(a, b)| a * b).collect();
    let max = prod.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        (prod.into_iter().map(|v| v / max).collect(), max)
    } else {
        (prod, max)
    }
}

/// `max(0, 1 − ‖f'‖² / r)`.
pub fn score_contrastive(cont: &FeatureMatrix, r: f64) -> Result<Vec<f64>> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::validation(format!("objectosphere radius must be positive, got {r}")));
    }
    Ok(cont
        .iter_rows()
        .map(|f| (1.0 - dot(f, f) / r).max(0.0))
        .collect())
}

pub fn score_fused(s_sem: &[f64], s_cont: &[f64]) -> Vec<f64> {
    s_sem.iter().zip(s_cont).map(|(a, b)| 0.5 * (a + b)).collect()
}

pub const DEFAULT_RADIUS: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreOptions {
    pub radius: f64,
    pub similarity: Similarity,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            radius: DEFAULT_RADIUS,
            similarity: Similarity::Cosine,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub cosine: Vec<f64>,
    pub entropy: Vec<f64>,
    pub semantic: Vec<f64>,
    pub contrastive: Vec<f64>,
    pub fused: Vec<f64>,
    pub predicted: Vec<usize>,
    /// Maximum cosine × entropy product used to normalize `semantic`.
    pub semantic_max: f64,
}

/// Runs classification and every score for one scan.
pub fn score_all(features: &FeatureSet, bank: &PrototypeBank, opts: &ScoreOptions) -> Result<ScoreVector> {
    let entropy = score_entropy(&features.sem)?;
    let cls = classify(&features.sem, bank, opts.similarity)?;
    let cosine = score_cosine(&cls.sim);
    let (semantic, semantic_max) = score_semantic(&cosine, &entropy);
    let contrastive = score_contrastive(&features.cont, opts.radius)?;
    let fused = score_fused(&semantic, &contrastive);
    Ok(ScoreVector {
        cosine,
        entropy,
        semantic,
        contrastive,
        fused,
        predicted: cls.predicted,
        semantic_max,
    })
}

/// Per-point scores as little-endian `f32`.
pub fn write_scores(path: impl AsRef<Path>, scores: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = scores.iter().flat_map(|&s| (s as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            offset: (bytes.len() / 4 * 4) as u64,
            msg: "score file length is not a multiple of 4".into(),
        });
    }
    let scores: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::validation(format!("non-finite score at point {i}")));
    }
    Ok(scores)
}
