//! Forward values and analytic feature gradients of the training losses of
//! both heads.

use crate::error::{Error, Result};
use crate::feature_scoring::{dot, l2, softmax, FeatureMatrix, PrototypeBank};

/// A loss value together with its gradient with respect to the per-point
/// features it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: FeatureMatrix,
    /// False when the loss had nothing to act on (e.g. no prototypes yet).
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub lovasz: f64,
    pub prototype: f64,
    pub contrastive: f64,
    pub objectosphere: f64,
    pub temperature: f64,
    pub radius: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            lovasz: 1.5,
            prototype: 0.1,
            contrastive: 0.5,
            objectosphere: 0.5,
            temperature: 0.1,
            radius: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.ce, self.lovasz, self.prototype, self.contrastive, self.objectosphere];
        if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::validation("loss weights must be finite and non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::validation("temperature must be positive"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::validation("objectosphere radius must be positive"));
        }
        Ok(())
    }
}

fn check_labels(features: &FeatureMatrix, labels: &[usize]) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(Error::validation(format!(
            "{} labels for {} feature rows",
            labels.len(),
            features.rows()
        )));
    }
    if let Some((n, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= features.cols()) {
        return Err(Error::validation(format!(
            "label {y} at point {n} is outside the {} classes",
            features.cols()
        )));
    }
    if features.rows() == 0 {
        return Err(Error::validation("loss over zero points"));
    }
    Ok(())
}

/// Class-weighted cross-entropy averaged over points.
pub fn loss_ce(sem: &FeatureMatrix, labels: &[usize], class_weights: &[f64]) -> Result<LossValue> {
    check_labels(sem, labels)?;
    if class_weights.len() != sem.cols() {
        return Err(Error::validation("one class weight per class is required"));
    }
    let n = sem.rows() as f64;
    let mut grad = FeatureMatrix::zeros(sem.rows(), sem.cols());
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax(sem.row(i));
        let w = class_weights[y];
        value -= w * p[y].max(f64::MIN_POSITIVE).ln();
        for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = w * (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok(LossValue {
        value: value / n,
        grad,
        active: true,
    })
}

/// Gradient of `cos(a, f)` with respect to `f`.
fn cosine_grad(a: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let (na, nf) = (l2(a), l2(f));
    if na == 0.0 || nf == 0.0 {
        return (0.0, vec![0.0; f.len()]);
    }
    let cos = dot(a, f) / (na * nf);
    let g = a
        .iter()
        .zip(f)
        .map(|(ai, fi)| ai / (na * nf) - cos * fi / (nf * nf))
        .collect();
    (cos, g)
}

/// Mean cosine distance of each point to its class prototype from the
/// previous epoch. Classes without a prototype contribute nothing; with an
/// empty bank the loss is inactive and 0.
pub fn loss_prototype(sem: &FeatureMatrix, labels: &[usize], bank: &PrototypeBank) -> Result<LossValue> {
    check_labels(sem, labels)?;
    let mut grad = FeatureMatrix::zeros(sem.rows(), sem.cols());
    if bank.is_empty() {
        return Ok(LossValue {
            value: 0.0,
            grad,
            active: false,
        });
    }
    if bank.dim() != sem.cols() || bank.classes() != sem.cols() {
        return Err(Error::validation("prototype bank shape does not match the features"));
    }
    let n = sem.rows() as f64;
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let Some(proto) = bank.prototype(y) else {
            continue;
        };
        let (cos, g) = cosine_grad(proto, sem.row(i));
        value += 1.0 - cos;
        for (out, gi) in grad.row_mut(i).iter_mut().zip(g) {
            *out = -gi / n;
        }
    }
    Ok(LossValue {
        value: value / n,
        grad,
        active: true,
    })
}

/// Gradient of the Lovász extension of the Jaccard loss for foreground
/// flags sorted by decreasing error.
pub fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&g| g).count() as f64;
    let mut inter_cum = 0.0;
    let mut union_cum = 0.0;
    let mut prev = 0.0;
    fg_sorted
        .iter()
        .map(|&g| {
            if g {
                inter_cum += 1.0;
            } else {
                union_cum += 1.0;
            }
            let jaccard = 1.0 - (gts - inter_cum) / (gts + union_cum);
            let step = jaccard - prev;
            prev = jaccard;
            step
        })
        .collect()
}

/// Lovász-softmax loss averaged over the classes present in `labels`.
pub fn loss_lovasz(sem: &FeatureMatrix, labels: &[usize]) -> Result<LossValue> {
    check_labels(sem, labels)?;
    let (rows, classes) = (sem.rows(), sem.cols());
    let probs: Vec<Vec<f64>> = sem.iter_rows().map(softmax).collect();
    let present: Vec<usize> = (0..classes).filter(|c| labels.contains(c)).collect();
    // dL/dp per point and class
    let mut dp = vec![vec![0.0; classes]; rows];
    let mut value = 0.0;
    for &c in &present {
        let fg: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let errors: Vec<f64> = (0..rows)
            .map(|i| if fg[i] { 1.0 - probs[i][c] } else { probs[i][c] })
            .collect();
        let mut order: Vec<usize> = (0..rows).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let fg_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
        let g = lovasz_grad(&fg_sorted);
        for (rank, &i) in order.iter().enumerate() {
            value += errors[i] * g[rank];
            let sign = if fg[i] { -1.0 } else { 1.0 };
            dp[i][c] += sign * g[rank];
        }
    }
    let k = present.len() as f64;
    let mut grad = FeatureMatrix::zeros(rows, classes);
    for i in 0..rows {
        let p = &probs[i];
        let weighted: f64 = dp[i].iter().zip(p).map(|(g, p)| g * p).sum();
        for (c, out) in grad.row_mut(i).iter_mut().enumerate() {
            *out = p[c] * (dp[i][c] - weighted) / k;
        }
    }
    Ok(LossValue {
        value: value / k,
        grad,
        active: true,
    })
}

/// Denominator convention of the prototype contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ContrastiveDenominator {
    /// Sum over every class prototype: a softmax over classes.
    #[default]
    AllPrototypes,
    /// The printed form, which repeats the numerator term `C` times.
    Literal,
}

/// Per-class mean of the contrastive features; `None` for absent classes.
pub fn mean_class_features(cont: &FeatureMatrix, labels: &[usize], num_classes: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; cont.cols()]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y < num_classes {
            counts[y] += 1;
            for (s, v) in sums[y].iter_mut().zip(cont.row(i)) {
                *s += v;
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Contrastive loss between class-mean contrastive features and the
/// unit-normalized prototypes. Classes that are absent from `labels` or
/// have no prototype are skipped.
pub fn loss_contrastive(
    cont: &FeatureMatrix,
    labels: &[usize],
    bank: &PrototypeBank,
    temperature: f64,
    denominator: ContrastiveDenominator,
) -> Result<LossValue> {
    check_labels(cont, labels)?;
    if !(temperature > 0.0) {
        return Err(Error::validation("temperature must be positive"));
    }
    if bank.dim() != cont.cols() || bank.classes() != cont.cols() {
        return Err(Error::validation("prototype bank shape does not match the features"));
    }
    let classes = cont.cols();
    let unit: Vec<Option<Vec<f64>>> = (0..classes)
        .map(|c| {
            bank.prototype(c).and_then(|p| {
                let n = l2(p);
                (n > 0.0).then(|| p.iter().map(|v| v / n).collect())
            })
        })
        .collect();
    let means = mean_class_features(cont, labels, classes);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&y| counts[y] += 1);
    let active_protos: Vec<usize> = (0..classes).filter(|&i| unit[i].is_some()).collect();

    let mut value = 0.0;
    let mut mean_grads: Vec<Option<Vec<f64>>> = vec![None; classes];
    let mut active = false;
    for c in 0..classes {
        let (Some(fbar), Some(own)) = (&means[c], &unit[c]) else {
            continue;
        };
        active = true;
        match denominator {
            ContrastiveDenominator::Literal => {
                value += (classes as f64).ln();
                mean_grads[c] = Some(vec![0.0; classes]);
            }
            ContrastiveDenominator::AllPrototypes => {
                let logits: Vec<f64> = active_protos
                    .iter()
                    .map(|&i| dot(fbar, unit[i].as_ref().unwrap()) / temperature)
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                value += lse - dot(fbar, own) / temperature;
                let soft: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
                let g = (0..classes)
                    .map(|d| {
                        let expected: f64 = active_protos
                            .iter()
                            .zip(&soft)
                            .map(|(&i, s)| s * unit[i].as_ref().unwrap()[d])
                            .sum();
                        (expected - own[d]) / temperature
                    })
                    .collect();
                mean_grads[c] = Some(g);
            }
        }
    }
    let mut grad = FeatureMatrix::zeros(cont.rows(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if let Some(g) = &mean_grads[y] {
            for (out, gv) in grad.row_mut(i).iter_mut().zip(g) {
                *out = gv / counts[y] as f64;
            }
        }
    }
    Ok(LossValue { value, grad, active })
}

/// Objectosphere penalty averaged over points: inliers pay
/// `max(r − ‖f‖², 0)`, other points pay `‖f‖²`.
pub fn loss_objectosphere(cont: &FeatureMatrix, inlier: &[bool], radius: f64) -> Result<LossValue> {
    if inlier.len() != cont.rows() || cont.rows() == 0 {
        return Err(Error::validation("inlier mask must match a nonempty feature matrix"));
    }
    if !(radius > 0.0) {
        return Err(Error::validation("objectosphere radius must be positive"));
    }
    let n = cont.rows() as f64;
    let mut grad = FeatureMatrix::zeros(cont.rows(), cont.cols());
    let mut value = 0.0;
    for (i, &is_in) in inlier.iter().enumerate() {
        let f = cont.row(i);
        let sq = dot(f, f);
        let scale = if is_in {
            if sq < radius {
                value += radius - sq;
                -2.0
            } else {
                0.0
            }
        } else {
            value += sq;
            2.0
        };
        for (out, v) in grad.row_mut(i).iter_mut().zip(f) {
            *out = scale * v / n;
        }
    }
    Ok(LossValue {
        value: value / n,
        grad,
        active: true,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub lovasz: f64,
    pub prototype: f64,
    pub contrastive: f64,
    pub objectosphere: f64,
}

/// Weighted sums for the semantic head and the contrastive head.
pub fn loss_heads(parts: &LossComponents, weights: &LossWeights) -> (f64, f64) {
    let shead = weights.ce * parts.ce + weights.lovasz * parts.lovasz + weights.prototype * parts.prototype;
    let chead = weights.contrastive * parts.contrastive + weights.objectosphere * parts.objectosphere;
    (shead, chead)
}

/// Evaluates every loss on one batch. All points are treated as inliers.
pub fn compute_losses(
    sem: &FeatureMatrix,
    cont: &FeatureMatrix,
    labels: &[usize],
    bank: &PrototypeBank,
    class_weights: &[f64],
    weights: &LossWeights,
) -> Result<LossComponents> {
    weights.validate()?;
    let inlier = vec![true; labels.len()];
    Ok(LossComponents {
        ce: loss_ce(sem, labels, class_weights)?.value,
        lovasz: loss_lovasz(sem, labels)?.value,
        prototype: loss_prototype(sem, labels, bank)?.value,
        contrastive: loss_contrastive(cont, labels, bank, weights.temperature, ContrastiveDenominator::default())?
            .value,
        objectosphere: loss_objectosphere(cont, &inlier, weights.radius)?.value,
    })
}
