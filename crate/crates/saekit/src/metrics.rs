//! Evaluation formulas: confusion-matrix classification metrics, ROC-AUC
//! variants, and per-class segmentation metrics.
//!
//! Everything here is a pure function over label slices, score matrices, or
//! class-id masks. Classification metrics are micro-averaged (TP/FP/FN pooled
//! across classes before the formula is applied). Segmentation metrics
//! binarize per class and report IoU, DSC, specificity, MCC, boundary F1, and
//! accuracy, plus overall pixel accuracy.
//!
//! Conventions for degenerate counts, applied uniformly:
//! precision/recall/F1/MCC with a zero denominator are 0;
//! specificity with no negatives is 1 and sets a warning flag;
//! BF1 is `None` when a class has no boundary pixels in either mask.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// C x C counts; rows index the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// Per-class binary counts derived from a confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::InvalidData(format!(
                "label slices disagree: {} true vs {} predicted",
                truth.len(),
                pred.len()
            )));
        }
        let mut counts = vec![0u64; classes * classes];
        for (&t, &p) in truth.iter().zip(pred) {
            for v in [t, p] {
                if v >= classes {
                    return Err(Error::LabelOutOfRange { label: v, classes });
                }
            }
            counts[t * classes + p] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn class_counts(&self, c: usize) -> BinaryCounts {
        let tp = self.count(c, c);
        let row: u64 = (0..self.classes).map(|j| self.count(c, j)).sum();
        let col: u64 = (0..self.classes).map(|i| self.count(i, c)).sum();
        let fp = col - tp;
        let fn_ = row - tp;
        BinaryCounts { tp, fp, fn_, tn: self.total() - tp - fp - fn_ }
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        safe_div(diag as f64, self.total() as f64)
    }
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 { 0.0 } else { num / den }
}

/// Micro-averaged (precision, recall, F1): counts are pooled across classes
/// before each formula. For single-label multiclass input all three collapse
/// to accuracy, because every false positive is some other class's false
/// negative. F1 is formed from the pooled counts rather than from the two
/// ratios, so the collapse holds bitwise (2tp/2n and tp/n round identically).
pub fn micro_metrics(cm: &ConfusionMatrix) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for c in 0..cm.classes() {
        let b = cm.class_counts(c);
        tp += b.tp;
        fp += b.fp;
        fn_ += b.fn_;
    }
    let precision = safe_div(tp as f64, (tp + fp) as f64);
    let recall = safe_div(tp as f64, (tp + fn_) as f64);
    let f1 = safe_div(2.0 * tp as f64, (2 * tp + fp + fn_) as f64);
    (precision, recall, f1)
}

/// Coefficient of determination over integer class ids treated as reals:
/// 1 - sum (y - yhat)^2 / sum (y - mean)^2. Zero label variance makes the
/// ratio undefined and is an error rather than a silent value.
pub fn r2_score(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.len() != pred.len() || truth.len() < 2 {
        return Err(Error::InvalidData(format!(
            "r2 needs two equal-length samples, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().map(|&y| y as f64).sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|&y| (y as f64 - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = truth
        .iter()
        .zip(pred)
        .map(|(&y, &p)| (y as f64 - p as f64).powi(2))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Binary ROC-AUC by the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, ties 0.5.
/// Computed from tie-averaged ranks, which matches exhaustive pair counting
/// exactly (both are the same integer-and-halves arithmetic).
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidData(format!(
            "auc slices disagree: {} scores vs {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidData(
            "auc needs both a positive and a negative example".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("non-finite score"));

    // Walk tie groups; each member gets the average rank of the group
    // (1-based). Sum of positive ranks gives the U statistic.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1) + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if positive[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-one AUC: the average of AUC_ij over unordered class pairs i < j,
/// where AUC_ij is the binary AUC on samples of classes i and j using the
/// probability of class i as the score. Pairs where either class is absent
/// are skipped and listed.
#[derive(Debug, Clone, Serialize)]
pub struct OvoAuc {
    pub value: f64,
    pub skipped_pairs: Vec<[usize; 2]>,
}

fn check_prob_matrix<E: Scalar>(probs: &Tensor<E>, labels: &[usize]) -> Result<(usize, usize)> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::InvalidShape {
            op: "auc",
            shape: shape.to_vec(),
            reason: format!("expected {} x C probability matrix", labels.len()),
        });
    }
    let (n, c) = (shape[0], shape[1]);
    for &l in labels {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
    }
    Ok((n, c))
}

pub fn auc_ovo<E: Scalar>(probs: &Tensor<E>, labels: &[usize]) -> Result<OvoAuc> {
    let (n, c) = check_prob_matrix(probs, labels)?;
    let data = probs.data();
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for i in 0..c {
        for j in i + 1..c {
            let mut scores = Vec::new();
            let mut positive = Vec::new();
            for s in 0..n {
                if labels[s] == i || labels[s] == j {
                    scores.push(data[s * c + i].to_f64());
                    positive.push(labels[s] == i);
                }
            }
            if positive.iter().all(|&p| p) || positive.iter().all(|&p| !p) {
                skipped.push([i, j]);
                continue;
            }
            total += auc_binary(&scores, &positive)?;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::InvalidData(
            "auc_ovo: no class pair has both classes present".into(),
        ));
    }
    Ok(OvoAuc { value: total / used as f64, skipped_pairs: skipped })
}

/// Micro-averaged AUC: one binary AUC over the flattened one-hot labels
/// against the flattened probability matrix, so every (sample, class) cell
/// is one scored instance.
pub fn auc_micro<E: Scalar>(probs: &Tensor<E>, labels: &[usize]) -> Result<f64> {
    let (n, c) = check_prob_matrix(probs, labels)?;
    let data = probs.data();
    let mut scores = Vec::with_capacity(n * c);
    let mut positive = Vec::with_capacity(n * c);
    for s in 0..n {
        for k in 0..c {
            scores.push(data[s * c + k].to_f64());
            positive.push(labels[s] == k);
        }
    }
    auc_binary(&scores, &positive)
}

/// Everything the classification evaluation reports. `r2` is on class ids;
/// all other fields are fractions in [0, 1].
#[derive(Debug, Clone, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub r2: f64,
    pub auc_ovo: f64,
    /// Class pairs the one-vs-one average had to skip (a class absent).
    pub auc_ovo_skipped_pairs: Vec<[usize; 2]>,
    pub auc_micro: f64,
}

/// Builds the full report from a probability matrix and true labels.
/// Predictions are the per-row argmax (first maximum on ties).
pub fn classification_report<E: Scalar>(
    probs: &Tensor<E>,
    labels: &[usize],
) -> Result<ClassificationReport> {
    let (n, c) = check_prob_matrix(probs, labels)?;
    let data = probs.data();
    let pred: Vec<usize> = (0..n)
        .map(|s| {
            let row = &data[s * c..(s + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    let cm = ConfusionMatrix::from_labels(labels, &pred, c)?;
    let (micro_precision, micro_recall, micro_f1) = micro_metrics(&cm);
    let ovo = auc_ovo(probs, labels)?;
    Ok(ClassificationReport {
        accuracy: cm.accuracy(),
        micro_precision,
        micro_recall,
        micro_f1,
        r2: r2_score(labels, &pred)?,
        auc_ovo: ovo.value,
        auc_ovo_skipped_pairs: ovo.skipped_pairs,
        auc_micro: auc_micro(probs, labels)?,
    })
}

/// Per-class segmentation metrics. `bf1` is `None` when the class has no
/// boundary pixels in either mask (absent class); `specificity_degenerate`
/// flags the 0/0 convention (no negatives, reported as 1).
#[derive(Debug, Clone, Serialize)]
pub struct ClassSegMetrics {
    pub class: usize,
    pub iou: f64,
    pub dsc: f64,
    pub specificity: f64,
    pub specificity_degenerate: bool,
    pub mcc: f64,
    pub bf1: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentationReport {
    pub per_class: Vec<ClassSegMetrics>,
    pub pixel_accuracy: f64,
}

/// Boundary pixels of the class-c region: the pixel belongs to c and either
/// some 4-neighbor does not, or it sits on the image edge (the region is cut
/// by the frame there).
fn boundary_pixels(mask: &[u8], h: usize, w: usize, c: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != c {
                continue;
            }
            let on_edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let differs = (y > 0 && mask[(y - 1) * w + x] != c)
                || (y + 1 < h && mask[(y + 1) * w + x] != c)
                || (x > 0 && mask[y * w + x - 1] != c)
                || (x + 1 < w && mask[y * w + x + 1] != c);
            if on_edge || differs {
                out.push((y, x));
            }
        }
    }
    out
}

fn chebyshev_matched(a: &[(usize, usize)], b: &[(usize, usize)], tol: usize) -> usize {
    // Sets are small (boundaries, not areas); direct scan is fine.
    a.iter()
        .filter(|&&(ay, ax)| {
            b.iter().any(|&(by, bx)| {
                ay.abs_diff(by) <= tol && ax.abs_diff(bx) <= tol
            })
        })
        .count()
}

/// Per-class segmentation metrics over two class-id masks of `h` x `w`
/// pixels, with the boundary-F1 match tolerance in Chebyshev distance.
pub fn seg_metrics(
    pred: &[u8],
    truth: &[u8],
    h: usize,
    w: usize,
    classes: usize,
    boundary_tol: usize,
) -> Result<SegmentationReport> {
    if pred.len() != h * w || truth.len() != h * w {
        return Err(Error::InvalidData(format!(
            "mask sizes {} and {} do not match {h} x {w}",
            pred.len(),
            truth.len()
        )));
    }
    for m in [pred, truth] {
        for &v in m {
            if v as usize >= classes {
                return Err(Error::LabelOutOfRange { label: v as usize, classes });
            }
        }
    }
    let total = (h * w) as f64;
    let mut per_class = Vec::with_capacity(classes);
    for class in 0..classes {
        let c = class as u8;
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let (tpf, fpf, fnf, tnf) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        let iou = safe_div(tpf, tpf + fpf + fnf);
        let dsc = safe_div(2.0 * tpf, 2.0 * tpf + fpf + fnf);
        let specificity_degenerate = tn + fp == 0;
        let specificity = if specificity_degenerate { 1.0 } else { tnf / (tnf + fpf) };
        let mcc_den =
            ((tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf)).sqrt();
        let mcc = safe_div(tpf * tnf - fpf * fnf, mcc_den);

        let pb = boundary_pixels(pred, h, w, c);
        let gb = boundary_pixels(truth, h, w, c);
        let bf1 = if pb.is_empty() && gb.is_empty() {
            None
        } else {
            // Dice over boundary sets with the intersection relaxed to
            // within-tolerance matches, counted from both sides.
            let matched = chebyshev_matched(&pb, &gb, boundary_tol)
                + chebyshev_matched(&gb, &pb, boundary_tol);
            Some(safe_div(matched as f64, (pb.len() + gb.len()) as f64))
        };

        per_class.push(ClassSegMetrics {
            class,
            iou,
            dsc,
            specificity,
            specificity_degenerate,
            mcc,
            bf1,
            accuracy: (tpf + tnf) / total,
        });
    }
    let agree = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(SegmentationReport { per_class, pixel_accuracy: agree as f64 / total })
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Plain-text table for a classification report.
pub fn render_classification(r: &ClassificationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<16} {:>8}\n", "metric", "value"));
    for (name, v) in [
        ("accuracy", r.accuracy),
        ("micro precision", r.micro_precision),
        ("micro recall", r.micro_recall),
        ("micro f1", r.micro_f1),
        ("r2", r.r2),
        ("auc (ovo)", r.auc_ovo),
        ("auc (micro)", r.auc_micro),
    ] {
        out.push_str(&format!("{name:<16} {:>8}\n", fmt4(v)));
    }
    if !r.auc_ovo_skipped_pairs.is_empty() {
        out.push_str(&format!(
            "note: ovo skipped pairs with a missing class: {:?}\n",
            r.auc_ovo_skipped_pairs
        ));
    }
    out
}

/// Plain-text table for a segmentation report: one row per class, one column
/// per metric, then the overall pixel accuracy. An absent-class BF1 renders
/// blank.
pub fn render_segmentation(r: &SegmentationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "class", "iou", "dsc", "spec", "mcc", "bf1", "acc"
    ));
    for m in &r.per_class {
        let bf1 = m.bf1.map(fmt4).unwrap_or_default();
        let spec = if m.specificity_degenerate {
            format!("{}*", fmt4(m.specificity))
        } else {
            fmt4(m.specificity)
        };
        out.push_str(&format!(
            "{:<7} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            m.class,
            fmt4(m.iou),
            fmt4(m.dsc),
            spec,
            fmt4(m.mcc),
            bf1,
            fmt4(m.accuracy)
        ));
    }
    if r.per_class.iter().any(|m| m.specificity_degenerate) {
        out.push_str("* no true negatives for this class; specificity reported as 1\n");
    }
    out.push_str(&format!("pixel accuracy: {}\n", fmt4(r.pixel_accuracy)));
    out
}
