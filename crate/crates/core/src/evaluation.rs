//! Classification and detection metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, ClassLabel, Detection, SegmentationMask};
use crate::detection::iou;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Bleeding is the positive class.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Unweighted mean over both classes taken as positive in turn.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
}

/// `(precision, recall, f1)` with `positive` as the positive class.
fn one_vs_rest(preds: &[ClassLabel], truths: &[ClassLabel], positive: ClassLabel) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &t) in preds.iter().zip(truths) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let (p, r) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
    (p, r, harmonic(p, r))
}

pub fn classification_metrics(preds: &[ClassLabel], truths: &[ClassLabel]) -> Result<ClassificationMetrics> {
    if preds.len() != truths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    let (precision, recall, f1) = one_vs_rest(preds, truths, ClassLabel::Bleeding);
    let (np, nr, nf) = one_vs_rest(preds, truths, ClassLabel::NonBleeding);
    Ok(ClassificationMetrics {
        accuracy: ratio(correct, preds.len()),
        precision,
        recall,
        f1,
        macro_precision: (precision + np) / 2.0,
        macro_recall: (recall + nr) / 2.0,
        macro_f1: (f1 + nf) / 2.0,
    })
}

/// Greedy matching in descending score order (ties by input order).
///
/// Returns `(detection index, matched ground-truth index)` sorted by detection index.
pub fn match_detections(
    dets: &[Detection],
    gts: &[BoundingBox],
    iou_thr: f64,
) -> Result<Vec<(usize, Option<usize>)>> {
    if !(iou_thr > 0.0 && iou_thr < 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold {iou_thr} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![(0, None); dets.len()];
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(&dets[d].bbox, gt);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        out[d] = match best {
            Some((g, o)) if o >= iou_thr => {
                taken[g] = true;
                (d, Some(g))
            }
            _ => (d, None),
        };
    }
    Ok(out)
}

/// Detections and ground truth of one image, class-agnostic.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetections {
    pub id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BoundingBox>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.01, …, 1.
    Coco101,
}

fn check_ids(corpus: &[ImageDetections]) -> Result<()> {
    let mut seen = BTreeSet::new();
    match corpus.iter().find(|im| !seen.insert(im.id.as_str())) {
        Some(im) => Err(Error::InvalidArgument(format!("duplicate image id {}", im.id))),
        None => Ok(()),
    }
}

fn count_gt(corpus: &[ImageDetections]) -> Result<usize> {
    check_ids(corpus)?;
    let n: usize = corpus.iter().map(|im| im.ground_truth.len()).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("corpus has no ground-truth boxes".into()));
    }
    Ok(n)
}

/// Precision/recall after each detection in pooled score order.
pub fn pr_curve(corpus: &[ImageDetections], iou_thr: f64) -> Result<Vec<(f64, f64)>> {
    let n_gt = count_gt(corpus)?;
    let mut hits: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (i, im) in corpus.iter().enumerate() {
        for (d, g) in match_detections(&im.detections, &im.ground_truth, iou_thr)? {
            hits.push((im.detections[d].score, i, d, g.is_some()));
        }
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    Ok(hits
        .iter()
        .enumerate()
        .map(|(k, h)| {
            tp += usize::from(h.3);
            (tp as f64 / (k + 1) as f64, tp as f64 / n_gt as f64)
        })
        .collect())
}

pub fn average_precision(corpus: &[ImageDetections], iou_thr: f64, interp: Interpolation) -> Result<f64> {
    let curve = pr_curve(corpus, iou_thr)?;
    Ok(match interp {
        Interpolation::AllPoints => {
            let mut rec = vec![0.0];
            let mut pre = vec![0.0];
            for &(p, r) in &curve {
                pre.push(p);
                rec.push(r);
            }
            rec.push(1.0);
            pre.push(0.0);
            for i in (0..pre.len() - 1).rev() {
                pre[i] = pre[i].max(pre[i + 1]);
            }
            (0..rec.len() - 1)
                .filter(|&i| rec[i + 1] != rec[i])
                .map(|i| (rec[i + 1] - rec[i]) * pre[i + 1])
                .sum()
        }
        Interpolation::Coco101 => {
            let total: f64 = (0..=100)
                .map(|t| {
                    let r = f64::from(t) / 100.0;
                    curve.iter().filter(|c| c.1 >= r).map(|c| c.0).fold(0.0, f64::max)
                })
                .sum();
            total / 101.0
        }
    })
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// `(AP at 0.5, mean AP over 0.50:0.05:0.95)`.
pub fn map_range(corpus: &[ImageDetections], interp: Interpolation) -> Result<(f64, f64)> {
    let aps = coco_thresholds()
        .iter()
        .map(|&t| average_precision(corpus, t, interp))
        .collect::<Result<Vec<_>>>()?;
    // Mean written as a shortfall from AP@0.5 so that equal APs round to equal values.
    let shortfall = aps.iter().map(|a| aps[0] - a).sum::<f64>() / aps.len() as f64;
    Ok((aps[0], aps[0] - shortfall))
}

/// Mean IoU of pairs matched at threshold 0.5; 0 when nothing matches.
pub fn average_iou(corpus: &[ImageDetections]) -> Result<f64> {
    count_gt(corpus)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for im in corpus {
        for (d, g) in match_detections(&im.detections, &im.ground_truth, 0.5)? {
            if let Some(g) = g {
                sum += iou(&im.detections[d].bbox, &im.ground_truth[g]);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// One image with class-tagged ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<(u32, BoundingBox)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// Class-agnostic AP at IoU 0.5.
    pub ap: f64,
    /// Mean over ground-truth classes of AP at IoU 0.5.
    pub map50: f64,
    /// Mean over ground-truth classes of AP averaged over IoU 0.50:0.95.
    pub map50_95: f64,
    /// Mean IoU of class-matched pairs at IoU 0.5.
    pub avg_iou: f64,
}

fn class_slice(images: &[LabeledImage], class: u32) -> Vec<ImageDetections> {
    images
        .iter()
        .map(|im| ImageDetections {
            id: im.id.clone(),
            detections: im.detections.iter().filter(|d| d.class_id == class).copied().collect(),
            ground_truth: im.ground_truth.iter().filter(|g| g.0 == class).map(|g| g.1).collect(),
        })
        .collect()
}

pub fn detection_metrics(images: &[LabeledImage], interp: Interpolation) -> Result<DetectionMetrics> {
    let agnostic: Vec<ImageDetections> = images
        .iter()
        .map(|im| ImageDetections {
            id: im.id.clone(),
            detections: im.detections.clone(),
            ground_truth: im.ground_truth.iter().map(|g| g.1).collect(),
        })
        .collect();
    let ap = average_precision(&agnostic, 0.5, interp)?;
    let classes: BTreeSet<u32> = images.iter().flat_map(|im| im.ground_truth.iter().map(|g| g.0)).collect();
    let (mut m50, mut m5095) = (0.0, 0.0);
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    for &c in &classes {
        let slice = class_slice(images, c);
        let (a, b) = map_range(&slice, interp)?;
        m50 += a;
        m5095 += b;
        for im in &slice {
            for (d, g) in match_detections(&im.detections, &im.ground_truth, 0.5)? {
                if let Some(g) = g {
                    iou_sum += iou(&im.detections[d].bbox, &im.ground_truth[g]);
                    iou_n += 1;
                }
            }
        }
    }
    let k = classes.len() as f64;
    Ok(DetectionMetrics {
        ap,
        map50: m50 / k,
        map50_95: m5095 / k,
        avg_iou: if iou_n == 0 { 0.0 } else { iou_sum / iou_n as f64 },
    })
}

/// Dice overlap of `pred ≥ threshold` with a binary ground truth; 1 when both are empty.
pub fn dice(pred: &SegmentationMask, truth: &SegmentationMask, threshold: f64) -> Result<f64> {
    if pred.values().shape() != truth.values().shape() {
        return Err(Error::Shape("dice of differently sized masks".into()));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.values().data().iter().zip(truth.values().data()) {
        let (pp, tt) = (p >= threshold, t >= 0.5);
        a += usize::from(pp);
        b += usize::from(tt);
        inter += usize::from(pp && tt);
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 })
}

/// Serialized with fixed keys; absent halves are omitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationMetrics>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// Human-readable table rounded to four decimals.
    pub fn display(&self) -> String {
        let mut rows: BTreeMap<usize, (&str, f64)> = BTreeMap::new();
        if let Some(c) = &self.classification {
            for (i, kv) in [
                ("accuracy", c.accuracy),
                ("precision", c.precision),
                ("recall", c.recall),
                ("f1", c.f1),
                ("macro_precision", c.macro_precision),
                ("macro_recall", c.macro_recall),
                ("macro_f1", c.macro_f1),
            ]
            .into_iter()
            .enumerate()
            {
                rows.insert(i, kv);
            }
        }
        if let Some(d) = &self.detection {
            for (i, kv) in [("ap", d.ap), ("map50", d.map50), ("map50_95", d.map50_95), ("avg_iou", d.avg_iou)]
                .into_iter()
                .enumerate()
            {
                rows.insert(10 + i, kv);
            }
        }
        rows.values().map(|(k, v)| format!("{k:<16}{v:.4}\n")).collect()
    }
}
