//! Pixel-level segmentation metrics, per image and averaged over a dataset.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{upsample_bilinear, Element, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
    pub accuracy: f64,
}

/// `num / den`, or the empty-image convention when `den = 0`:
/// 1 if nothing was predicted or present, else 0.
fn ratio(num: f64, den: f64, c: &ConfusionCounts) -> f64 {
    if den > 0.0 {
        num / den
    } else if c.tp == 0 && c.fp == 0 && c.fn_ == 0 {
        1.0
    } else {
        0.0
    }
}

pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let precision = ratio(tp, tp + fp, c);
    let recall = ratio(tp, tp + fn_, c);
    ScalarMetrics {
        dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_, c),
        iou: ratio(tp, tp + fp + fn_, c),
        precision,
        recall,
        f2: ratio(5.0 * precision * recall, 4.0 * precision + recall, c),
        accuracy: ratio(tp + tn, tp + tn + fp + fn_, c),
    }
}

/// 1 where `prob ≥ threshold`, else 0.
pub fn binarize<T: Element>(prob: &Tensor4<T>, threshold: f64) -> Result<Tensor4<T>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(
            "binarize",
            format!("threshold {threshold} outside [0, 1]"),
        ));
    }
    let t = T::from_f64_lossy(threshold);
    Ok(prob.map(|p| if p >= t { T::one() } else { T::zero() }))
}

fn check_binary<T: Element>(op: &'static str, m: &Tensor4<T>) -> Result<()> {
    match m.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::invalid(op, format!("mask value {v} is not 0 or 1"))),
        None => Ok(()),
    }
}

pub fn confusion<T: Element>(pred: &Tensor4<T>, gt: &Tensor4<T>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "confusion",
            format!("pred {} vs gt {}", pred.shape(), gt.shape()),
        ));
    }
    check_binary("confusion", pred)?;
    check_binary("confusion", gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == T::one(), g == T::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Mean absolute difference between a probability map and a binary mask.
pub fn mae<T: Element>(prob: &Tensor4<T>, gt: &Tensor4<T>) -> Result<f64> {
    if prob.shape() != gt.shape() {
        return Err(Error::shape(
            "mae",
            format!("prob {} vs gt {}", prob.shape(), gt.shape()),
        ));
    }
    let s: f64 = prob
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p.as_f64() - g.as_f64()).abs())
        .sum();
    Ok(s / prob.numel().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub metrics: ScalarMetrics,
    pub mae: f64,
}

/// Dataset means under the documented key names.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mdice: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
    pub accuracy: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f64,
    pub images: Vec<ImageRecord>,
    pub aggregate: Aggregate,
}

/// Metrics of one probability map against its mask. The map is resized to the
/// mask's size first when they differ.
pub fn evaluate_image(
    id: &str,
    prob: &Tensor4<f32>,
    gt: &Tensor4<f32>,
    threshold: f64,
) -> Result<ImageRecord> {
    let g = gt.shape();
    let prob = if prob.shape() != g {
        if prob.shape().n != g.n || prob.shape().c != g.c {
            return Err(Error::shape(
                "evaluate",
                format!("image `{id}`: prediction {} vs mask {}", prob.shape(), g),
            ));
        }
        upsample_bilinear(prob, g.h, g.w, false)?
    } else {
        prob.clone()
    };
    let counts = confusion(&binarize(&prob, threshold)?, gt)?;
    Ok(ImageRecord {
        id: id.to_string(),
        counts,
        metrics: scalar_metrics(&counts),
        mae: mae(&prob, gt)?,
    })
}

impl MetricReport {
    /// Per-metric arithmetic mean over images.
    pub fn from_records(threshold: f64, images: Vec<ImageRecord>) -> Self {
        let n = images.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ImageRecord) -> f64| images.iter().map(f).sum::<f64>() / n;
        let aggregate = Aggregate {
            mdice: mean(&|r| r.metrics.dice),
            miou: mean(&|r| r.metrics.iou),
            precision: mean(&|r| r.metrics.precision),
            recall: mean(&|r| r.metrics.recall),
            f2: mean(&|r| r.metrics.f2),
            accuracy: mean(&|r| r.metrics.accuracy),
            mae: mean(&|r| r.mae),
        };
        MetricReport {
            threshold,
            images,
            aggregate,
        }
    }

    /// Metrics of summed counts over all images (pooled rather than averaged).
    pub fn pooled(&self) -> ScalarMetrics {
        let mut c = ConfusionCounts::default();
        for r in &self.images {
            c.tp += r.counts.tp;
            c.fp += r.counts.fp;
            c.fn_ += r.counts.fn_;
            c.tn += r.counts.tn;
        }
        scalar_metrics(&c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: one row per image, then the means.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let w = self.images.iter().map(|r| r.id.len()).max().unwrap_or(2).max(4);
        let _ = writeln!(
            s,
            "{:<w$}  {:>7} {:>7} {:>9} {:>7} {:>7} {:>8} {:>7}",
            "id", "dice", "iou", "precision", "recall", "f2", "accuracy", "mae"
        );
        let row = |s: &mut String, id: &str, v: [f64; 7]| {
            let _ = writeln!(
                s,
                "{id:<w$}  {:>7.4} {:>7.4} {:>9.4} {:>7.4} {:>7.4} {:>8.4} {:>7.4}",
                v[0], v[1], v[2], v[3], v[4], v[5], v[6]
            );
        };
        for r in &self.images {
            let m = &r.metrics;
            row(&mut s, &r.id, [m.dice, m.iou, m.precision, m.recall, m.f2, m.accuracy, r.mae]);
        }
        let a = &self.aggregate;
        row(&mut s, "mean", [a.mdice, a.miou, a.precision, a.recall, a.f2, a.accuracy, a.mae]);
        let _ = writeln!(s, "threshold {}  images {}", self.threshold, self.images.len());
        s
    }
}

/// Evaluates `(id, prediction, mask)` triples given as two id-keyed lists.
/// Every id must appear on both sides.
pub fn evaluate_dataset(
    preds: &[(String, Tensor4<f32>)],
    gts: &[(String, Tensor4<f32>)],
    threshold: f64,
) -> Result<MetricReport> {
    let missing_pred: Vec<String> = gts
        .iter()
        .filter(|(id, _)| !preds.iter().any(|(p, _)| p == id))
        .map(|(id, _)| id.clone())
        .collect();
    let missing_gt: Vec<String> = preds
        .iter()
        .filter(|(id, _)| !gts.iter().any(|(g, _)| g == id))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing_pred.is_empty() || !missing_gt.is_empty() {
        return Err(Error::IdMismatch {
            missing_pred,
            missing_gt,
        });
    }
    let mut records = Vec::with_capacity(gts.len());
    for (id, gt) in gts {
        let (_, p) = preds.iter().find(|(p, _)| p == id).expect("checked above");
        records.push(evaluate_image(id, p, gt, threshold)?);
    }
    Ok(MetricReport::from_records(threshold, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn hand_evaluated_counts() {
        let m = scalar_metrics(&ConfusionCounts::new(3, 1, 1, 11));
        assert_eq!(m.dice, 0.75);
        assert_eq!(m.iou, 0.6);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.75);
        assert!((m.f2 - 0.75).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.875);
    }

    #[test]
    fn empty_image_convention() {
        let m = scalar_metrics(&ConfusionCounts::new(0, 0, 0, 100));
        assert_eq!([m.dice, m.iou, m.precision, m.recall, m.f2, m.accuracy], [1.0; 6]);
        let miss = scalar_metrics(&ConfusionCounts::new(0, 0, 5, 0));
        assert_eq!(miss.precision, 0.0);
        assert_eq!(miss.f2, 0.0);
        assert_eq!(miss.accuracy, 0.0);
    }

    #[test]
    fn binarize_boundary_and_validation() {
        let p = Tensor4::<f32>::from_fn(Shape4::new(1, 1, 1, 3), |_, _, _, w| w as f32 * 0.25 + 0.25);
        assert_eq!(binarize(&p, 0.5).unwrap().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(binarize(&p, 0.0).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(binarize(&p, 1.0 + 1e-9).is_err());
    }

    #[test]
    fn confusion_extremes() {
        let gt = Tensor4::<f32>::from_fn(Shape4::new(1, 1, 4, 4), |_, _, h, w| ((h + w) % 2) as f32);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv = gt.map(|v| 1.0 - v);
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&gt.map(|v| v * 0.5), &gt).is_err());
    }

    #[test]
    fn mae_cases() {
        let gt = Tensor4::<f32>::from_fn(Shape4::new(1, 1, 3, 3), |_, _, h, _| (h % 2) as f32);
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&Tensor4::full(gt.shape(), 0.5), &gt).unwrap(), 0.5);
    }

    #[test]
    fn dataset_mean_and_mismatch() {
        let s = Shape4::new(1, 1, 2, 2);
        let gt = Tensor4::<f32>::new(s, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let half = Tensor4::<f32>::new(s, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let preds = vec![("a".to_string(), gt.clone()), ("b".to_string(), half)];
        let gts = vec![("a".to_string(), gt.clone()), ("b".to_string(), gt.clone())];
        let r = evaluate_dataset(&preds, &gts, 0.5).unwrap();
        assert_eq!(r.images[1].metrics.dice, 0.5);
        assert_eq!(r.aggregate.mdice, 0.75);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for k in ["mdice", "miou", "precision", "recall", "f2", "accuracy", "mae"] {
            assert!(json["aggregate"][k].is_number(), "{k}");
        }
        let err = evaluate_dataset(&preds[..1], &gts, 0.5).unwrap_err();
        assert!(err.to_string().contains("\"b\""));
    }

    #[test]
    fn prediction_resized_to_mask() {
        let gt = Tensor4::<f32>::ones(Shape4::new(1, 1, 8, 8));
        let p = Tensor4::<f32>::full(Shape4::new(1, 1, 4, 4), 0.9);
        let r = evaluate_image("x", &p, &gt, 0.5).unwrap();
        assert_eq!(r.metrics.dice, 1.0);
    }
}
