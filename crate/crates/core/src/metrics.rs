//! Pixel-level binary segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::loss::SoftMask;

/// Skeleton iterations used for the hard skeletons behind `cl_dice`.
pub const SKELETON_ITERATIONS: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Prediction and ground truth agree on every pixel.
    pub fn exact(&self) -> bool {
        self.fp == 0 && self.fn_ == 0
    }

    /// Dice from the counts alone, with the same empty-denominator rule as
    /// the full report.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, self.exact())
    }

    pub fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }
}

/// Pixel counts behind `cl_dice`: skeleton sizes and how much of each
/// skeleton falls inside the other mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonCounts {
    pub skel_pred: u64,
    pub skel_pred_in_gt: u64,
    pub skel_gt: u64,
    pub skel_gt_in_pred: u64,
}

impl SkeletonCounts {
    fn add(&mut self, o: &SkeletonCounts) {
        self.skel_pred += o.skel_pred;
        self.skel_pred_in_gt += o.skel_pred_in_gt;
        self.skel_gt += o.skel_gt;
        self.skel_gt_in_pred += o.skel_gt_in_pred;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Micro,
    Macro,
}

impl std::str::FromStr for Aggregation {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Aggregation::Micro),
            "macro" => Ok(Aggregation::Macro),
            _ => Err(CoreError::config(format!("unknown aggregation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub confusion: Confusion,
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub specificity: f64,
    pub recall: f64,
    pub cl_dice: f64,
    #[serde(flatten)]
    pub skeleton: SkeletonCounts,
    pub mode: Aggregation,
    pub threshold: f32,
}

/// `num / den`, or for an empty denominator 1.0 when prediction and
/// ground truth agree exactly and 0.0 otherwise.
fn ratio(num: u64, den: u64, exact: bool) -> f64 {
    if den == 0 {
        if exact {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

fn check_pair(pred: &SoftMask, gt: &SoftMask) -> Result<()> {
    if pred.tensor().shape() != gt.tensor().shape() {
        return Err(irfusion_tensor::TensorError::ShapeMismatch {
            op: "confusion",
            lhs: pred.tensor().shape().to_vec(),
            rhs: gt.tensor().shape().to_vec(),
        }
        .into());
    }
    if !gt.is_binary() {
        return Err(CoreError::Domain("ground truth is not binary".into()));
    }
    Ok(())
}

/// Counts after binarizing `pred` at `threshold` (`≥` is foreground).
pub fn confusion(pred: &SoftMask, gt: &SoftMask, threshold: f32) -> Result<Confusion> {
    check_pair(pred, gt)?;
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p >= threshold, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn skeleton_counts(pred: &SoftMask, gt: &SoftMask, threshold: f32) -> Result<SkeletonCounts> {
    let p = pred.binarize(threshold);
    let sp = p.skeleton(SKELETON_ITERATIONS)?.binarize(0.5);
    let sg = gt.skeleton(SKELETON_ITERATIONS)?.binarize(0.5);
    let count = |a: &SoftMask, b: Option<&SoftMask>| -> u64 {
        match b {
            None => a.data().iter().filter(|&&v| v == 1.0).count() as u64,
            Some(b) => a
                .data()
                .iter()
                .zip(b.data())
                .filter(|&(&x, &y)| x == 1.0 && y == 1.0)
                .count() as u64,
        }
    };
    Ok(SkeletonCounts {
        skel_pred: count(&sp, None),
        skel_pred_in_gt: count(&sp, Some(gt)),
        skel_gt: count(&sg, None),
        skel_gt_in_pred: count(&sg, Some(&p)),
    })
}

fn from_counts(c: Confusion, s: SkeletonCounts, mode: Aggregation, threshold: f32) -> MetricsReport {
    let exact = c.exact();
    let precision_t = ratio(s.skel_pred_in_gt, s.skel_pred, exact);
    let sensitivity_t = ratio(s.skel_gt_in_pred, s.skel_gt, exact);
    let cl_dice = if precision_t + sensitivity_t > 0.0 {
        2.0 * precision_t * sensitivity_t / (precision_t + sensitivity_t)
    } else {
        0.0
    };
    MetricsReport {
        confusion: c,
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, exact),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, exact),
        accuracy: ratio(c.tp + c.tn, c.total(), exact),
        precision: ratio(c.tp, c.tp + c.fp, exact),
        specificity: ratio(c.tn, c.tn + c.fp, exact),
        recall: ratio(c.tp, c.tp + c.fn_, exact),
        cl_dice,
        skeleton: s,
        mode,
        threshold,
    }
}

/// The six overlap metrics from `conf`, plus `cl_dice` from hard
/// skeletons of the binarized `pred` and of `gt`.
pub fn compute_metrics(conf: &Confusion, pred: &SoftMask, gt: &SoftMask, threshold: f32) -> Result<MetricsReport> {
    check_pair(pred, gt)?;
    let s = skeleton_counts(pred, gt, threshold)?;
    Ok(from_counts(*conf, s, Aggregation::Micro, threshold))
}

/// [`confusion`] followed by [`compute_metrics`].
pub fn evaluate(pred: &SoftMask, gt: &SoftMask, threshold: f32) -> Result<MetricsReport> {
    let c = confusion(pred, gt, threshold)?;
    compute_metrics(&c, pred, gt, threshold)
}

/// Micro sums the counts and recomputes every metric; macro averages the
/// per-image metrics (the counts are still summed).
pub fn aggregate(reports: &[MetricsReport], mode: Aggregation) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| CoreError::Usage("cannot aggregate zero reports".into()))?;
    let mut c = Confusion::default();
    let mut s = SkeletonCounts::default();
    for r in reports {
        c.add(&r.confusion);
        s.add(&r.skeleton);
    }
    let mut out = from_counts(c, s, mode, first.threshold);
    if mode == Aggregation::Macro {
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        out.dice = mean(|r| r.dice);
        out.iou = mean(|r| r.iou);
        out.accuracy = mean(|r| r.accuracy);
        out.precision = mean(|r| r.precision);
        out.specificity = mean(|r| r.specificity);
        out.recall = mean(|r| r.recall);
        out.cl_dice = mean(|r| r.cl_dice);
    }
    Ok(out)
}
