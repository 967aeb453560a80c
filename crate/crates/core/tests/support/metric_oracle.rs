//! Pixel-loop reference for the confusion-based metrics.

#![allow(dead_code)]

use irfusion_core::loss::SoftMask;
use irfusion_core::metrics::{compute_metrics, confusion, MetricsReport};
use irfusion_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_pair(seed: u64) -> (SoftMask, SoftMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let density = rng.random_range(0.0..0.7);
    let gt: Vec<f32> = (0..64).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect();
    let pred: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let m = |v: Vec<f32>| SoftMask::new(Tensor::new(&[1, 8, 8], v).unwrap()).unwrap();
    (m(pred), m(gt))
}

/// Straight pixel loop over both masks.
pub fn brute_force(pred: &SoftMask, gt: &SoftMask, threshold: f32) -> [f64; 6] {
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..8 {
        for x in 0..8 {
            let p = pred.data()[y * 8 + x] >= threshold;
            let g = gt.data()[y * 8 + x] == 1.0;
            if p && g {
                tp += 1.0;
            } else if p {
                fp += 1.0;
            } else if g {
                fn_ += 1.0;
            } else {
                tn += 1.0;
            }
        }
    }
    let exact = fp == 0.0 && fn_ == 0.0;
    let r = |n: f64, d: f64| if d == 0.0 { if exact { 1.0 } else { 0.0 } } else { n / d };
    [
        r(2.0 * tp, 2.0 * tp + fp + fn_),
        r(tp, tp + fp + fn_),
        r(tp + tn, tp + tn + fp + fn_),
        r(tp, tp + fp),
        r(tn, tn + fp),
        r(tp, tp + fn_),
    ]
}

pub fn six(r: &MetricsReport) -> [f64; 6] {
    [r.dice, r.iou, r.accuracy, r.precision, r.specificity, r.recall]
}

/// Exact agreement with [`brute_force`] and the Dice/IoU identity on 100
/// random 8×8 pairs. Returns the number of pairs.
pub fn brute_force_suite() -> Result<usize, String> {
    for seed in 0..100 {
        let (pred, gt) = random_pair(seed);
        let c = confusion(&pred, &gt, 0.5).map_err(|e| e.to_string())?;
        let r = compute_metrics(&c, &pred, &gt, 0.5).map_err(|e| e.to_string())?;
        let want = brute_force(&pred, &gt, 0.5);
        if six(&r) != want {
            return Err(format!("seed {seed}: {:?} vs {want:?}", six(&r)));
        }
        if c.total() != 64 {
            return Err(format!("seed {seed}: {} pixels counted", c.total()));
        }
        if (r.dice - 2.0 * r.iou / (1.0 + r.iou)).abs() >= 1e-12 {
            return Err(format!("seed {seed}: dice {} and iou {} break the identity", r.dice, r.iou));
        }
    }
    Ok(100)
}
