//! Soft skeletons, topological precision/sensitivity and the composite
//! segmentation objective.
//!
//! Every function works on tape variables so it can be used both as a
//! training loss and, on constants, as a plain evaluation.

use irfusion_tensor::{Real, Tape, Tensor, TensorError, Var, MAXPOOL_PAD};

use crate::error::{CoreError, Result};

/// Entries allowed outside `[0, 1]` before a map is rejected.
const RANGE_TOL: f64 = 1e-6;

/// A `1×H×W` map with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask(Tensor<f32>);

impl SoftMask {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(TensorError::InvalidShape {
                op: "mask",
                shape: s.to_vec(),
                reason: "expected 1×H×W".into(),
            }
            .into());
        }
        check_range(values.data())?;
        Ok(SoftMask(values))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        SoftMask(Tensor::zeros(&[1, h, w]))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn is_binary(&self) -> bool {
        self.0.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `1` where the value is at least `threshold`, else `0`.
    pub fn binarize(&self, threshold: f32) -> SoftMask {
        SoftMask(self.0.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
    }

    pub fn skeleton(&self, iterations: usize) -> Result<SoftMask> {
        let tape = Tape::<f32>::new();
        let s = soft_skeleton(tape.constant(self.0.clone()), iterations)?;
        Ok(SoftMask(s.value()))
    }
}

fn check_range<T: Real>(data: &[T]) -> Result<()> {
    if let Some(v) = data
        .iter()
        .map(|v| v.as_f64())
        .find(|v| !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(v))
    {
        return Err(CoreError::Domain(format!("mask value {v} outside [0, 1]")));
    }
    Ok(())
}

fn same_shape<T: Real>(op: &'static str, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        }
        .into());
    }
    Ok(())
}

fn erode<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(x.neg().maxpool2d(3, 1, 1, MAXPOOL_PAD)?.neg())
}

fn open<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(erode(x)?.maxpool2d(3, 1, 1, MAXPOOL_PAD)?)
}

/// Iterated min/max-pool skeleton of a `C×H×W` map with values in `[0, 1]`.
pub fn soft_skeleton<'t, T: Real>(x: Var<'t, T>, iterations: usize) -> Result<Var<'t, T>> {
    if iterations == 0 {
        return Err(CoreError::config("skeleton iterations must be at least 1"));
    }
    check_range(x.value().data())?;
    let mut img = x;
    let mut skel = img.sub(open(img)?)?.relu();
    for _ in 0..iterations {
        img = erode(img)?;
        let delta = img.sub(open(img)?)?.relu();
        skel = skel.add(delta.mul(skel.one_minus())?)?;
    }
    Ok(skel.clamp(0.0, 1.0))
}

/// `(Σ skel⊙vol + eps) / (Σ skel + eps)`.
fn skeleton_overlap<'t, T: Real>(skel: Var<'t, T>, vol: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    same_shape("skeleton overlap", skel, vol)?;
    let inter = skel.mul(vol)?.sum().add_scalar(eps);
    Ok(inter.div(skel.sum().add_scalar(eps))?)
}

/// Fraction of the predicted skeleton lying inside the label.
pub fn topo_precision<'t, T: Real>(s_p: Var<'t, T>, v_l: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    skeleton_overlap(s_p, v_l, eps)
}

/// Fraction of the label skeleton lying inside the prediction.
pub fn topo_sensitivity<'t, T: Real>(s_l: Var<'t, T>, v_p: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    skeleton_overlap(s_l, v_p, eps)
}

/// `2·P·S / (P + S + eps)`.
pub fn harmonic<'t, T: Real>(p: Var<'t, T>, s: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    Ok(p.mul(s)?.scale(2.0).div(p.add(s)?.add_scalar(eps))?)
}

/// Skeleton-based similarity between label and prediction, in `[0, 1]`.
pub fn cl_similarity<'t, T: Real>(
    v_l: Var<'t, T>,
    v_p: Var<'t, T>,
    iterations: usize,
    eps: f64,
) -> Result<Var<'t, T>> {
    same_shape("topology", v_l, v_p)?;
    let s_l = soft_skeleton(v_l, iterations)?;
    cl_with_label_skeleton(v_l, s_l, v_p, iterations, eps)
}

fn cl_with_label_skeleton<'t, T: Real>(
    v_l: Var<'t, T>,
    s_l: Var<'t, T>,
    v_p: Var<'t, T>,
    iterations: usize,
    eps: f64,
) -> Result<Var<'t, T>> {
    let s_p = soft_skeleton(v_p, iterations)?;
    harmonic(
        topo_precision(s_p, v_l, eps)?,
        topo_sensitivity(s_l, v_p, eps)?,
        eps,
    )
}

/// `1 − cl_similarity`.
pub fn topology_loss<'t, T: Real>(
    v_l: Var<'t, T>,
    v_p: Var<'t, T>,
    iterations: usize,
    eps: f64,
) -> Result<Var<'t, T>> {
    Ok(cl_similarity(v_l, v_p, iterations, eps)?.one_minus())
}

pub fn dice_loss<'t, T: Real>(v_l: Var<'t, T>, v_p: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    same_shape("dice", v_l, v_p)?;
    let inter = v_l.mul(v_p)?.sum().scale(2.0).add_scalar(eps);
    let total = v_l.sum().add(v_p.sum())?.add_scalar(eps);
    Ok(inter.div(total)?.one_minus())
}

/// Mean binary cross-entropy with the prediction clamped to `[1e-7, 1 − 1e-7]`.
pub fn ce_loss<'t, T: Real>(v_l: Var<'t, T>, v_p: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("cross entropy", v_l, v_p)?;
    let p = v_p.clamp(1e-7, 1.0 - 1e-7);
    let fg = v_l.mul(p.ln())?;
    let bg = v_l.one_minus().mul(p.one_minus().ln())?;
    Ok(fg.add(bg)?.mean().neg())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub skeleton_iterations: usize,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.3,
            beta: 1.0,
            gamma: 1.0,
            delta: 0.1,
            skeleton_iterations: 10,
            eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma, self.delta];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::config("loss weights must be finite and non-negative"));
        }
        if self.alpha + self.beta + self.gamma <= 0.0 {
            return Err(CoreError::config("alpha + beta + gamma must be positive"));
        }
        if self.skeleton_iterations == 0 {
            return Err(CoreError::config("skeleton_iterations must be at least 1"));
        }
        if !(self.eps > 0.0) {
            return Err(CoreError::config("eps must be positive"));
        }
        Ok(())
    }
}

/// The three weighted terms of one prediction.
#[derive(Clone, Copy)]
pub struct LossTerms<'t, T: Real> {
    pub weighted: Var<'t, T>,
    pub topology: Var<'t, T>,
    pub ce: Var<'t, T>,
    pub dice: Var<'t, T>,
}

#[derive(Clone, Copy)]
pub struct CompositeLoss<'t, T: Real> {
    pub total: Var<'t, T>,
    pub main: LossTerms<'t, T>,
    pub aux: LossTerms<'t, T>,
}

fn detach<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    x.tape().constant(x.value())
}

/// Terms with a zero weight are evaluated on a detached copy of the
/// prediction so they are reported without costing a reverse pass.
fn weighted_terms<'t, T: Real>(
    v_l: Var<'t, T>,
    s_l: Var<'t, T>,
    v_p: Var<'t, T>,
    w: &LossWeights,
) -> Result<LossTerms<'t, T>> {
    let pick = |weight: f64| if weight > 0.0 { v_p } else { detach(v_p) };
    let topology = cl_with_label_skeleton(v_l, s_l, pick(w.alpha), w.skeleton_iterations, w.eps)?.one_minus();
    let ce = ce_loss(v_l, pick(w.beta))?;
    let dice = dice_loss(v_l, pick(w.gamma), w.eps)?;
    let weighted = topology
        .scale(w.alpha)
        .add(ce.scale(w.beta))?
        .add(dice.scale(w.gamma))?;
    Ok(LossTerms {
        weighted,
        topology,
        ce,
        dice,
    })
}

/// `main + δ·aux`, each being `α·topology + β·ce + γ·dice`.
pub fn composite_loss<'t, T: Real>(
    v_l: Var<'t, T>,
    v_p: Var<'t, T>,
    v_p_aux: Var<'t, T>,
    w: &LossWeights,
) -> Result<CompositeLoss<'t, T>> {
    w.validate()?;
    same_shape("composite", v_l, v_p)?;
    same_shape("composite", v_l, v_p_aux)?;
    // The label skeleton carries no gradient and is shared by both heads.
    let s_l = detach(soft_skeleton(detach(v_l), w.skeleton_iterations)?);
    let main = weighted_terms(v_l, s_l, v_p, w)?;
    let (aux, total) = if w.delta > 0.0 {
        let aux = weighted_terms(v_l, s_l, v_p_aux, w)?;
        (aux, main.weighted.add(aux.weighted.scale(w.delta))?)
    } else {
        (weighted_terms(v_l, s_l, detach(v_p_aux), w)?, main.weighted)
    };
    Ok(CompositeLoss { total, main, aux })
}
