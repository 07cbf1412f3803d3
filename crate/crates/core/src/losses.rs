//! Adversarial, cycle, identity and detection losses, plus the weighted
//! objective that combines them.
//!
//! Every loss returns its value together with its gradient with respect to
//! each tensor argument, so it can be checked in isolation and recorded on a
//! tape as a fused node.

use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::nets::{DetectionGrid, GridScale};
use crate::scalar::{cast, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvForm {
    /// Sigmoid cross-entropy on raw scores; the generator uses the
    /// non-saturating `-log D(fake)`.
    LogForm,
    #[default]
    LeastSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvRole {
    Discriminator,
    Generator,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_i: f64,
    pub lambda_t: f64,
    pub adv_form: AdvForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 10.0, lambda_i: 5.0, lambda_t: 1.0, adv_form: AdvForm::LeastSquares }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_i", self.lambda_i), ("lambda_t", self.lambda_t)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, format!("must be a finite non-negative weight, got {v}")));
            }
        }
        Ok(())
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

use crate::nets::decode_sigmoid as sigmoid;

fn from_f64<T: Scalar>(shape: &[usize], v: Vec<f64>) -> Tensor<T> {
    Tensor::from_vec(shape, v.into_iter().map(cast).collect())
}

/// Loss value with the gradient for each tensor argument, in argument order.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: f64,
    pub grads: Vec<Tensor<T>>,
}

/// Mean over all score-map elements (patches and batch) of each term.
///
/// `grads` holds `[d_real, d_fake]` for the discriminator role and `[d_fake]`
/// for the generator role.
pub fn adversarial_loss<T: Scalar>(
    real: Option<&Tensor<T>>,
    fake: &Tensor<T>,
    role: AdvRole,
    form: AdvForm,
) -> Result<LossGrad<T>> {
    // (loss, dloss/dscore) against a 0/1 target
    let term = |s: f64, target_real: bool| -> (f64, f64) {
        match (form, target_real) {
            (AdvForm::LogForm, true) => (softplus(-s), sigmoid(s) - 1.0),
            (AdvForm::LogForm, false) => (softplus(s), sigmoid(s)),
            (AdvForm::LeastSquares, true) => ((s - 1.0).powi(2), 2.0 * (s - 1.0)),
            (AdvForm::LeastSquares, false) => (s * s, 2.0 * s),
        }
    };
    let reduce = |t: &Tensor<T>, target_real: bool| -> (f64, Tensor<T>) {
        let n = t.len().max(1) as f64;
        let mut total = 0.0;
        let g: Vec<f64> = t
            .data()
            .iter()
            .map(|&s| {
                let (l, d) = term(s.to_f64_lossy(), target_real);
                total += l;
                d / n
            })
            .collect();
        (total / n, from_f64(t.shape(), g))
    };
    match role {
        AdvRole::Generator => {
            let (v, g) = reduce(fake, true);
            Ok(LossGrad { value: v, grads: vec![g] })
        }
        AdvRole::Discriminator => {
            let real = real.ok_or_else(|| Error::validation("d_real_scores", "required for the discriminator role"))?;
            if real.shape() != fake.shape() {
                return Err(Error::Shape(format!("real scores {:?} vs fake scores {:?}", real.shape(), fake.shape())));
            }
            let (vr, gr) = reduce(real, true);
            let (vf, gf) = reduce(fake, false);
            Ok(LossGrad { value: vr + vf, grads: vec![gr, gf] })
        }
    }
}

/// Mean absolute difference; gradient w.r.t. `(a, b)`.
pub fn l1_mean<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<LossGrad<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.len().max(1) as f64;
    let mut total = 0.0;
    let ga: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            total += d.abs();
            d.signum() * (d != 0.0) as u8 as f64 / n
        })
        .collect();
    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
    Ok(LossGrad { value: total / n, grads: vec![from_f64(a.shape(), ga), from_f64(a.shape(), gb)] })
}

/// `mean|rec_a - x_a| + mean|rec_b - x_b|`; grads w.r.t. `(x_a, rec_a, x_b, rec_b)`.
pub fn cycle_loss<T: Scalar>(x_a: &Tensor<T>, rec_a: &Tensor<T>, x_b: &Tensor<T>, rec_b: &Tensor<T>) -> Result<LossGrad<T>> {
    let mut a = l1_mean(rec_a, x_a)?;
    let mut b = l1_mean(rec_b, x_b)?;
    let (ga_x, ga_r) = (a.grads.pop().unwrap(), a.grads.pop().unwrap());
    let (gb_x, gb_r) = (b.grads.pop().unwrap(), b.grads.pop().unwrap());
    Ok(LossGrad { value: a.value + b.value, grads: vec![ga_x, ga_r, gb_x, gb_r] })
}

/// `mean|g_a(x_b) - x_b| + mean|g_b(x_a) - x_a|`; grads w.r.t.
/// `(g_a_of_b, x_b, g_b_of_a, x_a)`.
pub fn identity_loss<T: Scalar>(
    g_a_of_b: &Tensor<T>,
    x_b: &Tensor<T>,
    g_b_of_a: &Tensor<T>,
    x_a: &Tensor<T>,
) -> Result<LossGrad<T>> {
    let a = l1_mean(g_a_of_b, x_b)?;
    let b = l1_mean(g_b_of_a, x_a)?;
    let mut grads = a.grads;
    grads.extend(b.grads);
    Ok(LossGrad { value: a.value + b.value, grads })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskLossWeights {
    pub coord: f64,
    pub obj: f64,
    pub noobj: f64,
    pub class: f64,
    /// Unassigned slots whose decoded box overlaps a target above this IoU
    /// are left out of the background term.
    pub ignore_iou: f64,
}

impl Default for TaskLossWeights {
    fn default() -> Self {
        Self { coord: 1.0, obj: 1.0, noobj: 0.5, class: 1.0, ignore_iou: 0.5 }
    }
}

/// Detection loss value, per-scale gradients and the ignore mask it used.
#[derive(Clone, Debug)]
pub struct TaskLoss<T> {
    pub value: f64,
    pub grads: Vec<Tensor<T>>,
    /// Per scale, flat `[N, A, S, S]` flags of slots excluded from the background term.
    pub ignored: Vec<Vec<bool>>,
    pub assigned: usize,
}

/// Slot a target is responsible for.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub scale: usize,
    pub anchor: usize,
    pub y: usize,
    pub x: usize,
}

fn shape_iou(w: f64, h: f64, anchor: [f64; 2]) -> f64 {
    let inter = w.min(anchor[0]) * h.min(anchor[1]);
    inter / (w * h + anchor[0] * anchor[1] - inter)
}

/// Best-shape-IoU anchor over all scales, at the cell containing the center.
pub fn assign_target<T: Scalar>(grid: &DetectionGrid<T>, b: &BoundingBox) -> Assignment {
    let mut best = (0, 0, f64::NEG_INFINITY);
    for (si, sc) in grid.scales.iter().enumerate() {
        for (a, &anchor) in sc.anchors.iter().enumerate() {
            let v = shape_iou(b.w, b.h, anchor);
            if v > best.2 {
                best = (si, a, v);
            }
        }
    }
    let sc = &grid.scales[best.0];
    let cell = |c: f64| ((c * sc.side as f64).floor() as usize).min(sc.side - 1);
    Assignment { scale: best.0, anchor: best.1, y: cell(b.cy), x: cell(b.cx) }
}

/// Binary cross-entropy of `sigmoid(z)` against soft target `t`, minus the
/// entropy of `t`, so a perfect prediction scores zero.
fn soft_bce(z: f64, t: f64) -> (f64, f64) {
    let entropy = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()) };
    ((softplus(z) - t * z - entropy(t)).max(0.0), sigmoid(z) - t)
}

/// YOLO-style composite loss over a two-scale grid. `targets[n]` are the
/// boxes of batch item `n`.
///
/// Per image: coordinate, objectness and class terms are averaged over
/// assigned slots; the background term is averaged over all slots. The result
/// is averaged over the batch.
pub fn detection_task_loss<T: Scalar>(
    grid: &DetectionGrid<T>,
    targets: &[Vec<BoundingBox>],
    w: &TaskLossWeights,
) -> Result<TaskLoss<T>> {
    let batch = grid.batch();
    if targets.len() != batch {
        return Err(Error::Shape(format!("{} target lists for a batch of {batch}", targets.len())));
    }
    let slots = grid.slots() as f64;
    let mut grads: Vec<Vec<f64>> = grid.scales.iter().map(|s| vec![0.0; s.logits.len()]).collect();
    let mut ignored: Vec<Vec<bool>> =
        grid.scales.iter().map(|s| vec![false; batch * s.anchors.len() * s.side * s.side]).collect();
    let mut total = 0.0;
    let mut assigned_total = 0;
    let inv_batch = 1.0 / batch.max(1) as f64;

    for (n, boxes) in targets.iter().enumerate() {
        // later targets overwrite earlier ones that land on the same slot
        let mut assigned: Vec<(Assignment, BoundingBox)> = Vec::new();
        for b in boxes {
            let asg = assign_target(grid, b);
            assigned.retain(|(a, _)| *a != asg);
            assigned.push((asg, *b));
        }
        assigned_total += assigned.len();
        let pos_scale = inv_batch / assigned.len().max(1) as f64;
        let neg_scale = inv_batch * w.noobj / slots;

        for (si, sc) in grid.scales.iter().enumerate() {
            let g = &mut grads[si];
            let na = sc.anchors.len();
            for a in 0..na {
                for y in 0..sc.side {
                    for x in 0..sc.side {
                        let slot = Assignment { scale: si, anchor: a, y, x };
                        let flag = ((n * na + a) * sc.side + y) * sc.side + x;
                        if let Some((_, b)) = assigned.iter().find(|(asg, _)| *asg == slot) {
                            total += positive_terms(sc, n, a, y, x, b, w, pos_scale, g);
                            continue;
                        }
                        if !boxes.is_empty() {
                            let pred = sc.decode_box(n, a, y, x);
                            let best = boxes.iter().map(|b| iou(&pred, b)).fold(0.0, f64::max);
                            if best > w.ignore_iou {
                                ignored[si][flag] = true;
                                continue;
                            }
                        }
                        let i = sc.index(n, a, 4, y, x);
                        let z = sc.logits.data()[i].to_f64_lossy();
                        total += neg_scale * softplus(z);
                        g[i] += neg_scale * sigmoid(z);
                    }
                }
            }
        }
    }
    let grads = grid.scales.iter().zip(grads).map(|(s, g)| from_f64(s.logits.shape(), g)).collect();
    Ok(TaskLoss { value: total, grads, ignored, assigned: assigned_total })
}

#[allow(clippy::too_many_arguments)]
fn positive_terms<T: Scalar>(
    sc: &GridScale<T>,
    n: usize,
    a: usize,
    y: usize,
    x: usize,
    b: &BoundingBox,
    w: &TaskLossWeights,
    scale: f64,
    g: &mut [f64],
) -> f64 {
    let s = sc.side as f64;
    let z = |f: usize| sc.logits.data()[sc.index(n, a, f, y, x)].to_f64_lossy();
    let mut loss = 0.0;
    let tx = (b.cx * s - x as f64).clamp(0.0, 1.0);
    let ty = (b.cy * s - y as f64).clamp(0.0, 1.0);
    for (f, t) in [(0, tx), (1, ty)] {
        let (l, d) = soft_bce(z(f), t);
        loss += w.coord * l;
        g[sc.index(n, a, f, y, x)] += scale * w.coord * d;
    }
    let tw = (b.w / sc.anchors[a][0]).ln();
    let th = (b.h / sc.anchors[a][1]).ln();
    for (f, t) in [(2, tw), (3, th)] {
        let d = z(f) - t;
        loss += w.coord * d * d;
        g[sc.index(n, a, f, y, x)] += scale * w.coord * 2.0 * d;
    }
    let zo = z(4);
    loss += w.obj * softplus(-zo);
    g[sc.index(n, a, 4, y, x)] += scale * w.obj * (sigmoid(zo) - 1.0);
    for c in 0..sc.num_classes {
        let t = if c as u32 == b.class_id { 1.0 } else { 0.0 };
        let (l, d) = soft_bce(z(5 + c), t);
        loss += w.class * l;
        g[sc.index(n, a, 5 + c, y, x)] += scale * w.class * d;
    }
    scale * loss
}

/// Unweighted loss terms of one generator update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub adv_ab: f64,
    pub adv_ba: f64,
    pub cycle: f64,
    pub identity: f64,
    pub task: f64,
}

/// Components plus their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "adv_AB")]
    pub adv_ab: f64,
    #[serde(rename = "adv_BA")]
    pub adv_ba: f64,
    pub cycle: f64,
    pub identity: f64,
    pub task: f64,
    pub total: f64,
}

/// `adv_AB + adv_BA + λc·cycle + λi·identity + λt·task`.
pub fn total_objective(c: &LossComponents, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    Ok(LossBreakdown {
        adv_ab: c.adv_ab,
        adv_ba: c.adv_ba,
        cycle: c.cycle,
        identity: c.identity,
        task: c.task,
        total: c.adv_ab + c.adv_ba + w.lambda_c * c.cycle + w.lambda_i * c.identity + w.lambda_t * c.task,
    })
}

/// Tape node for [`adversarial_loss`].
pub fn adversarial_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    real: Option<Var>,
    fake: Var,
    role: AdvRole,
    form: AdvForm,
) -> Result<Var> {
    let lg = adversarial_loss(real.map(|r| tape.value(r)), tape.value(fake), role, form)?;
    let mut grads = lg.grads.into_iter();
    let inputs = match (role, real) {
        (AdvRole::Discriminator, Some(r)) => vec![(r, grads.next().unwrap()), (fake, grads.next().unwrap())],
        _ => vec![(fake, grads.next().unwrap())],
    };
    Ok(tape.fused_scalar(cast(lg.value), inputs))
}

/// Tape node for `mean|a - b|`.
pub fn l1_on_tape<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let lg = l1_mean(tape.value(a), tape.value(b))?;
    let mut g = lg.grads.into_iter();
    Ok(tape.fused_scalar(cast(lg.value), vec![(a, g.next().unwrap()), (b, g.next().unwrap())]))
}

/// Tape node for [`detection_task_loss`] over the detector's two output maps.
pub fn task_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    grid_vars: (Var, Var),
    template: &crate::nets::DetectorConfig,
    targets: &[Vec<BoundingBox>],
    w: &TaskLossWeights,
) -> Result<Var> {
    let grid = DetectionGrid::new(template, tape.value(grid_vars.0).clone(), tape.value(grid_vars.1).clone());
    let tl = detection_task_loss(&grid, targets, w)?;
    let mut g = tl.grads.into_iter();
    Ok(tape.fused_scalar(cast(tl.value), vec![(grid_vars.0, g.next().unwrap()), (grid_vars.1, g.next().unwrap())]))
}
