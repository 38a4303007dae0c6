//! Label assignment, GIoU, and the cross-guided training losses.
//!
//! The classification loss weights each positive's cross-entropy by its
//! regression IoU relative to the mean positive IoU; the regression loss
//! weights each positive's GIoU + L1 term by its foreground confidence
//! relative to the mean positive confidence. Both guidance weights are
//! constants with respect to the gradient.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract, Error, Result};
use crate::types::{BBox, BoxFrame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of negatives in the classification loss.
    pub beta: f64,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.0625,
            lambda_giou: 2.0,
            lambda_l1: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("beta", self.beta),
            ("lambda_giou", self.lambda_giou),
            ("lambda_l1", self.lambda_l1),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("loss.{k} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLossKind {
    PrecisionGuided,
    /// Beta-balanced cross-entropy with unit positive weights.
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegLossKind {
    ConfidenceGuided,
    /// Unweighted lambda-combined GIoU + L1.
    GiouL1,
}

/// Positive/negative partition of the candidate lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelAssignment {
    pub labels: Vec<bool>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl LabelAssignment {
    pub fn from_labels(labels: Vec<bool>) -> Self {
        let positives = (0..labels.len()).filter(|&i| labels[i]).collect();
        let negatives = (0..labels.len()).filter(|&i| !labels[i]).collect();
        Self {
            labels,
            positives,
            negatives,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_pos(&self) -> usize {
        self.positives.len()
    }

    pub fn n_neg(&self) -> usize {
        self.negatives.len()
    }
}

/// A cell is positive when its centre lies inside (or on) the box.
pub fn assign_labels(grid_side: usize, gt: &BBox) -> LabelAssignment {
    let g = grid_side as f64;
    let mut labels = Vec::with_capacity(grid_side * grid_side);
    for row in 0..grid_side {
        let cy = (row as f64 + 0.5) / g;
        for col in 0..grid_side {
            let cx = (col as f64 + 0.5) / g;
            labels.push(gt.x1 <= cx && cx <= gt.x2 && gt.y1 <= cy && cy <= gt.y2);
        }
    }
    LabelAssignment::from_labels(labels)
}

/// Element-wise `1 - GIoU` of `(..., 4)` boxes against broadcastable
/// ground truth. Predicted extents are clamped at zero, so unordered
/// predictions have zero area but still receive enclosure gradients.
pub fn giou_loss_tensor(boxes: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let c = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1);
    let (px1, py1, px2, py2) = (c(boxes, 0)?, c(boxes, 1)?, c(boxes, 2)?, c(boxes, 3)?);
    let (gx1, gy1, gx2, gy2) = (c(gt, 0)?, c(gt, 1)?, c(gt, 2)?, c(gt, 3)?);
    let area_p = ((&px2 - &px1)?.relu()? * (&py2 - &py1)?.relu()?)?;
    let area_g = ((&gx2 - &gx1)? * (&gy2 - &gy1)?)?;
    let iw = (px2.broadcast_minimum(&gx2)? - px1.broadcast_maximum(&gx1)?)?.relu()?;
    let ih = (py2.broadcast_minimum(&gy2)? - py1.broadcast_maximum(&gy1)?)?.relu()?;
    let inter = (iw * ih)?;
    let union = (area_p.broadcast_add(&area_g)? - &inter)?;
    let iou = (&inter / &union)?;
    let ew = (px2.broadcast_maximum(&gx2)? - px1.broadcast_minimum(&gx1)?)?;
    let eh = (py2.broadcast_maximum(&gy2)? - py1.broadcast_minimum(&gy1)?)?;
    let enclosure = (ew * eh)?;
    let giou = (iou - ((&enclosure - &union)? / &enclosure)?)?;
    Ok(giou.affine(-1.0, 1.0)?.squeeze(D::Minus1)?)
}

fn check_gt(g: &BBox) -> Result<()> {
    if !(g.width() > 0.0 && g.height() > 0.0) {
        return Err(Error::Data(format!(
            "ground-truth box has zero area: {:?}",
            g.as_array()
        )));
    }
    Ok(())
}

/// `1 - GIoU(b, g)`, in `[0, 2]`.
pub fn giou_loss(b: &BBox, g: &BBox) -> Result<f64> {
    check_gt(g)?;
    let dev = Device::Cpu;
    let bt = Tensor::new(&b.as_array(), &dev)?;
    let gt = Tensor::new(&g.as_array(), &dev)?;
    Ok(giou_loss_tensor(&bt, &gt)?.to_scalar::<f64>()?)
}

/// `IoU_i / mean IoU` over the positives (unit weights when the mean is 0).
pub fn precision_weights(boxes: &[[f64; 4]], gt: &BBox, labels: &LabelAssignment) -> Vec<f64> {
    let ious: Vec<f64> = labels
        .positives
        .iter()
        .map(|&i| {
            let [x1, y1, x2, y2] = boxes[i];
            BBox::from_corners(x1, y1, x2, y2, gt.frame).iou(gt)
        })
        .collect();
    normalize_by_mean(ious, "positive IoU")
}

/// `y_i / mean y` over the positives (unit weights when the mean is 0).
pub fn confidence_weights(fg_probs: &[f64], labels: &LabelAssignment) -> Vec<f64> {
    let conf: Vec<f64> = labels.positives.iter().map(|&i| fg_probs[i]).collect();
    normalize_by_mean(conf, "positive confidence")
}

fn normalize_by_mean(values: Vec<f64>, what: &str) -> Vec<f64> {
    if values.is_empty() {
        return values;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean > 0.0 {
        values.into_iter().map(|v| v / mean).collect()
    } else {
        log::warn!("mean {what} is zero; using unit weights");
        vec![1.0; values.len()]
    }
}

/// Per-sample inputs in the form the losses read them.
struct Detached {
    log_probs: Vec<Vec<Vec<f64>>>,
    boxes: Vec<Vec<Vec<f64>>>,
}

fn check_batch(
    log_probs: &Tensor,
    boxes: &Tensor,
    gts: &[BBox],
    labels: &[LabelAssignment],
) -> Result<(usize, usize)> {
    let (b, n, two) = log_probs.dims3()?;
    let (bb, nb, four) = boxes.dims3()?;
    if two != 2 || four != 4 || b != bb || n != nb {
        return Err(contract!(
            "loss inputs must be (B, n, 2) and (B, n, 4), got {:?} and {:?}",
            log_probs.dims(),
            boxes.dims()
        ));
    }
    if gts.len() != b || labels.len() != b {
        return Err(contract!(
            "{b} samples but {} boxes and {} label sets",
            gts.len(),
            labels.len()
        ));
    }
    for (g, l) in gts.iter().zip(labels) {
        check_gt(g)?;
        if l.len() != n {
            return Err(contract!("label set covers {} of {n} candidates", l.len()));
        }
        if l.n_pos() == 0 {
            return Err(Error::Numeric(
                "loss undefined without positive samples".to_string(),
            ));
        }
    }
    Ok((b, n))
}

fn detach(log_probs: &Tensor, boxes: &Tensor) -> Result<Detached> {
    Ok(Detached {
        log_probs: log_probs.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?,
        boxes: boxes.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?,
    })
}

fn coef_tensor(coef: Vec<f64>, b: usize, n: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(coef, (b, n), like.device())?.to_dtype(like.dtype())?)
}

/// Per-sample guidance weights over the positives, computed from
/// detached predictions.
pub fn cls_guidance(
    log_probs: &Tensor,
    boxes: &Tensor,
    gts: &[BBox],
    labels: &[LabelAssignment],
    kind: ClsLossKind,
) -> Result<Vec<Vec<f64>>> {
    check_batch(log_probs, boxes, gts, labels)?;
    let det = detach(log_probs, boxes)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(s, l)| match kind {
            ClsLossKind::PrecisionGuided => {
                let bx: Vec<[f64; 4]> = det.boxes[s].iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
                precision_weights(&bx, &gts[s], l)
            }
            ClsLossKind::Ce => vec![1.0; l.n_pos()],
        })
        .collect())
}

pub fn reg_guidance(
    log_probs: &Tensor,
    boxes: &Tensor,
    gts: &[BBox],
    labels: &[LabelAssignment],
    kind: RegLossKind,
) -> Result<Vec<Vec<f64>>> {
    check_batch(log_probs, boxes, gts, labels)?;
    let det = detach(log_probs, boxes)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(s, l)| match kind {
            RegLossKind::ConfidenceGuided => {
                let fg: Vec<f64> = det.log_probs[s].iter().map(|r| r[0].exp()).collect();
                confidence_weights(&fg, l)
            }
            RegLossKind::GiouL1 => vec![1.0; l.n_pos()],
        })
        .collect())
}

fn check_weights(weights: &[Vec<f64>], labels: &[LabelAssignment]) -> Result<()> {
    if weights.len() != labels.len() || weights.iter().zip(labels).any(|(w, l)| w.len() != l.n_pos()) {
        return Err(contract!("one guidance weight per positive is required"));
    }
    Ok(())
}

/// Classification loss with given positive weights.
pub fn pg_cls_loss_with(
    log_probs: &Tensor,
    boxes: &Tensor,
    gts: &[BBox],
    labels: &[LabelAssignment],
    w: &LossWeights,
    weights: &[Vec<f64>],
) -> Result<Tensor> {
    let (b, n) = check_batch(log_probs, boxes, gts, labels)?;
    check_weights(weights, labels)?;
    let mut pos_coef = vec![0.0; b * n];
    let mut neg_coef = vec![0.0; b * n];
    for s in 0..b {
        let l = &labels[s];
        let denom = l.n_pos() as f64 + w.beta * l.n_neg() as f64;
        for (&i, wi) in l.positives.iter().zip(&weights[s]) {
            pos_coef[s * n + i] = wi / denom / b as f64;
        }
        for &i in &l.negatives {
            neg_coef[s * n + i] = w.beta / denom / b as f64;
        }
    }
    let lp_fg = log_probs.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?;
    let lp_bg = log_probs.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
    let pos = (coef_tensor(pos_coef, b, n, log_probs)? * lp_fg)?.sum_all()?;
    let neg = (coef_tensor(neg_coef, b, n, log_probs)? * lp_bg)?.sum_all()?;
    Ok((pos + neg)?.neg()?)
}

/// Classification loss averaged over the batch.
///
/// `log_probs` is `(B, n, 2)` log-probabilities with foreground at index 0.
pub fn pg_cls_loss(
    log_probs: &Tensor,
    boxes: &Tensor,
    gts: &[BBox],
    labels: &[LabelAssignment],
    w: &LossWeights,
    kind: ClsLossKind,
) -> Result<Tensor> {
    let weights = cls_guidance(log_probs, boxes, gts, labels, kind)?;
    pg_cls_loss_with(log_probs, boxes, gts, labels, w, &weights)
}

fn gt_tensor(gts: &[BBox], like: &Tensor) -> Result<Tensor> {
    let flat: Vec<f64> = gts.iter().flat_map(|g| g.as_array()).collect();
    Ok(Tensor::from_vec(flat, (gts.len(), 1, 4), like.device())?.to_dtype(like.dtype())?)
}

/// Element-wise `lambda_giou * (1 - GIoU) + lambda_l1 * |b - g|_1`, `(B, n)`.
pub fn box_loss_terms(boxes: &Tensor, gts: &[BBox], w: &LossWeights) -> Result<Tensor> {
    let g = gt_tensor(gts, boxes)?;
    let giou = giou_loss_tensor(boxes, &g)?;
    let l1 = boxes.broadcast_sub(&g)?.abs()?.sum(D::Minus1)?;
    Ok(((giou * w.lambda_giou)? + (l1 * w.lambda_l1)?)?)
}

/// Regression loss with given positive weights.
pub fn cg_reg_loss_with(
    log_probs: &Tensor,
    boxes: &Tensor,
    gts: &[BBox],
    labels: &[LabelAssignment],
    w: &LossWeights,
    weights: &[Vec<f64>],
) -> Result<Tensor> {
    let (b, n) = check_batch(log_probs, boxes, gts, labels)?;
    check_weights(weights, labels)?;
    let mut coef = vec![0.0; b * n];
    for s in 0..b {
        let l = &labels[s];
        for (&i, wi) in l.positives.iter().zip(&weights[s]) {
            coef[s * n + i] = wi / l.n_pos() as f64 / b as f64;
        }
    }
    let terms = box_loss_terms(boxes, gts, w)?;
    Ok((coef_tensor(coef, b, n, boxes)? * terms)?.sum_all()?)
}

/// Regression loss averaged over the batch. Only positives contribute.
pub fn cg_reg_loss(
    log_probs: &Tensor,
    boxes: &Tensor,
    gts: &[BBox],
    labels: &[LabelAssignment],
    w: &LossWeights,
    kind: RegLossKind,
) -> Result<Tensor> {
    let weights = reg_guidance(log_probs, boxes, gts, labels, kind)?;
    cg_reg_loss_with(log_probs, boxes, gts, labels, w, &weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossKinds {
    pub cls: ClsLossKind,
    pub reg: RegLossKind,
}

impl Default for LossKinds {
    fn default() -> Self {
        Self {
            cls: ClsLossKind::PrecisionGuided,
            reg: RegLossKind::ConfidenceGuided,
        }
    }
}

/// Loss section of a run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub cls: ClsLossKind,
    pub reg: RegLossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let k = LossKinds::default();
        Self {
            beta: w.beta,
            lambda_giou: w.lambda_giou,
            lambda_l1: w.lambda_l1,
            cls: k.cls,
            reg: k.reg,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            lambda_giou: self.lambda_giou,
            lambda_l1: self.lambda_l1,
        }
    }

    pub fn kinds(&self) -> LossKinds {
        LossKinds {
            cls: self.cls,
            reg: self.reg,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub cls: f64,
    pub reg: f64,
}

/// Unit-weight sum of the classification and regression losses, from
/// `(B, n, 2)` logits and `(B, n, 4)` boxes.
pub fn total_loss(
    logits: &Tensor,
    boxes: &Tensor,
    gts: &[BBox],
    labels: &[LabelAssignment],
    w: &LossWeights,
    kinds: LossKinds,
) -> Result<LossBreakdown> {
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let cls = pg_cls_loss(&log_probs, boxes, gts, labels, w, kinds.cls)?;
    let reg = cg_reg_loss(&log_probs, boxes, gts, labels, w, kinds.reg)?;
    let cls_v = cls.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let reg_v = reg.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(LossBreakdown {
        total: (cls + reg)?,
        cls: cls_v,
        reg: reg_v,
    })
}

fn single_sample(probs: &[[f64; 2]], boxes: &[[f64; 4]]) -> Result<(Tensor, Tensor)> {
    if probs.len() != boxes.len() {
        return Err(contract!("{} score pairs for {} boxes", probs.len(), boxes.len()));
    }
    for p in probs {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) || ((p[0] + p[1]) - 1.0).abs() > 1e-9 {
            return Err(contract!("invalid probability pair {p:?}"));
        }
    }
    let n = probs.len();
    let lp: Vec<f64> = probs.iter().flat_map(|p| [p[0].ln(), p[1].ln()]).collect();
    let bx: Vec<f64> = boxes.iter().flatten().copied().collect();
    Ok((
        Tensor::from_vec(lp, (1, n, 2), &Device::Cpu)?,
        Tensor::from_vec(bx, (1, n, 4), &Device::Cpu)?,
    ))
}

/// Single-sample classification loss from probability pairs.
pub fn pg_cls_loss_probs(
    probs: &[[f64; 2]],
    boxes: &[[f64; 4]],
    gt: &BBox,
    labels: &LabelAssignment,
    w: &LossWeights,
    kind: ClsLossKind,
) -> Result<f64> {
    let (lp, bx) = single_sample(probs, boxes)?;
    let l = pg_cls_loss(&lp, &bx, std::slice::from_ref(gt), std::slice::from_ref(labels), w, kind)?;
    Ok(l.to_scalar::<f64>()?)
}

/// Single-sample regression loss from probability pairs.
pub fn cg_reg_loss_probs(
    probs: &[[f64; 2]],
    boxes: &[[f64; 4]],
    gt: &BBox,
    labels: &LabelAssignment,
    w: &LossWeights,
    kind: RegLossKind,
) -> Result<f64> {
    let (lp, bx) = single_sample(probs, boxes)?;
    let l = cg_reg_loss(&lp, &bx, std::slice::from_ref(gt), std::slice::from_ref(labels), w, kind)?;
    Ok(l.to_scalar::<f64>()?)
}

/// Unit box in the normalized search frame, handy for tests and tooling.
pub fn unit_box() -> BBox {
    BBox::from_corners(0.0, 0.0, 1.0, 1.0, BoxFrame::NormalizedSearch)
}
