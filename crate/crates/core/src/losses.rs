//! The three NMS-breaking adversarial losses and the ensemble expectation.
//!
//! All three act on the raw decoded boxes of the detector head — before any
//! objectness filtering, because the attack must raise the confidence of
//! currently-suppressed boxes and therefore needs their gradients:
//!
//! * `f1` — drive every targeted box's confidence to 1 and minimise the
//!   expected pairwise IoU (quadratic in the box count);
//! * `f2` — confidence term, squared normalised box area, plus the expected
//!   inverse squared center distance (quadratic);
//! * `f3` — confidence term plus squared normalised box area only (linear;
//!   the cheap approximation that simply shrinks boxes until nothing
//!   overlaps).
//!
//! Category selection (`argmax p_i ∈ Λ`) is non-differentiable, so the masks
//! enter each evaluation as constant selector inputs, recomputed from the
//! current forward pass on every optimizer iteration. Expectations over a
//! category exclude self-pairs: IoU_ii = 1 and d_ii = 0 would otherwise
//! dominate or diverge.

use crate::autodiff::{Evaluation, NodeId, Tape, Tensor};
use crate::detector::{DecodeNodes, DetectorModel, WeightMode};
use crate::{Error, Result};

/// Guard added to pairwise squared center distances (px²).
pub const DISTANCE_GUARD_EPS: f64 = 1e-6;
/// Guard added to IoU denominators so zero-area pairs stay finite.
const IOU_DENOM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    F1,
    F2,
    F3,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f1" => Ok(LossKind::F1),
            "f2" => Ok(LossKind::F2),
            "f3" => Ok(LossKind::F3),
            other => Err(format!("unknown loss '{other}' (expected f1, f2 or f3)")),
        }
    }
}

/// The attacked category set Λ: a non-empty set of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetSet {
    classes: Vec<usize>,
}

impl TargetSet {
    /// Every category of a `num_classes` detector.
    pub fn all(num_classes: usize) -> Self {
        TargetSet { classes: (0..num_classes).collect() }
    }

    pub fn new(mut classes: Vec<usize>, num_classes: usize) -> Result<Self> {
        classes.sort_unstable();
        classes.dedup();
        if classes.is_empty() {
            return Err(Error::invalid("target set must not be empty"));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::invalid(format!(
                "target class {bad} out of range (model has {num_classes} classes)"
            )));
        }
        Ok(TargetSet { classes })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// A scalar loss with its term breakdown.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: f64,
    /// Mean squared confidence shortfall, `(b0·max p − 1)²`.
    pub confidence_term: f64,
    /// Pairwise IoU expectation (f1) or squared normalised area (f2, f3).
    pub geometry_term: f64,
    /// Inverse squared center distance expectation (f2 only).
    pub distance_term: f64,
    /// Categories in Λ with no selected box this evaluation.
    pub empty_categories: Vec<usize>,
    /// True when some selected same-category pair sat on the distance guard.
    pub distance_guard_active: bool,
}

/// Handles to the differentiable box tensors a loss consumes, each `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct BoxNodes {
    pub bx: NodeId,
    pub by: NodeId,
    pub bw: NodeId,
    pub bh: NodeId,
    pub confidence: NodeId,
    pub n_boxes: usize,
}

impl From<&DecodeNodes> for BoxNodes {
    fn from(d: &DecodeNodes) -> Self {
        BoxNodes {
            bx: d.bx,
            by: d.by,
            bw: d.bw,
            bh: d.bh,
            confidence: d.confidence,
            n_boxes: d.n_boxes,
        }
    }
}

/// Names of the per-category selector inputs of one loss subgraph.
#[derive(Clone, Debug)]
pub struct MaskInputNames {
    pub class_id: usize,
    /// `[n]` 0/1 selector over boxes.
    pub mask: String,
    /// `[1]`: `1/count` or 0 when the category is empty.
    pub inv_count: String,
    /// `[1]`: `1/(count-1)` or 0 when fewer than two boxes (pairwise losses).
    pub inv_pairs: Option<String>,
}

/// Node handles of one appended loss subgraph.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub confidence_term: NodeId,
    pub geometry_term: NodeId,
    pub distance_term: Option<NodeId>,
    pub mask_inputs: Vec<MaskInputNames>,
    pub kind: LossKind,
}

/// Append the loss subgraph of `kind` over the given box tensors.
///
/// `prefix` namespaces the selector inputs so several models can share one
/// tape. Image dimensions normalise the area term.
pub fn append_loss(
    tape: &mut Tape,
    boxes: &BoxNodes,
    kind: LossKind,
    targets: &TargetSet,
    img_w: f64,
    img_h: f64,
    prefix: &str,
) -> Result<LossNodes> {
    let n = boxes.n_boxes;
    let one = tape.constant_scalar(1.0);

    // (b0·max p − 1)² per box
    let conf_miss = tape.sub(boxes.confidence, one)?;
    let conf_sq = tape.square(conf_miss);

    // (b_w b_h / (W H))² per box, for f2/f3
    let dims_sq = if kind != LossKind::F1 {
        let area = tape.mul(boxes.bw, boxes.bh)?;
        let wh = tape.constant_scalar(img_w * img_h);
        let frac = tape.div(area, wh)?;
        Some(tape.square(frac))
    } else {
        None
    };

    // pairwise matrices with the diagonal masked out
    let off_diag = (kind != LossKind::F3).then(|| {
        let mut m = Tensor::filled(vec![n, n], 1.0);
        for i in 0..n {
            m.data_mut()[i * n + i] = 0.0;
        }
        tape.constant(m)
    });

    let pair_matrix = match kind {
        LossKind::F1 => Some(append_pairwise_iou(tape, boxes, off_diag.unwrap())?),
        LossKind::F2 => Some(append_pairwise_inv_dist(tape, boxes, off_diag.unwrap())?),
        LossKind::F3 => None,
    };

    let mut mask_inputs = Vec::new();
    let mut conf_parts = Vec::new();
    let mut geom_parts = Vec::new();
    let mut dist_parts = Vec::new();
    for &class in targets.classes() {
        let mask_name = format!("{prefix}mask{class}");
        let invcnt_name = format!("{prefix}invcnt{class}");
        let mask = tape.input(&mask_name, vec![n]);
        let inv_count = tape.input(&invcnt_name, vec![1]);

        let conf_sel = tape.clip_by_mask(conf_sq, mask)?;
        let conf_sum = tape.sum(conf_sel);
        conf_parts.push(tape.mul(conf_sum, inv_count)?);

        if let Some(dims) = dims_sq {
            let sel = tape.clip_by_mask(dims, mask)?;
            let s = tape.sum(sel);
            geom_parts.push(tape.mul(s, inv_count)?);
        }

        let inv_pairs_name = pair_matrix.map(|pm| {
            let name = format!("{prefix}invpair{class}");
            let inv_pairs = tape.input(&name, vec![1]);
            // E_{j≠i} over the category: column-mask, row-sum, normalise
            let mask_row = tape.reshape(mask, vec![1, n]).expect("mask reshape");
            let col_masked = tape.clip_by_mask(pm, mask_row).expect("column mask");
            let row_sum = tape.sum_axis(col_masked, 1).expect("row sum");
            let per_i = tape.mul(row_sum, inv_pairs).expect("pair normalise");
            let sel = tape.clip_by_mask(per_i, mask).expect("row select");
            let total = tape.sum(sel);
            let contrib = tape.mul(total, inv_count).expect("count normalise");
            match kind {
                LossKind::F1 => geom_parts.push(contrib),
                _ => dist_parts.push(contrib),
            }
            name
        });

        mask_inputs.push(MaskInputNames {
            class_id: class,
            mask: mask_name,
            inv_count: invcnt_name,
            inv_pairs: inv_pairs_name,
        });
    }

    let inv_targets = tape.constant_scalar(1.0 / targets.len() as f64);
    let mut reduce = |parts: &[NodeId]| -> Result<NodeId> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.add(acc, p)?;
        }
        Ok(tape.mul(acc, inv_targets)?)
    };

    let confidence_term = reduce(&conf_parts)?;
    let geometry_term = reduce(&geom_parts)?;
    let distance_term = if dist_parts.is_empty() { None } else { Some(reduce(&dist_parts)?) };

    let mut total = tape.add(confidence_term, geometry_term)?;
    if let Some(d) = distance_term {
        total = tape.add(total, d)?;
    }

    Ok(LossNodes { total, confidence_term, geometry_term, distance_term, mask_inputs, kind })
}

/// `[n,n]` differentiable IoU matrix with zeroed diagonal. Intersections are
/// clamped at zero through `relu`, so the subgradient at the touching point
/// is zero.
fn append_pairwise_iou(tape: &mut Tape, boxes: &BoxNodes, off_diag: NodeId) -> Result<NodeId> {
    let n = boxes.n_boxes;
    let half = tape.constant_scalar(0.5);

    let mut axis = |center: NodeId, size: NodeId| -> Result<NodeId> {
        let hs = tape.mul(size, half)?;
        let lo = tape.sub(center, hs)?;
        let hi = tape.add(center, hs)?;
        let lo_i = tape.reshape(lo, vec![n, 1])?;
        let lo_j = tape.reshape(lo, vec![1, n])?;
        let hi_i = tape.reshape(hi, vec![n, 1])?;
        let hi_j = tape.reshape(hi, vec![1, n])?;
        let lo_max = tape.maximum(lo_i, lo_j)?;
        let hi_min = tape.minimum(hi_i, hi_j)?;
        let span = tape.sub(hi_min, lo_max)?;
        Ok(tape.relu(span))
    };
    let iw = axis(boxes.bx, boxes.bw)?;
    let ih = axis(boxes.by, boxes.bh)?;
    let inter = tape.mul(iw, ih)?;

    let area = tape.mul(boxes.bw, boxes.bh)?;
    let area_i = tape.reshape(area, vec![n, 1])?;
    let area_j = tape.reshape(area, vec![1, n])?;
    let area_sum = tape.add(area_i, area_j)?;
    let union = tape.sub(area_sum, inter)?;
    let eps = tape.constant_scalar(IOU_DENOM_EPS);
    let denom = tape.add(union, eps)?;
    let iou = tape.div(inter, denom)?;
    Ok(tape.clip_by_mask(iou, off_diag)?)
}

/// `[n,n]` matrix of `1 / (d² + ε)` over box centers, zeroed diagonal.
fn append_pairwise_inv_dist(tape: &mut Tape, boxes: &BoxNodes, off_diag: NodeId) -> Result<NodeId> {
    let n = boxes.n_boxes;
    let mut axis_sq = |center: NodeId| -> Result<NodeId> {
        let ci = tape.reshape(center, vec![n, 1])?;
        let cj = tape.reshape(center, vec![1, n])?;
        let d = tape.sub(ci, cj)?;
        Ok(tape.square(d))
    };
    let dx2 = axis_sq(boxes.bx)?;
    let dy2 = axis_sq(boxes.by)?;
    let d2 = tape.add(dx2, dy2)?;
    let eps = tape.constant_scalar(DISTANCE_GUARD_EPS);
    let d2e = tape.add(d2, eps)?;
    let one = tape.constant_scalar(1.0);
    let inv = tape.div(one, d2e)?;
    Ok(tape.clip_by_mask(inv, off_diag)?)
}

// ── category selection masks ────────────────────────────────────────────

/// The constant selector for one category of one evaluation.
#[derive(Clone, Debug)]
pub struct CategoryMask {
    pub class_id: usize,
    pub count: usize,
    pub mask: Tensor,
    pub inv_count: f64,
    pub inv_pairs: f64,
}

/// Build per-category masks from a `[K, n]` class-probability tensor:
/// box `i` is selected for category λ when `argmax_k p[k, i] = λ`.
pub fn category_masks(class_probs: &Tensor, targets: &TargetSet) -> Vec<CategoryMask> {
    let k = class_probs.shape()[0];
    let n = class_probs.shape()[1];
    let data = class_probs.data();
    let mut argmax = vec![0usize; n];
    for i in 0..n {
        let mut best = 0;
        let mut bv = f64::NEG_INFINITY;
        for c in 0..k {
            let v = data[c * n + i];
            if v > bv {
                bv = v;
                best = c;
            }
        }
        argmax[i] = best;
    }
    targets
        .classes()
        .iter()
        .map(|&class| {
            let mut mask = vec![0.0; n];
            let mut count = 0usize;
            for i in 0..n {
                if argmax[i] == class {
                    mask[i] = 1.0;
                    count += 1;
                }
            }
            CategoryMask {
                class_id: class,
                count,
                mask: Tensor::new(vec![n], mask),
                inv_count: if count > 0 { 1.0 / count as f64 } else { 0.0 },
                inv_pairs: if count > 1 { 1.0 / (count - 1) as f64 } else { 0.0 },
            }
        })
        .collect()
}

/// Bind one category-mask set onto an evaluation.
pub fn bind_masks(
    ev: &mut Evaluation<'_>,
    nodes: &LossNodes,
    masks: &[CategoryMask],
) -> Result<()> {
    for (names, m) in nodes.mask_inputs.iter().zip(masks) {
        debug_assert_eq!(names.class_id, m.class_id);
        ev.bind(&names.mask, m.mask.clone())?;
        ev.bind(&names.inv_count, Tensor::scalar(m.inv_count))?;
        if let Some(p) = &names.inv_pairs {
            ev.bind(p, Tensor::scalar(m.inv_pairs))?;
        }
    }
    Ok(())
}

/// Read a [`LossValue`] out of a completed evaluation.
pub fn read_loss(
    ev: &Evaluation<'_>,
    nodes: &LossNodes,
    masks: &[CategoryMask],
    guard_active: bool,
) -> LossValue {
    LossValue {
        total: ev.value(nodes.total).item(),
        confidence_term: ev.value(nodes.confidence_term).item(),
        geometry_term: ev.value(nodes.geometry_term).item(),
        distance_term: nodes.distance_term.map(|d| ev.value(d).item()).unwrap_or(0.0),
        empty_categories: masks.iter().filter(|m| m.count == 0).map(|m| m.class_id).collect(),
        distance_guard_active: guard_active,
    }
}

/// Arithmetic mean of per-model losses (the ensemble expectation over a
/// model set applied to already-computed values).
pub fn ensemble_mean(losses: &[f64]) -> f64 {
    assert!(!losses.is_empty(), "ensemble of zero models");
    losses.iter().sum::<f64>() / losses.len() as f64
}

// ── whole-pipeline evaluator: image -> ensemble loss ────────────────────

/// One model's subgraph on the shared tape.
pub struct ModelLossGraph {
    pub decode: DecodeNodes,
    pub loss: LossNodes,
}

/// Ensemble loss value with the per-model breakdown.
#[derive(Clone, Debug)]
pub struct EnsembleLossValue {
    pub total: f64,
    pub per_model: Vec<LossValue>,
}

/// A frozen tape computing the ensemble adversarial loss of an image:
/// `image -> backbone_m -> decode_m -> loss_m -> mean_m`.
///
/// Model weights are baked in as constants; the image is the only
/// differentiable input. Selection masks are recomputed from the forward
/// pass on every call (or pinned, for finite-difference oracles).
pub struct LossEvaluator {
    tape: Tape,
    models: Vec<ModelLossGraph>,
    ensemble: NodeId,
    targets: TargetSet,
    watermark: NodeId,
    side: usize,
}

impl LossEvaluator {
    pub fn new(models: &[&DetectorModel], kind: LossKind, targets: &TargetSet) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::invalid("need at least one model"));
        }
        let side = models[0].input_side();
        let classes = models[0].num_classes;
        for m in models {
            if m.input_side() != side || m.num_classes != classes {
                return Err(Error::invalid(
                    "ensemble members must share input size and class count",
                ));
            }
        }
        for &c in targets.classes() {
            if c >= classes {
                return Err(Error::invalid(format!("target class {c} out of range")));
            }
        }

        let mut tape = Tape::new();
        let image = tape.input("image", vec![3, side, side]);
        // all decode subgraphs precede every selector input, so one prefix
        // run exposes every model's class probabilities before masks bind
        let mut decodes = Vec::with_capacity(models.len());
        for model in models {
            let (raw, _) = model.append_backbone(&mut tape, image, &WeightMode::Baked)?;
            decodes.push(model.append_decode(&mut tape, raw)?);
        }
        let mut graphs = Vec::with_capacity(models.len());
        for (idx, decode) in decodes.into_iter().enumerate() {
            let loss = append_loss(
                &mut tape,
                &BoxNodes::from(&decode),
                kind,
                targets,
                side as f64,
                side as f64,
                &format!("m{idx}/"),
            )?;
            graphs.push(ModelLossGraph { decode, loss });
        }
        let totals: Vec<NodeId> = graphs.iter().map(|g| g.loss.total).collect();
        let mut acc = totals[0];
        for &t in &totals[1..] {
            acc = tape.add(acc, t)?;
        }
        let inv = tape.constant_scalar(1.0 / models.len() as f64);
        let ensemble = tape.mul(acc, inv)?;
        let watermark = graphs
            .iter()
            .map(|g| g.decode.watermark())
            .max()
            .expect("at least one model");

        Ok(LossEvaluator { tape, models: graphs, ensemble, targets: targets.clone(), watermark, side })
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn ensemble_node(&self) -> NodeId {
        self.ensemble
    }

    pub fn model_graphs(&self) -> &[ModelLossGraph] {
        &self.models
    }

    pub fn input_side(&self) -> usize {
        self.side
    }

    pub fn targets(&self) -> &TargetSet {
        &self.targets
    }

    /// Run the decode prefix and derive fresh per-model category masks.
    pub fn masks_for(&self, image: &Tensor) -> Result<Vec<Vec<CategoryMask>>> {
        let mut ev = self.tape.evaluation();
        ev.bind("image", image.clone())?;
        ev.run_until(self.watermark)?;
        Ok(self.masks_from(&ev))
    }

    fn masks_from(&self, ev: &Evaluation<'_>) -> Vec<Vec<CategoryMask>> {
        self.models
            .iter()
            .map(|g| category_masks(ev.value(g.decode.class_probs), &self.targets))
            .collect()
    }

    fn run(
        &self,
        image: &Tensor,
        pinned: Option<&[Vec<CategoryMask>]>,
    ) -> Result<(Evaluation<'_>, Vec<Vec<CategoryMask>>)> {
        let mut ev = self.tape.evaluation();
        ev.bind("image", image.clone())?;
        ev.run_until(self.watermark)?;
        let masks = match pinned {
            Some(m) => m.to_vec(),
            None => self.masks_from(&ev),
        };
        for (g, m) in self.models.iter().zip(&masks) {
            bind_masks(&mut ev, &g.loss, m)?;
        }
        ev.run()?;
        Ok((ev, masks))
    }

    fn collect(&self, ev: &Evaluation<'_>, masks: &[Vec<CategoryMask>]) -> EnsembleLossValue {
        let per_model = self
            .models
            .iter()
            .zip(masks)
            .map(|(g, m)| {
                let guard = g.loss.kind == LossKind::F2 && distance_guard_hit(ev, &g.decode, m);
                read_loss(ev, &g.loss, m, guard)
            })
            .collect();
        EnsembleLossValue { total: ev.value(self.ensemble).item(), per_model }
    }

    /// Ensemble loss with masks recomputed from this image.
    pub fn loss(&self, image: &Tensor) -> Result<EnsembleLossValue> {
        let (ev, masks) = self.run(image, None)?;
        Ok(self.collect(&ev, &masks))
    }

    /// Ensemble loss under pinned masks (the finite-difference oracle needs
    /// the selection to stay constant while pixels move).
    pub fn loss_fixed_masks(
        &self,
        image: &Tensor,
        masks: &[Vec<CategoryMask>],
    ) -> Result<EnsembleLossValue> {
        let (ev, masks) = self.run(image, Some(masks))?;
        Ok(self.collect(&ev, &masks))
    }

    /// Ensemble loss and its gradient w.r.t. the input pixels.
    pub fn loss_and_gradient(&self, image: &Tensor) -> Result<(EnsembleLossValue, Tensor)> {
        let (ev, masks) = self.run(image, None)?;
        let value = self.collect(&ev, &masks);
        let image_id = self.tape.input_id("image")?;
        let grad = ev.backward(self.ensemble, &[image_id])?.wrt("image")?;
        Ok((value, grad))
    }
}

/// True when any selected same-category pair of centers sits within the
/// distance guard (coincident centers made the reciprocal term saturate).
fn distance_guard_hit(ev: &Evaluation<'_>, decode: &DecodeNodes, masks: &[CategoryMask]) -> bool {
    let bx = ev.value(decode.bx).data();
    let by = ev.value(decode.by).data();
    for m in masks {
        let idx: Vec<usize> =
            (0..bx.len()).filter(|&i| m.mask.data()[i] == 1.0).collect();
        for (p, &i) in idx.iter().enumerate() {
            for &j in &idx[p + 1..] {
                let d2 = (bx[i] - bx[j]).powi(2) + (by[i] - by[j]).powi(2);
                if d2 < DISTANCE_GUARD_EPS {
                    return true;
                }
            }
        }
    }
    false
}

// ── standalone loss tapes (tests, benchmarks) ───────────────────────────

/// A loss subgraph whose box tensors are direct tape inputs named
/// `bx`, `by`, `bw`, `bh`, `conf`.
pub struct StandaloneLoss {
    pub tape: Tape,
    pub nodes: LossNodes,
    pub n_boxes: usize,
}

/// Build a loss tape over `n_boxes` free box inputs; used by unit tests and
/// the loss cost benchmark, where boxes come from thin air instead of a
/// detector.
pub fn standalone_loss_tape(
    kind: LossKind,
    n_boxes: usize,
    targets: &TargetSet,
    img_w: f64,
    img_h: f64,
) -> Result<StandaloneLoss> {
    let mut tape = Tape::new();
    let bx = tape.input("bx", vec![n_boxes]);
    let by = tape.input("by", vec![n_boxes]);
    let bw = tape.input("bw", vec![n_boxes]);
    let bh = tape.input("bh", vec![n_boxes]);
    let confidence = tape.input("conf", vec![n_boxes]);
    let boxes = BoxNodes { bx, by, bw, bh, confidence, n_boxes };
    let nodes = append_loss(&mut tape, &boxes, kind, targets, img_w, img_h, "")?;
    Ok(StandaloneLoss { tape, nodes, n_boxes })
}
