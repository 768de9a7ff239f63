//! Supervised trainer for the micro detector.
//!
//! Classic single-scale YOLO recipe: squared error on the raw offsets
//! (t_x, t_y, t_w, t_h) and on objectness for the responsible anchor,
//! cross-entropy on the class logits, and a down-weighted objectness
//! penalty on every non-responsible anchor. Plain SGD, one scene per step,
//! seeded shuffling — fully reproducible.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::scenes::Scene;
use crate::{Error, Result};

use super::{DetectorModel, WeightMode};

const LAMBDA_COORD: f64 = 5.0;
const LAMBDA_NOOBJ: f64 = 0.5;
/// Global gradient-norm clip; plain SGD on a fresh detector sees a few
/// violent early steps otherwise.
const GRAD_CLIP_NORM: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 40, learning_rate: 0.05, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean per-scene loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

struct TrainGraph {
    tape: Tape,
    loss: NodeId,
    weight_nodes: Vec<(NodeId, NodeId)>,
    num_anchors: usize,
}

fn build_train_graph(model: &DetectorModel) -> Result<TrainGraph> {
    let side = model.input_side();
    let cells = model.grid.num_cells();
    let k = model.num_classes;
    let mut tape = Tape::new();
    let image = tape.input("image", vec![3, side, side]);
    let (raw, weight_nodes) =
        model.append_backbone(&mut tape, image, &WeightMode::Inputs { prefix: "w/".into() })?;
    let slices = model.append_head_slices(&mut tape, raw)?;

    let one = tape.constant_scalar(1.0);
    let log_guard = tape.constant_scalar(1e-12);
    let inv_resp = tape.input("inv_resp", vec![1]);
    let inv_noobj = tape.input("inv_noobj", vec![1]);

    let mut coord_terms = Vec::new();
    let mut obj_pos_terms = Vec::new();
    let mut obj_neg_terms = Vec::new();
    let mut class_terms = Vec::new();
    for (a, s) in slices.iter().enumerate() {
        let resp = tape.input(format!("resp{a}"), vec![cells]);
        let txt = tape.input(format!("txt{a}"), vec![cells]);
        let tyt = tape.input(format!("tyt{a}"), vec![cells]);
        let twt = tape.input(format!("twt{a}"), vec![cells]);
        let tht = tape.input(format!("tht{a}"), vec![cells]);
        let onehot = tape.input(format!("cls{a}"), vec![k, cells]);

        let mut sq = |pred: NodeId, tgt: NodeId| -> Result<NodeId> {
            let d = tape.sub(pred, tgt)?;
            Ok(tape.square(d))
        };
        let ex = sq(s.tx, txt)?;
        let ey = sq(s.ty, tyt)?;
        let ew = sq(s.tw, twt)?;
        let eh = sq(s.th, tht)?;
        let exy = tape.add(ex, ey)?;
        let ewh = tape.add(ew, eh)?;
        let coord = tape.add(exy, ewh)?;
        let coord_sel = tape.clip_by_mask(coord, resp)?;
        coord_terms.push(tape.sum(coord_sel));

        let obj = tape.sigmoid(s.t0);
        let miss = tape.sub(obj, one)?;
        let miss_sq = tape.square(miss);
        let pos = tape.clip_by_mask(miss_sq, resp)?;
        obj_pos_terms.push(tape.sum(pos));

        let noobj_mask = tape.sub(one, resp)?;
        let obj_sq = tape.square(obj);
        let neg = tape.clip_by_mask(obj_sq, noobj_mask)?;
        obj_neg_terms.push(tape.sum(neg));

        let probs = tape.softmax(s.logits, 0)?;
        let guarded = tape.add(probs, log_guard)?;
        let logp = tape.log(guarded);
        let picked = tape.mul(onehot, logp)?;
        let per_cell = tape.sum_axis(picked, 0)?;
        let selected = tape.clip_by_mask(per_cell, resp)?;
        class_terms.push(tape.sum(selected));
    }

    let sum_nodes = |tape: &mut Tape, nodes: &[NodeId]| -> Result<NodeId> {
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = tape.add(acc, n)?;
        }
        Ok(acc)
    };
    let coord = sum_nodes(&mut tape, &coord_terms)?;
    let obj_pos = sum_nodes(&mut tape, &obj_pos_terms)?;
    let obj_neg = sum_nodes(&mut tape, &obj_neg_terms)?;
    let class = sum_nodes(&mut tape, &class_terms)?;

    let l_coord = tape.constant_scalar(LAMBDA_COORD);
    let coord_w = tape.mul(coord, l_coord)?;
    let pos_part = tape.add(coord_w, obj_pos)?;
    let neg_class = tape.constant_scalar(-1.0);
    let ce = tape.mul(class, neg_class)?;
    let resp_part = tape.add(pos_part, ce)?;
    let resp_scaled = tape.mul(resp_part, inv_resp)?;

    let l_noobj = tape.constant_scalar(LAMBDA_NOOBJ);
    let neg_w = tape.mul(obj_neg, l_noobj)?;
    let neg_scaled = tape.mul(neg_w, inv_noobj)?;

    let loss = tape.add(resp_scaled, neg_scaled)?;
    let num_anchors = model.grid.num_anchors();
    Ok(TrainGraph { tape, loss, weight_nodes, num_anchors })
}

/// Per-scene regression targets, computed once before the epochs run.
struct SceneTargets {
    resp: Vec<Tensor>,
    txt: Vec<Tensor>,
    tyt: Vec<Tensor>,
    twt: Vec<Tensor>,
    tht: Vec<Tensor>,
    cls: Vec<Tensor>,
    n_resp: usize,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

/// IoU of two co-centered boxes of the given sizes (anchor matching).
fn wh_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

fn assign_targets(model: &DetectorModel, scene: &Scene) -> SceneTargets {
    let gs = model.grid.grid_s;
    let cells = model.grid.num_cells();
    let na = model.grid.num_anchors();
    let k = model.num_classes;
    let stride = model.grid.stride as f64;

    let mut resp = vec![vec![0.0; cells]; na];
    let mut txt = vec![vec![0.0; cells]; na];
    let mut tyt = vec![vec![0.0; cells]; na];
    let mut twt = vec![vec![0.0; cells]; na];
    let mut tht = vec![vec![0.0; cells]; na];
    let mut cls = vec![vec![0.0; k * cells]; na];
    let mut n_resp = 0usize;

    for gt in &scene.truths {
        let cell_x = ((gt.cx / stride) as usize).min(gs - 1);
        let cell_y = ((gt.cy / stride) as usize).min(gs - 1);
        let cell = cell_y * gs + cell_x;
        // best-overlap anchor first, the other as fallback if occupied
        let mut order: Vec<usize> = (0..na).collect();
        order.sort_by(|&a, &b| {
            let ia = wh_iou(gt.w, gt.h, model.grid.anchors[a].0, model.grid.anchors[a].1);
            let ib = wh_iou(gt.w, gt.h, model.grid.anchors[b].0, model.grid.anchors[b].1);
            ib.partial_cmp(&ia).unwrap()
        });
        let Some(&a) = order.iter().find(|&&a| resp[a][cell] == 0.0) else {
            continue; // both anchors of this cell taken; skip the object
        };
        resp[a][cell] = 1.0;
        txt[a][cell] = logit(gt.cx / stride - cell_x as f64);
        tyt[a][cell] = logit(gt.cy / stride - cell_y as f64);
        twt[a][cell] = (gt.w / model.grid.anchors[a].0).ln();
        tht[a][cell] = (gt.h / model.grid.anchors[a].1).ln();
        cls[a][gt.class_id * cells + cell] = 1.0;
        n_resp += 1;
    }

    let wrap = |v: Vec<Vec<f64>>| v.into_iter().map(|d| Tensor::new(vec![cells], d)).collect();
    SceneTargets {
        resp: wrap(resp),
        txt: wrap(txt),
        tyt: wrap(tyt),
        twt: wrap(twt),
        tht: wrap(tht),
        cls: cls.into_iter().map(|d| Tensor::new(vec![k, cells], d)).collect(),
        n_resp,
    }
}

/// Train a copy of `model` on `scenes`. Seeded and reproducible; returns the
/// trained model plus the per-epoch loss trace.
pub fn train_micro(
    model: &DetectorModel,
    scenes: &[Scene],
    cfg: &TrainConfig,
) -> Result<(DetectorModel, TrainReport)> {
    if scenes.is_empty() {
        return Err(Error::invalid("no training scenes"));
    }
    for (i, s) in scenes.iter().enumerate() {
        if s.image.height() != model.input_side() || s.image.width() != model.input_side() {
            return Err(Error::invalid(format!(
                "scene {i} is {}x{}, model expects {}",
                s.image.width(),
                s.image.height(),
                model.input_side()
            )));
        }
    }

    let mut trained = model.clone();
    if cfg.epochs == 0 {
        return Ok((trained, TrainReport { epoch_losses: vec![], final_loss: f64::NAN }));
    }

    let graph = build_train_graph(&trained)?;
    let targets: Vec<SceneTargets> = scenes.iter().map(|s| assign_targets(&trained, s)).collect();
    let total_boxes = trained.num_boxes() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, &si) in order.iter().enumerate() {
            let scene = &scenes[si];
            let t = &targets[si];
            let mut ev = graph.tape.evaluation();
            ev.bind("image", scene.image.tensor().clone())?;
            for (i, w) in trained.weights.iter().enumerate() {
                ev.bind(&format!("w/k{i}"), w.kernel.clone())?;
                ev.bind(&format!("w/b{i}"), w.bias.clone())?;
            }
            let inv_resp = if t.n_resp > 0 { 1.0 / t.n_resp as f64 } else { 0.0 };
            let n_noobj = total_boxes - t.n_resp as f64;
            let inv_noobj = if n_noobj > 0.0 { 1.0 / n_noobj } else { 0.0 };
            ev.bind("inv_resp", Tensor::scalar(inv_resp))?;
            ev.bind("inv_noobj", Tensor::scalar(inv_noobj))?;
            for a in 0..graph.num_anchors {
                ev.bind(&format!("resp{a}"), t.resp[a].clone())?;
                ev.bind(&format!("txt{a}"), t.txt[a].clone())?;
                ev.bind(&format!("tyt{a}"), t.tyt[a].clone())?;
                ev.bind(&format!("twt{a}"), t.twt[a].clone())?;
                ev.bind(&format!("tht{a}"), t.tht[a].clone())?;
                ev.bind(&format!("cls{a}"), t.cls[a].clone())?;
            }
            ev.run()?;
            let loss = ev.value(graph.loss).item();
            if !loss.is_finite() {
                return Err(Error::TrainDiverged { epoch, step });
            }
            epoch_loss += loss;

            let wanted: Vec<NodeId> = graph
                .weight_nodes
                .iter()
                .flat_map(|&(k, b)| [k, b])
                .collect();
            let grads = ev.backward(graph.loss, &wanted)?;
            let mut sq_norm = 0.0;
            for &n in &wanted {
                if let Some(g) = grads.get(n) {
                    sq_norm += g.data().iter().map(|v| v * v).sum::<f64>();
                }
            }
            let norm = sq_norm.sqrt();
            let step = if norm > GRAD_CLIP_NORM {
                cfg.learning_rate * GRAD_CLIP_NORM / norm
            } else {
                cfg.learning_rate
            };
            for (i, &(kn, bn)) in graph.weight_nodes.iter().enumerate() {
                if let Some(gk) = grads.get(kn) {
                    let w = trained.weights[i].kernel.data_mut();
                    for (wi, gi) in w.iter_mut().zip(gk.data()) {
                        *wi -= step * gi;
                    }
                }
                if let Some(gb) = grads.get(bn) {
                    let b = trained.weights[i].bias.data_mut();
                    for (bi, gi) in b.iter_mut().zip(gb.data()) {
                        *bi -= step * gi;
                    }
                }
            }
        }
        epoch_losses.push(epoch_loss / scenes.len() as f64);
    }

    let final_loss = *epoch_losses.last().unwrap();
    Ok((trained, TrainReport { epoch_losses, final_loss }))
}
