//! Metrics and the sweep harness: FP rate, all-point-interpolation mAP,
//! distortion statistics, and (γ × NMS-threshold) grids emitted as CSV.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::attack::{l0_attack, l2_attack, AttackConfig, AttackResult, Norm};
use crate::detector::{decode_image, suppress, DetectOptions, DetectorModel, NmsKind};
use crate::geometry::{iou, DetectionSet};
use crate::scenes::Scene;
use crate::{Error, Result};

pub use crate::scenes::GtBox;

/// Greedy one-to-one matching: walk detections by descending score and match
/// each to the best-IoU unmatched same-class ground-truth box at or above
/// `iou_match`. Returns one TP flag per detection (input order).
pub fn match_detections(dets: &DetectionSet, gt: &[GtBox], iou_match: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.boxes.len()).collect();
    order.sort_by(|&a, &b| {
        dets.boxes[b]
            .score
            .partial_cmp(&dets.boxes[a].score)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut gt_taken = vec![false; gt.len()];
    let mut is_tp = vec![false; dets.boxes.len()];
    for &di in &order {
        let det = &dets.boxes[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if gt_taken[gi] || g.class_id != det.class_id {
                continue;
            }
            let v = iou(det, &g.to_box());
            if v >= iou_match && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            is_tp[di] = true;
        }
    }
    is_tp
}

/// False-positive rate `N_fp / N` of one detection set.
///
/// Undefined when there are no detections: that case returns `None` and must
/// be reported as an explicit marker, never as 0 or 1.
pub fn fp_rate(dets: &DetectionSet, gt: &[GtBox], iou_match: f64) -> Option<f64> {
    if dets.is_empty() {
        return None;
    }
    let tp = match_detections(dets, gt, iou_match).iter().filter(|&&t| t).count();
    Some((dets.len() - tp) as f64 / dets.len() as f64)
}

/// All-point-interpolation average precision from ranked TP flags.
///
/// `AP = Σ (r_{n+1} − r_n) · max_{r̃ ≥ r_{n+1}} p(r̃)` over the ranked list.
pub fn average_precision_from_flags(is_tp_ranked: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let n = is_tp_ranked.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp_cum = 0usize;
    for (k, &t) in is_tp_ranked.iter().enumerate() {
        if t {
            tp_cum += 1;
        }
        precisions.push(tp_cum as f64 / (k + 1) as f64);
        recalls.push(tp_cum as f64 / total_gt as f64);
    }
    // precision envelope from the right
    let mut env = precisions.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        if recalls[k] > prev_recall {
            ap += (recalls[k] - prev_recall) * env[k];
            prev_recall = recalls[k];
        }
    }
    ap
}

/// Per-class AP of a multi-image evaluation.
#[derive(Clone, Debug)]
pub struct ClassAp {
    pub class_id: usize,
    /// `None` when the class has no ground-truth instances (excluded from
    /// the mean, logged by callers).
    pub ap: Option<f64>,
    pub num_gt: usize,
}

#[derive(Clone, Debug)]
pub struct MapReport {
    /// Mean AP over classes that have ground truth; `None` if none do.
    pub map: Option<f64>,
    pub per_class: Vec<ClassAp>,
}

/// Pascal-VOC style mAP over a set of images: detections are ranked globally
/// by score, matched greedily per image, and averaged per class.
pub fn mean_average_precision(images: &[(&DetectionSet, &[GtBox])], iou_match: f64) -> MapReport {
    let mut classes: Vec<usize> = images
        .iter()
        .flat_map(|(d, g)| {
            d.boxes.iter().map(|b| b.class_id).chain(g.iter().map(|t| t.class_id))
        })
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let mut per_class = Vec::with_capacity(classes.len());
    for &class in &classes {
        let num_gt: usize = images
            .iter()
            .map(|(_, g)| g.iter().filter(|t| t.class_id == class).count())
            .sum();
        if num_gt == 0 {
            per_class.push(ClassAp { class_id: class, ap: None, num_gt: 0 });
            continue;
        }
        // rank this class's detections across all images
        let mut ranked: Vec<(usize, usize, f64)> = Vec::new(); // (image, det, score)
        for (ii, (d, _)) in images.iter().enumerate() {
            for (di, b) in d.boxes.iter().enumerate() {
                if b.class_id == class {
                    ranked.push((ii, di, b.score));
                }
            }
        }
        ranked.sort_by(|a, b| {
            b.2.partial_cmp(&a.2).expect("finite scores").then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
        });
        // greedy matching in global rank order, one flag vector per image
        let mut taken: Vec<Vec<bool>> =
            images.iter().map(|(_, g)| vec![false; g.len()]).collect();
        let mut flags = Vec::with_capacity(ranked.len());
        for &(ii, di, _) in &ranked {
            let det = &images[ii].0.boxes[di];
            let gts = images[ii].1;
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[ii][gi] || g.class_id != class {
                    continue;
                }
                let v = iou(det, &g.to_box());
                if v >= iou_match && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                taken[ii][gi] = true;
                flags.push(true);
            } else {
                flags.push(false);
            }
        }
        per_class.push(ClassAp {
            class_id: class,
            ap: Some(average_precision_from_flags(&flags, num_gt)),
            num_gt,
        });
    }

    let scored: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    MapReport {
        map: (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64),
        per_class,
    }
}

/// Minimum / mean / maximum of one distortion series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMeanMax {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

fn min_mean_max(values: impl Iterator<Item = f64> + Clone) -> MinMeanMax {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
        n += 1;
    }
    assert!(n > 0, "distortion stats of an empty result set");
    MinMeanMax { min, mean: sum / n as f64, max }
}

#[derive(Clone, Copy, Debug)]
pub struct DistortionStats {
    pub l2: MinMeanMax,
    pub l0: MinMeanMax,
}

/// Componentwise distortion statistics over a batch of attack results.
pub fn distortion_stats(results: &[AttackResult]) -> DistortionStats {
    DistortionStats {
        l2: min_mean_max(results.iter().map(|r| r.l2_distortion)),
        l0: min_mean_max(results.iter().map(|r| r.l0_distortion as f64)),
    }
}

// ── sweep harness ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SweepConfig {
    /// γ grid; the value 0 means "benign baseline, no attack".
    pub gammas: Vec<f64>,
    /// NMS threshold grid.
    pub nts: Vec<f64>,
    /// IoU thresholds for TP matching (typically 0.5 and 0.75).
    pub iou_matches: Vec<f64>,
    pub nms_kind: NmsKind,
    pub soft_sigma: f64,
    pub soft_score_floor: f64,
    pub defence_min_area: f64,
    pub objectness_threshold: f64,
    /// Attack template; `gamma` is overridden per grid row.
    pub attack: AttackConfig,
}

/// One report cell of the sweep grid.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub gamma: f64,
    pub nt: f64,
    pub nms_kind: NmsKind,
    pub defence_min_area: f64,
    pub iou_match: f64,
    pub fp_rate: Option<f64>,
    pub map: Option<f64>,
    pub n_boxes: usize,
    pub n_gt: usize,
    pub mean_l2: f64,
    pub mean_l0: f64,
    pub status: String,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<SweepRow>,
}

fn nms_kind_name(k: NmsKind) -> &'static str {
    match k {
        NmsKind::Hard => "hard",
        NmsKind::SoftLinear => "soft-linear",
        NmsKind::SoftGaussian => "soft-gaussian",
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        writeln!(
            out,
            "gamma,nt,nms_kind,defence_min_area,iou_match,fp_rate,map,n_boxes,n_gt,mean_l2,mean_l0,status"
        )
        .unwrap();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.gamma,
                r.nt,
                nms_kind_name(r.nms_kind),
                r.defence_min_area,
                r.iou_match,
                opt(r.fp_rate),
                opt(r.map),
                r.n_boxes,
                r.n_gt,
                r.mean_l2,
                r.mean_l0,
                r.status
            )
            .unwrap();
        }
        String::from_utf8(out).unwrap()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Per-γ attack outcomes feeding many (Nt, IoU-match) cells.
struct GammaBatch {
    /// Quantized adversarial (or benign) image per scene, `None` on failure.
    images: Vec<Option<crate::img::Image>>,
    failures: usize,
    mean_l2: f64,
    mean_l0: f64,
    benign: bool,
}

fn attack_batch(scenes: &[Scene], models: &[&DetectorModel], cfg: &SweepConfig, gamma: f64) -> GammaBatch {
    if gamma == 0.0 {
        let images = scenes
            .iter()
            .map(|s| {
                let mut img = s.image.clone();
                img.quantize8();
                Some(img)
            })
            .collect();
        return GammaBatch { images, failures: 0, mean_l2: 0.0, mean_l0: 0.0, benign: true };
    }
    let results: Vec<Option<AttackResult>> = scenes
        .par_iter()
        .map(|scene| {
            let mut acfg = cfg.attack.clone();
            acfg.gamma = gamma;
            let run = match acfg.norm {
                Norm::L2 => l2_attack(&scene.image, models, &acfg),
                Norm::L0 => l0_attack(&scene.image, models, &acfg),
            };
            run.ok()
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    let ok: Vec<&AttackResult> = results.iter().flatten().collect();
    let (mean_l2, mean_l0) = if ok.is_empty() {
        (0.0, 0.0)
    } else {
        (
            ok.iter().map(|r| r.l2_distortion).sum::<f64>() / ok.len() as f64,
            ok.iter().map(|r| r.l0_distortion as f64).sum::<f64>() / ok.len() as f64,
        )
    };
    let images = results
        .into_iter()
        .map(|r| {
            r.map(|res| {
                // measure what survives 8-bit quantization, as a saved PNG would
                let mut img = res.adversarial;
                img.quantize8();
                img
            })
        })
        .collect();
    GammaBatch { images, failures, mean_l2, mean_l0, benign: false }
}

/// Run the (γ × Nt × IoU-match) grid. Attacks run once per γ (in parallel
/// across scenes) and are re-detected under every NMS threshold; per-cell
/// failures are marked in the `status` column, never fatal.
pub fn sweep(scenes: &[Scene], models: &[&DetectorModel], cfg: &SweepConfig) -> EvalReport {
    assert!(!cfg.gammas.is_empty() && !cfg.nts.is_empty() && !cfg.iou_matches.is_empty());
    let primary = models[0];
    let mut rows = Vec::new();
    for &gamma in &cfg.gammas {
        let batch = attack_batch(scenes, models, cfg, gamma);
        // decode once per image; suppression is cheap per Nt
        let decoded: Vec<Option<crate::detector::DecodedBoxes>> = batch
            .images
            .iter()
            .map(|img| img.as_ref().and_then(|i| decode_image(primary, i).ok()))
            .collect();
        for &nt in &cfg.nts {
            let opts = DetectOptions {
                objectness_threshold: cfg.objectness_threshold,
                nt,
                nms_kind: cfg.nms_kind,
                soft_sigma: cfg.soft_sigma,
                soft_score_floor: cfg.soft_score_floor,
                defence_min_area: cfg.defence_min_area,
            };
            let dets: Vec<Option<DetectionSet>> = decoded
                .iter()
                .map(|d| d.as_ref().map(|dec| suppress(dec, primary, &opts)))
                .collect();
            for &iou_match in &cfg.iou_matches {
                rows.push(make_row(scenes, &batch, &dets, cfg, gamma, nt, iou_match));
            }
        }
    }
    EvalReport { rows }
}

fn make_row(
    scenes: &[Scene],
    batch: &GammaBatch,
    dets: &[Option<DetectionSet>],
    cfg: &SweepConfig,
    gamma: f64,
    nt: f64,
    iou_match: f64,
) -> SweepRow {
    let mut fp_values = Vec::new();
    let mut pooled: Vec<(&DetectionSet, &[GtBox])> = Vec::new();
    let mut n_boxes = 0usize;
    let mut n_gt = 0usize;
    for (scene, det) in scenes.iter().zip(dets) {
        n_gt += scene.truths.len();
        if let Some(d) = det {
            n_boxes += d.len();
            if let Some(fp) = fp_rate(d, &scene.truths, iou_match) {
                fp_values.push(fp);
            }
            pooled.push((d, &scene.truths));
        }
    }
    let fp = (!fp_values.is_empty())
        .then(|| fp_values.iter().sum::<f64>() / fp_values.len() as f64);
    let map = mean_average_precision(&pooled, iou_match).map;
    let status = if batch.benign {
        "benign".to_string()
    } else if batch.failures > 0 {
        format!("attack-failed:{}/{}", batch.failures, scenes.len())
    } else if n_boxes == 0 {
        "no-detections".to_string()
    } else {
        "ok".to_string()
    };
    SweepRow {
        gamma,
        nt,
        nms_kind: cfg.nms_kind,
        defence_min_area: cfg.defence_min_area,
        iou_match,
        fp_rate: fp,
        map,
        n_boxes,
        n_gt,
        mean_l2: batch.mean_l2,
        mean_l0: batch.mean_l0,
        status,
    }
}
