//! Box representations, IoU, hard NMS, soft-NMS variants and the
//! dimension-floor defence filter.
//!
//! All operations here are pure functions over immutable inputs.

use serde::{Deserialize, Serialize};

/// An axis-aligned detection box in pixel coordinates (center + size),
/// tagged with a category and a confidence score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Box {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, class_id: usize, score: f64) -> Self {
        Box { cx, cy, w, h, class_id, score }
    }

    /// Corner form `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize, score: f64) -> Self {
        Box {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
            class_id,
            score,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Clip the box to `[0, w] x [0, h]` in corner form.
    pub fn clipped(&self, img_w: f64, img_h: f64) -> Box {
        let (x1, y1, x2, y2) = self.corners();
        let x1 = x1.clamp(0.0, img_w);
        let y1 = y1.clamp(0.0, img_h);
        let x2 = x2.clamp(0.0, img_w);
        let y2 = y2.clamp(0.0, img_h);
        Box::from_corners(x1, y1, x2, y2, self.class_id, self.score)
    }
}

/// A set of detections for one image from one model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub boxes: Vec<Box>,
    pub image_id: String,
    pub source_model: String,
}

impl DetectionSet {
    pub fn new(
        boxes: Vec<Box>,
        image_id: impl Into<String>,
        source_model: impl Into<String>,
    ) -> Self {
        DetectionSet { boxes, image_id: image_id.into(), source_model: source_model.into() }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Intersection over union of two boxes. Degenerate (zero-area) unions
/// yield 0 rather than NaN.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// The soft-NMS rescoring rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftNmsMethod {
    /// `s <- s * (1 - IoU)` for overlaps at or above the threshold.
    Linear,
    /// `s <- s * exp(-IoU^2 / sigma)` for every remaining box.
    Gaussian,
}

/// Hard NMS: per class, greedily keep the highest-scoring box and discard
/// remaining same-class boxes whose IoU with it is `>= nt`. Output preserves
/// selection order; classes never suppress each other. Score ties break on
/// the lower box index.
pub fn nms(dets: &DetectionSet, nt: f64) -> DetectionSet {
    assert!(nt > 0.0 && nt <= 1.0, "NMS threshold must be in (0, 1], got {nt}");
    let n = dets.boxes.len();
    let mut order: Vec<usize> = (0..n).collect();
    // sort once by (class, -score, index); classes then form runs
    order.sort_by(|&a, &b| {
        let (ba, bb) = (&dets.boxes[a], &dets.boxes[b]);
        ba.class_id
            .cmp(&bb.class_id)
            .then(bb.score.partial_cmp(&ba.score).expect("finite scores"))
            .then(a.cmp(&b))
    });

    let mut keep: Vec<usize> = Vec::new();
    let mut run_start = 0;
    while run_start < n {
        let class = dets.boxes[order[run_start]].class_id;
        let mut run_end = run_start;
        while run_end < n && dets.boxes[order[run_end]].class_id == class {
            run_end += 1;
        }
        let run = &order[run_start..run_end];
        let mut alive = vec![true; run.len()];
        for i in 0..run.len() {
            if !alive[i] {
                continue;
            }
            keep.push(run[i]);
            let selected = &dets.boxes[run[i]];
            for j in (i + 1)..run.len() {
                if alive[j] && iou(selected, &dets.boxes[run[j]]) >= nt {
                    alive[j] = false;
                }
            }
        }
        run_start = run_end;
    }

    DetectionSet {
        boxes: keep.iter().map(|&i| dets.boxes[i]).collect(),
        image_id: dets.image_id.clone(),
        source_model: dets.source_model.clone(),
    }
}

/// Literal transcription of the greedy per-class suppression loop, with no
/// sorting or indexing shortcuts. Reference implementation for property
/// tests against [`nms`].
pub fn brute_force_nms_oracle(dets: &DetectionSet, nt: f64) -> DetectionSet {
    assert!(nt > 0.0 && nt <= 1.0);
    let mut classes: Vec<usize> = dets.boxes.iter().map(|b| b.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut keep: Vec<usize> = Vec::new();
    for class in classes {
        // B^c and S^c: the candidate boxes of this category
        let mut candidates: Vec<usize> = (0..dets.boxes.len())
            .filter(|&i| dets.boxes[i].class_id == class)
            .collect();
        // while B^c not empty: move the argmax into D^c, discard overlaps
        while !candidates.is_empty() {
            let mut m = 0;
            for (k, &i) in candidates.iter().enumerate() {
                if dets.boxes[i].score > dets.boxes[candidates[m]].score {
                    m = k;
                }
            }
            let selected = candidates.remove(m);
            keep.push(selected);
            candidates.retain(|&i| iou(&dets.boxes[selected], &dets.boxes[i]) < nt);
        }
    }

    DetectionSet {
        boxes: keep.iter().map(|&i| dets.boxes[i]).collect(),
        image_id: dets.image_id.clone(),
        source_model: dets.source_model.clone(),
    }
}

/// Soft-NMS: instead of discarding overlapping boxes, iteratively decay
/// their scores. Boxes whose decayed score falls below `score_floor` are
/// dropped; output scores are the decayed ones.
pub fn soft_nms(
    dets: &DetectionSet,
    nt: f64,
    method: SoftNmsMethod,
    sigma: f64,
    score_floor: f64,
) -> DetectionSet {
    assert!(sigma > 0.0, "sigma must be positive");
    assert!((0.0..1.0).contains(&score_floor), "score_floor must be in [0, 1)");

    let mut classes: Vec<usize> = dets.boxes.iter().map(|b| b.class_id).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut out: Vec<Box> = Vec::new();
    for class in classes {
        let mut pool: Vec<Box> =
            dets.boxes.iter().filter(|b| b.class_id == class).copied().collect();
        while !pool.is_empty() {
            let mut m = 0;
            for k in 1..pool.len() {
                if pool[k].score > pool[m].score {
                    m = k;
                }
            }
            let selected = pool.remove(m);
            out.push(selected);
            for b in pool.iter_mut() {
                let v = iou(&selected, b);
                match method {
                    SoftNmsMethod::Linear => {
                        if v >= nt {
                            b.score *= 1.0 - v;
                        }
                    }
                    SoftNmsMethod::Gaussian => {
                        b.score *= (-v * v / sigma).exp();
                    }
                }
            }
            pool.retain(|b| b.score >= score_floor);
        }
    }

    DetectionSet {
        boxes: out,
        image_id: dets.image_id.clone(),
        source_model: dets.source_model.clone(),
    }
}

/// The dimension-floor "NMS defence": drop boxes with `w*h < min_area`
/// before suppression runs.
pub fn dimension_floor_filter(dets: &DetectionSet, min_area: f64) -> DetectionSet {
    assert!(min_area >= 0.0);
    DetectionSet {
        boxes: dets.boxes.iter().filter(|b| b.area() >= min_area).copied().collect(),
        image_id: dets.image_id.clone(),
        source_model: dets.source_model.clone(),
    }
}

/// The published defence floor, 10^3.62 px² on a 416-pixel input, rescaled
/// to `input_side` by the squared side ratio so the filter stays comparable
/// at desk scale.
pub fn scaled_defence_floor(input_side: usize) -> f64 {
    let base: f64 = 10f64.powf(3.62);
    base * (input_side as f64 / 416.0).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(boxes: Vec<Box>) -> DetectionSet {
        DetectionSet::new(boxes, "img", "model")
    }

    #[test]
    fn iou_identical_boxes_is_one() {
        let b = Box::new(10.0, 12.0, 4.0, 6.0, 0, 0.9);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_boxes_is_zero() {
        let a = Box::new(5.0, 5.0, 4.0, 4.0, 0, 0.9);
        let b = Box::new(50.0, 50.0, 4.0, 4.0, 0, 0.9);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_unit_overlap_is_one_seventh() {
        // corners (0,0,2,2) vs (1,1,3,3): intersection 1, union 7
        let a = Box::from_corners(0.0, 0.0, 2.0, 2.0, 0, 0.9);
        let b = Box::from_corners(1.0, 1.0, 3.0, 3.0, 0, 0.8);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn iou_zero_area_boxes_yield_zero() {
        let a = Box::new(2.0, 2.0, 0.0, 0.0, 0, 0.5);
        assert_eq!(iou(&a, &a), 0.0);
    }

    #[test]
    fn nms_single_box_passes_through() {
        let d = set(vec![Box::new(5.0, 5.0, 4.0, 4.0, 1, 0.7)]);
        let out = nms(&d, 0.5);
        assert_eq!(out.boxes, d.boxes);
    }

    #[test]
    fn nms_empty_input_is_empty_output() {
        let out = nms(&set(vec![]), 0.5);
        assert!(out.is_empty());
    }

    /// Two same-class boxes with IoU 0.6: suppressed at Nt = 0.5, kept at 0.7.
    #[test]
    fn nms_threshold_controls_suppression() {
        // identical height, widths chosen so IoU = 6/10 exactly
        let b1 = Box::from_corners(0.0, 0.0, 8.0, 1.0, 2, 0.9);
        let b2 = Box::from_corners(2.0, 0.0, 10.0, 1.0, 2, 0.8);
        assert!((iou(&b1, &b2) - 0.6).abs() < 1e-12);

        let d = set(vec![b1, b2]);
        let strict = nms(&d, 0.5);
        assert_eq!(strict.boxes, vec![b1]);

        let loose = nms(&d, 0.7);
        assert_eq!(loose.boxes, vec![b1, b2]);
    }

    #[test]
    fn nms_classes_do_not_suppress_each_other() {
        let b1 = Box::new(5.0, 5.0, 4.0, 4.0, 0, 0.9);
        let b2 = Box::new(5.0, 5.0, 4.0, 4.0, 1, 0.8);
        let out = nms(&set(vec![b1, b2]), 0.5);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn nms_identical_boxes_leave_one_survivor() {
        let b = Box::new(5.0, 5.0, 4.0, 4.0, 0, 0.5);
        let out = nms(&set(vec![b; 7]), 0.99);
        assert_eq!(out.len(), 1);
        let oracle = brute_force_nms_oracle(&set(vec![b; 7]), 0.99);
        assert_eq!(oracle.len(), 1);
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> DetectionSet {
        let boxes = (0..n)
            .map(|_| {
                let cx = rng.gen_range(0.0..64.0);
                let cy = rng.gen_range(0.0..64.0);
                let w = rng.gen_range(2.0..24.0);
                let h = rng.gen_range(2.0..24.0);
                Box::new(cx, cy, w, h, rng.gen_range(0..4), rng.gen_range(0.0..1.0))
            })
            .collect();
        set(boxes)
    }

    #[test]
    fn nms_matches_oracle_on_randomized_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let n = rng.gen_range(0..120);
            let d = random_set(&mut rng, n);
            let nt = rng.gen_range(0.3..0.95);
            let fast = nms(&d, nt);
            let slow = brute_force_nms_oracle(&d, nt);
            assert_eq!(fast.boxes, slow.boxes, "divergence at nt={nt}");
        }
    }

    #[test]
    fn nms_output_properties_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let d = random_set(&mut rng, 150);
        let nt = 0.5;
        let out = nms(&d, nt);
        // subset of input
        for b in &out.boxes {
            assert!(d.boxes.iter().any(|x| x == b));
        }
        // no two same-class survivors overlap at or above the threshold
        for (i, a) in out.boxes.iter().enumerate() {
            for b in &out.boxes[i + 1..] {
                if a.class_id == b.class_id {
                    assert!(iou(a, b) < nt);
                }
            }
        }
        // every discarded box overlaps an earlier-selected same-class survivor
        for b in &d.boxes {
            if out.boxes.iter().any(|x| x == b) {
                continue;
            }
            let blamed = out
                .boxes
                .iter()
                .any(|s| s.class_id == b.class_id && s.score >= b.score && iou(s, b) >= nt);
            assert!(blamed, "discarded box without a suppressing survivor");
        }
    }

    #[test]
    fn soft_nms_leaves_disjoint_boxes_unchanged() {
        let b1 = Box::new(5.0, 5.0, 4.0, 4.0, 0, 0.9);
        let b2 = Box::new(40.0, 40.0, 4.0, 4.0, 0, 0.7);
        for method in [SoftNmsMethod::Linear, SoftNmsMethod::Gaussian] {
            let out = soft_nms(&set(vec![b1, b2]), 0.5, method, 0.5, 0.001);
            assert_eq!(out.boxes, vec![b1, b2], "method {method:?}");
        }
    }

    #[test]
    fn soft_nms_linear_decays_by_one_minus_iou() {
        // IoU 0.6 >= Nt 0.5, s2 = 0.8 -> 0.8 * (1 - 0.6) = 0.32
        let b1 = Box::from_corners(0.0, 0.0, 8.0, 1.0, 0, 0.9);
        let b2 = Box::from_corners(2.0, 0.0, 10.0, 1.0, 0, 0.8);
        let out = soft_nms(&set(vec![b1, b2]), 0.5, SoftNmsMethod::Linear, 0.5, 0.001);
        assert_eq!(out.len(), 2);
        assert!((out.boxes[1].score - 0.32).abs() < 1e-12);
    }

    #[test]
    fn soft_nms_gaussian_decays_by_exp_factor() {
        // sigma 0.5, IoU 0.6, s2 = 0.8 -> 0.8 * exp(-0.72)
        let b1 = Box::from_corners(0.0, 0.0, 8.0, 1.0, 0, 0.9);
        let b2 = Box::from_corners(2.0, 0.0, 10.0, 1.0, 0, 0.8);
        let out = soft_nms(&set(vec![b1, b2]), 0.5, SoftNmsMethod::Gaussian, 0.5, 0.001);
        let expect = 0.8 * (-0.72f64).exp();
        assert!((out.boxes[1].score - expect).abs() < 1e-12);
        assert!((expect - 0.3894).abs() < 1e-3);
    }

    #[test]
    fn soft_nms_linear_with_zero_floor_keeps_every_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_set(&mut rng, 80);
        let out = soft_nms(&d, 0.5, SoftNmsMethod::Linear, 0.5, 0.0);
        assert_eq!(out.len(), d.len(), "suppression must become pure score decay");
    }

    #[test]
    fn dimension_floor_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = random_set(&mut rng, 30);
        let out = dimension_floor_filter(&d, 0.0);
        assert_eq!(out.boxes, d.boxes);
    }

    #[test]
    fn dimension_floor_removes_small_boxes() {
        let small = Box::new(5.0, 5.0, 10.0, 10.0, 0, 0.9); // area 100
        let large = Box::new(30.0, 30.0, 20.0, 20.0, 0, 0.9); // area 400
        let out = dimension_floor_filter(&set(vec![small, large]), 200.0);
        assert_eq!(out.boxes, vec![large]);
    }

    #[test]
    fn defence_floor_rescales_with_input_side() {
        let at_416 = scaled_defence_floor(416);
        assert!((at_416 - 10f64.powf(3.62)).abs() < 1e-9);
        let at_64 = scaled_defence_floor(64);
        assert!((at_64 - at_416 * (64.0 / 416.0_f64).powi(2)).abs() < 1e-9);
        assert!((at_64 - 98.67).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn iou_axioms(
            cx1 in 0.0..64.0, cy1 in 0.0..64.0, w1 in 0.1..32.0, h1 in 0.1..32.0,
            cx2 in 0.0..64.0, cy2 in 0.0..64.0, w2 in 0.1..32.0, h2 in 0.1..32.0,
            dx in -16.0..16.0, dy in -16.0..16.0, scale in 0.5..3.0,
        ) {
            let a = Box::new(cx1, cy1, w1, h1, 0, 0.5);
            let b = Box::new(cx2, cy2, w2, h2, 0, 0.5);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - iou(&b, &a)).abs() < 1e-12, "symmetry");
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12, "identity");

            let shift = |x: &Box| Box::new(x.cx + dx, x.cy + dy, x.w, x.h, 0, 0.5);
            prop_assert!((iou(&shift(&a), &shift(&b)) - v).abs() < 1e-9, "translation");

            let zoom = |x: &Box| Box::new(x.cx * scale, x.cy * scale, x.w * scale, x.h * scale, 0, 0.5);
            prop_assert!((iou(&zoom(&a), &zoom(&b)) - v).abs() < 1e-9, "uniform scale");
        }

        #[test]
        fn nms_is_argsort_invariant(seed in 0u64..500, a in 0.05..10.0, b in 0.0..5.0) {
            // positive affine rescale of all scores keeps the survivor set
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = random_set(&mut rng, 60);
            let rescaled = set(d.boxes.iter()
                .map(|x| Box::new(x.cx, x.cy, x.w, x.h, x.class_id, x.score * a + b))
                .collect());
            let base: Vec<(f64, f64)> = nms(&d, 0.5).boxes.iter().map(|x| (x.cx, x.cy)).collect();
            let after: Vec<(f64, f64)> = nms(&rescaled, 0.5).boxes.iter().map(|x| (x.cx, x.cy)).collect();
            prop_assert_eq!(base, after);
        }

        #[test]
        fn nms_equals_oracle(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(0..80);
            let d = random_set(&mut rng, n);
            let nt = rng.gen_range(0.3..0.95);
            prop_assert_eq!(nms(&d, nt).boxes, brute_force_nms_oracle(&d, nt).boxes);
        }
    }
}
