//! Acceptance suite: one test per criterion, one PASS line per criterion.
//!
//! The heavy artifacts (trained detectors, attack batches, the poster) are
//! built once in a shared fixture; every criterion then asserts against it.
//! Run with `cargo test --test acceptance` (add `-- --nocapture` to watch
//! the PASS lines stream by).

use std::time::{Duration, Instant};

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use daedalus::attack::{l0_attack, l2_attack, AttackConfig, AttackResult, Norm};
use daedalus::autodiff::{check_gradient, Tensor, TensorMap};
use daedalus::detector::{
    build_micro, detect, train_micro, DetectOptions, DetectorModel, NmsKind, TrainConfig, Variant,
};
use daedalus::eot::{
    check_poster_gradient, evaluate_poster, optimize_poster, sample_transform, snps, Poster,
    PosterOptions, PosterRun,
};
use daedalus::evaluation::{
    average_precision_from_flags, fp_rate, mean_average_precision, sweep, EvalReport, SweepConfig,
};
use daedalus::geometry::{
    brute_force_nms_oracle, iou, nms, scaled_defence_floor, Box as GBox, DetectionSet,
};
use daedalus::img::Image;
use daedalus::losses::{standalone_loss_tape, LossKind, TargetSet};
use daedalus::scenes::{generate, GtBox, Scene};

const SIDE: usize = 64;
const K: usize = 4;
const NT_GRID: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

struct Fixture {
    holdout: Vec<Scene>,
    attack_scenes: Vec<Scene>,
    model_a: DetectorModel,
    model_b: DetectorModel,
    train_seconds: f64,
    holdout_map: f64,
    /// γ=0.3 L2 results and their PNG-round-tripped adversarial images.
    l2_g03: Vec<AttackResult>,
    adv_g03: Vec<Image>,
    /// γ ∈ {0.1, 0.4, 0.7} L2 batches (criterion 6).
    l2_g01: Vec<AttackResult>,
    l2_g04: Vec<AttackResult>,
    l2_g07: Vec<AttackResult>,
    l0_g03: Vec<AttackResult>,
    l0_g09: Vec<Result<AttackResult, String>>,
    ensemble_result: AttackResult,
    ensemble_adv: Image,
    solo_result: AttackResult,
    solo_adv: Image,
    poster_run: PosterRun,
}

fn attack_batch(
    scenes: &[Scene],
    models: &[&DetectorModel],
    gamma: f64,
    norm: Norm,
) -> Vec<AttackResult> {
    scenes
        .par_iter()
        .map(|s| {
            let cfg = AttackConfig::new(gamma, TargetSet::all(K), norm);
            match norm {
                Norm::L2 => l2_attack(&s.image, models, &cfg).expect("attack runs"),
                Norm::L0 => l0_attack(&s.image, models, &cfg).expect("attack runs"),
            }
        })
        .collect()
}

/// Save + reload through an actual PNG file: quantization survival is part
/// of the contract.
fn png_round_trip(img: &Image, tag: &str) -> Image {
    let dir = std::env::temp_dir().join("daedalus-acceptance");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let path = dir.join(format!("{tag}.png"));
    img.save_png(&path).expect("png save");
    Image::load_png(&path).expect("png load")
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let all = generate(2026, 270, SIDE, 4);
    let (train_set, rest) = all.split_at(200);
    let (holdout, rest) = rest.split_at(50);
    let attack_scenes = rest[..10].to_vec();

    let t0 = Instant::now();
    let (model_a, _) = train_micro(
        &build_micro(7, Variant::A, K, SIDE).unwrap(),
        train_set,
        &TrainConfig { epochs: 60, learning_rate: 0.01, seed: 3 },
    )
    .expect("variant A trains");
    let train_seconds = t0.elapsed().as_secs_f64();
    let (model_b, _) = train_micro(
        &build_micro(8, Variant::B, K, SIDE).unwrap(),
        train_set,
        &TrainConfig { epochs: 60, learning_rate: 0.01, seed: 4 },
    )
    .expect("variant B trains");

    let opts = DetectOptions::default();
    let dets: Vec<DetectionSet> =
        holdout.iter().map(|s| detect(&s.image, &model_a, &opts).unwrap()).collect();
    let pairs: Vec<(&DetectionSet, &[GtBox])> =
        dets.iter().zip(holdout).map(|(d, s)| (d, s.truths.as_slice())).collect();
    let holdout_map = mean_average_precision(&pairs, 0.5).map.unwrap_or(0.0);

    let a_ref = [&model_a];
    let l2_g03 = attack_batch(&attack_scenes, &a_ref, 0.3, Norm::L2);
    let adv_g03: Vec<Image> = l2_g03
        .iter()
        .enumerate()
        .map(|(i, r)| png_round_trip(&r.adversarial, &format!("l2-g03-{i}")))
        .collect();
    let l2_g01 = attack_batch(&attack_scenes, &a_ref, 0.1, Norm::L2);
    let l2_g04 = attack_batch(&attack_scenes, &a_ref, 0.4, Norm::L2);
    let l2_g07 = attack_batch(&attack_scenes, &a_ref, 0.7, Norm::L2);
    let l0_g03 = attack_batch(&attack_scenes, &a_ref, 0.3, Norm::L0);
    let l0_g09: Vec<Result<AttackResult, String>> = attack_scenes
        .par_iter()
        .map(|s| {
            let cfg = AttackConfig::new(0.9, TargetSet::all(K), Norm::L0);
            l0_attack(&s.image, &[&model_a], &cfg).map_err(|e| e.to_string())
        })
        .collect();

    let ensemble_cfg = AttackConfig::new(0.3, TargetSet::all(K), Norm::L2);
    let ensemble_result =
        l2_attack(&attack_scenes[0].image, &[&model_a, &model_b], &ensemble_cfg)
            .expect("ensemble attack runs");
    let ensemble_adv = png_round_trip(&ensemble_result.adversarial, "ensemble");
    let solo_result = l2_attack(&attack_scenes[0].image, &[&model_a], &ensemble_cfg)
        .expect("single-model attack runs");
    let solo_adv = png_round_trip(&solo_result.adversarial, "solo");

    let mut poster_cfg = AttackConfig::new(0.3, TargetSet::all(K), Norm::L2);
    poster_cfg.eta = 0.05;
    poster_cfg.max_iteration = 400;
    poster_cfg.seed = 11;
    let poster_opts = PosterOptions::new(32, 0.01);
    let poster_run = optimize_poster(&attack_scenes, &a_ref, &poster_cfg, &poster_opts)
        .expect("poster optimizes");

    Fixture {
        holdout: holdout.to_vec(),
        attack_scenes,
        model_a,
        model_b,
        train_seconds,
        holdout_map,
        l2_g03,
        adv_g03,
        l2_g01,
        l2_g04,
        l2_g07,
        l0_g03,
        l0_g09,
        ensemble_result,
        ensemble_adv,
        solo_result,
        solo_adv,
        poster_run,
    }
});

fn pass(criterion: usize, name: &str, detail: String) {
    println!("ACCEPTANCE {criterion:>2} ({name}): PASS — {detail}");
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean per-image FP and pooled mAP of a batch under one detect setting.
fn batch_metrics(
    images: &[Image],
    scenes: &[Scene],
    model: &DetectorModel,
    opts: &DetectOptions,
) -> (f64, f64) {
    let dets: Vec<DetectionSet> =
        images.iter().map(|img| detect(img, model, opts).unwrap()).collect();
    let fps: Vec<f64> = dets
        .iter()
        .zip(scenes)
        .filter_map(|(d, s)| fp_rate(d, &s.truths, 0.5))
        .collect();
    assert!(!fps.is_empty(), "no detections anywhere: the attack produced nothing");
    let pairs: Vec<(&DetectionSet, &[GtBox])> =
        dets.iter().zip(scenes).map(|(d, s)| (d, s.truths.as_slice())).collect();
    let map = mean_average_precision(&pairs, 0.5).map.unwrap_or(0.0);
    (fps.iter().sum::<f64>() / fps.len() as f64, map)
}

// ── criterion 1: NMS oracle equivalence ─────────────────────────────────

#[test]
fn criterion_01_nms_matches_the_literal_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(424242);
    for trial in 0..1000 {
        let n = rng.gen_range(0..=300);
        let boxes: Vec<GBox> = (0..n)
            .map(|_| {
                GBox::new(
                    rng.gen_range(0.0..64.0),
                    rng.gen_range(0.0..64.0),
                    rng.gen_range(0.5..28.0),
                    rng.gen_range(0.5..28.0),
                    rng.gen_range(0..4),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let set = DetectionSet::new(boxes, "t", "m");
        let nt = rng.gen_range(0.3..0.95);
        let fast = nms(&set, nt);
        let slow = brute_force_nms_oracle(&set, nt);
        assert_eq!(fast.boxes, slow.boxes, "trial {trial} at nt {nt} diverged");
    }
    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(30), "oracle sweep took {dt:?}");
    pass(1, "nms-oracle", format!("1000 randomized sets identical in {dt:.2?}"));
}

// ── criterion 2: gradient integrity ─────────────────────────────────────

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let model = build_micro(21, Variant::A, K, SIDE).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let image = Tensor::new(
        vec![3, SIDE, SIDE],
        (0..3 * SIDE * SIDE).map(|_| rng.gen_range(0.0..1.0)).collect(),
    );
    let targets = TargetSet::all(K);
    let mut details = Vec::new();

    // decode path: gradient of the summed decoded outputs
    {
        use daedalus::autodiff::Tape;
        use daedalus::detector::WeightMode;
        let mut tape = Tape::new();
        let input = tape.input("image", vec![3, SIDE, SIDE]);
        let (raw, _) = model.append_backbone(&mut tape, input, &WeightMode::Baked).unwrap();
        let d = model.append_decode(&mut tape, raw).unwrap();
        let parts = [d.bx, d.by, d.bw, d.bh, d.confidence];
        let mut acc = tape.sum(parts[0]);
        for &p in &parts[1..] {
            let s = tape.sum(p);
            acc = tape.add(acc, s).unwrap();
        }
        let mut bindings = TensorMap::new();
        bindings.insert("image".into(), image.clone());
        let err = check_gradient(&tape, acc, &bindings, "image", 1e-4, 120, 5).unwrap();
        assert!(err <= 1e-3, "decode path error {err}");
        details.push(format!("decode {err:.2e}"));
    }

    // the three losses end to end, selection masks pinned
    for kind in [LossKind::F1, LossKind::F2, LossKind::F3] {
        let le = daedalus::losses::LossEvaluator::new(&[&model], kind, &targets).unwrap();
        let masks = le.masks_for(&image).unwrap();
        let mut bindings = TensorMap::new();
        bindings.insert("image".into(), image.clone());
        for (names, m) in le.model_graphs()[0].loss.mask_inputs.iter().zip(&masks[0]) {
            bindings.insert(names.mask.clone(), m.mask.clone());
            bindings.insert(names.inv_count.clone(), Tensor::scalar(m.inv_count));
            if let Some(p) = &names.inv_pairs {
                bindings.insert(p.clone(), Tensor::scalar(m.inv_pairs));
            }
        }
        let err =
            check_gradient(le.tape(), le.ensemble_node(), &bindings, "image", 1e-4, 120, 9)
                .unwrap();
        assert!(err <= 1e-3, "{kind:?} pixel-gradient error {err}");
        details.push(format!("{kind:?} {err:.2e}"));
    }

    // EoT poster path (interpolation subgradients are coarser: 1e-2)
    {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let scene = generate(909, 1, SIDE, 3).remove(0);
        let t = sample_transform(&mut rng, (SIDE, SIDE), (16, 16)).unwrap();
        let poster = Tensor::new(
            vec![3, 16, 16],
            (0..3 * 16 * 16).map(|_| rng.gen_range(0.05..0.95)).collect(),
        );
        let err =
            check_poster_gradient(&model, &scene.image, &t, &targets, 16, &poster, 100, 13)
                .unwrap();
        assert!(err <= 1e-2, "EoT poster gradient error {err}");
        details.push(format!("eot {err:.2e}"));
    }

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(300), "gradient checks took {dt:?}");
    pass(2, "gradient-integrity", format!("{} in {dt:.1?}", details.join(", ")));
}

// ── criterion 3: benign baseline ────────────────────────────────────────

#[test]
fn criterion_03_benign_holdout_map_reaches_half() {
    let f = &*FIXTURE;
    assert!(
        f.holdout_map >= 0.5,
        "held-out mAP@.50 = {:.4} < 0.5 over {} scenes",
        f.holdout_map,
        f.holdout.len()
    );
    assert!(f.train_seconds < 900.0, "training took {:.0}s", f.train_seconds);
    pass(
        3,
        "benign-baseline",
        format!("mAP@.50 = {:.3} after {:.0}s of training", f.holdout_map, f.train_seconds),
    );
}

// ── criterion 4: L2 attack efficacy across the NMS-threshold grid ───────

#[test]
fn criterion_04_l2_attack_floods_detections_at_every_threshold() {
    let f = &*FIXTURE;
    assert!(f.l2_g03.iter().all(|r| r.success), "every γ=0.3 attack must succeed");

    let mut worst_fp = f64::INFINITY;
    let mut worst_map: f64 = 0.0;
    for nt in NT_GRID {
        let opts = DetectOptions { nt, ..Default::default() };
        let (fp, map) = batch_metrics(&f.adv_g03, &f.attack_scenes, &f.model_a, &opts);
        assert!(fp >= 0.9, "mean FP rate {fp:.4} < 0.9 at Nt = {nt}");
        assert!(map <= 0.05, "mAP {map:.4} > 0.05 at Nt = {nt}");
        worst_fp = worst_fp.min(fp);
        worst_map = worst_map.max(map);
    }

    // NMS is actually failing to suppress: nearly every raw box that passes
    // the confidence filter survives into the final output
    let opts = DetectOptions::default();
    let mut final_total = 0usize;
    let mut surviving_total = 0usize;
    for img in &f.adv_g03 {
        let decoded = daedalus::detector::decode_image(&f.model_a, img).unwrap();
        surviving_total += decoded
            .confidence
            .iter()
            .filter(|&&c| c >= opts.objectness_threshold)
            .count();
        final_total += detect(img, &f.model_a, &opts).unwrap().len();
    }
    assert!(
        final_total as f64 >= 0.9 * surviving_total as f64,
        "NMS suppressed too much: {final_total} of {surviving_total} raw survivors"
    );

    pass(
        4,
        "l2-attack-efficacy",
        format!(
            "γ=0.3: min mean FP {worst_fp:.3}, max mAP {worst_map:.4}, {final_total}/{surviving_total} raw survivors kept"
        ),
    );
}

// ── criterion 5: L0 attack ──────────────────────────────────────────────

#[test]
fn criterion_05_l0_attack_succeeds_at_low_confidence_and_fails_gracefully_at_high() {
    let f = &*FIXTURE;
    let total_px = 3 * SIDE * SIDE;
    let successes = f
        .l0_g03
        .iter()
        .filter(|r| r.success && r.l0_distortion < total_px)
        .count();
    assert!(successes >= 8, "only {successes}/10 L0 attacks succeeded at γ=0.3");

    // γ=0.9: failure is permitted; the harness must report it, not crash
    let failed = f
        .l0_g09
        .iter()
        .filter(|r| match r {
            Ok(res) => !res.success,
            Err(_) => true,
        })
        .count();
    let errs = f.l0_g09.iter().filter(|r| r.is_err()).count();
    assert_eq!(errs, 0, "γ=0.9 runs must return best-effort results, not errors");
    pass(
        5,
        "l0-attack",
        format!(
            "γ=0.3: {successes}/10 succeeded (all < {total_px} px); γ=0.9: {failed}/10 reported failure gracefully"
        ),
    );
}

// ── criterion 6: distortion grows with γ ────────────────────────────────

#[test]
fn criterion_06_mean_l2_distortion_is_nondecreasing_in_gamma() {
    let f = &*FIXTURE;
    let m1 = mean(f.l2_g01.iter().map(|r| r.l2_distortion));
    let m4 = mean(f.l2_g04.iter().map(|r| r.l2_distortion));
    let m7 = mean(f.l2_g07.iter().map(|r| r.l2_distortion));
    assert!(m1 <= m4 && m4 <= m7, "distortion trend broken: {m1:.4}, {m4:.4}, {m7:.4}");
    pass(6, "distortion-trend", format!("mean ‖δ‖₂ = {m1:.3} -> {m4:.3} -> {m7:.3}"));
}

// ── criterion 7: loss cost ordering and scaling ─────────────────────────

/// Mean wall time of one loss iteration (forward + input gradients) over a
/// standalone loss tape with `n` random boxes.
fn loss_iteration_time(kind: LossKind, n: usize, reps: usize) -> f64 {
    let targets = TargetSet::all(K);
    let sl = standalone_loss_tape(kind, n, &targets, SIDE as f64, SIDE as f64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let vec = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    };
    let bx = vec(&mut rng, 2.0, 62.0);
    let by = vec(&mut rng, 2.0, 62.0);
    let bw = vec(&mut rng, 0.5, 24.0);
    let bh = vec(&mut rng, 0.5, 24.0);
    let conf = vec(&mut rng, 0.05, 0.95);
    let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..K)).collect();
    let masks: Vec<daedalus::losses::CategoryMask> = targets
        .classes()
        .iter()
        .map(|&class| {
            let mask: Vec<f64> =
                classes.iter().map(|&c| if c == class { 1.0 } else { 0.0 }).collect();
            let count = mask.iter().filter(|&&v| v == 1.0).count();
            daedalus::losses::CategoryMask {
                class_id: class,
                count,
                mask: Tensor::new(vec![n], mask),
                inv_count: if count > 0 { 1.0 / count as f64 } else { 0.0 },
                inv_pairs: if count > 1 { 1.0 / (count - 1) as f64 } else { 0.0 },
            }
        })
        .collect();

    let wanted = ["bx", "by", "bw", "bh", "conf"]
        .iter()
        .map(|nm| sl.tape.input_id(nm).unwrap())
        .collect::<Vec<_>>();
    let run_once = || {
        let mut ev = sl.tape.evaluation();
        ev.bind("bx", bx.clone()).unwrap();
        ev.bind("by", by.clone()).unwrap();
        ev.bind("bw", bw.clone()).unwrap();
        ev.bind("bh", bh.clone()).unwrap();
        ev.bind("conf", conf.clone()).unwrap();
        daedalus::losses::bind_masks(&mut ev, &sl.nodes, &masks).unwrap();
        ev.run().unwrap();
        let g = ev.backward(sl.nodes.total, &wanted).unwrap();
        std::hint::black_box(g.get(wanted[0]));
    };
    run_once(); // warm up allocator paths
    let t0 = Instant::now();
    for _ in 0..reps {
        run_once();
    }
    t0.elapsed().as_secs_f64() / reps as f64
}

#[test]
fn criterion_07_f3_is_linear_while_f1_is_quadratic() {
    let ns = [128usize, 512, 2048];
    let reps = [40usize, 12, 3];
    let mut t_f1 = Vec::new();
    let mut t_f3 = Vec::new();
    for (&n, &r) in ns.iter().zip(&reps) {
        t_f1.push(loss_iteration_time(LossKind::F1, n, r));
        t_f3.push(loss_iteration_time(LossKind::F3, n, r));
    }
    assert!(
        t_f3[0] < t_f1[0],
        "f3 must be cheaper than f1 on 128 boxes: {:.2e} !< {:.2e}",
        t_f3[0],
        t_f1[0]
    );
    // log-log slope over the full n range
    let slope = |t: &[f64]| (t[2] / t[0]).ln() / ((ns[2] as f64) / (ns[0] as f64)).ln();
    let s1 = slope(&t_f1);
    let s3 = slope(&t_f3);
    assert!((s1 - 2.0).abs() <= 0.3, "f1 slope {s1:.3} not within 2±0.3");
    assert!((s3 - 1.0).abs() <= 0.3, "f3 slope {s3:.3} not within 1±0.3");
    pass(
        7,
        "loss-cost-ordering",
        format!(
            "t(f1) = {:.2e}/{:.2e}/{:.2e}s, t(f3) = {:.2e}/{:.2e}/{:.2e}s; slopes f1 {s1:.2}, f3 {s3:.2}",
            t_f1[0], t_f1[1], t_f1[2], t_f3[0], t_f3[1], t_f3[2]
        ),
    );
}

// ── criterion 8: soft-NMS breaks too ────────────────────────────────────

#[test]
fn criterion_08_soft_nms_variants_are_flooded_as_well() {
    let f = &*FIXTURE;
    let mut details = Vec::new();
    for kind in [NmsKind::SoftLinear, NmsKind::SoftGaussian] {
        let opts = DetectOptions { nms_kind: kind, ..Default::default() };
        let (fp, _) = batch_metrics(&f.adv_g03, &f.attack_scenes, &f.model_a, &opts);
        assert!(fp >= 0.95, "{kind:?}: FP rate {fp:.4} < 0.95");
        details.push(format!("{kind:?} {fp:.3}"));
    }
    pass(8, "soft-nms-break", details.join(", "));
}

// ── criterion 9: ensemble universality ──────────────────────────────────

#[test]
fn criterion_09_ensemble_example_breaks_both_members() {
    let f = &*FIXTURE;
    let opts = DetectOptions::default();
    let scene = &f.attack_scenes[0];
    assert!(f.ensemble_result.success, "the ensemble attack itself must succeed");
    let mut fps = Vec::new();
    for model in [&f.model_a, &f.model_b] {
        let d = detect(&f.ensemble_adv, model, &opts).unwrap();
        let fp = fp_rate(&d, &scene.truths, 0.5).unwrap_or(0.0);
        assert!(fp >= 0.9, "{}: FP rate {fp:.4} < 0.9 on the ensemble example", model.id);
        fps.push(format!("{} {fp:.3}", model.id));
    }
    // single-substitute example: variant B's FP rate is reported, without a
    // threshold — transfer is not claimed
    let d_b = detect(&f.solo_adv, &f.model_b, &opts).unwrap();
    let transfer = fp_rate(&d_b, &scene.truths, 0.5);
    assert!(f.solo_result.success, "the single-model attack itself must succeed");
    pass(
        9,
        "ensemble-universality",
        format!(
            "ensemble example: {}; A-only example on B: FP {} ({} boxes)",
            fps.join(", "),
            transfer.map(|v| format!("{v:.3}")).unwrap_or_else(|| "no-detections".into()),
            d_b.len()
        ),
    );
}

// ── criterion 10: dimension-floor defence harness ───────────────────────

#[test]
fn criterion_10_defended_sweep_runs_end_to_end() {
    let f = &*FIXTURE;
    let floor = scaled_defence_floor(SIDE);
    let base = SweepConfig {
        gammas: vec![0.0, 0.3],
        nts: NT_GRID.to_vec(),
        iou_matches: vec![0.5, 0.75],
        nms_kind: NmsKind::Hard,
        soft_sigma: 0.5,
        soft_score_floor: 0.001,
        defence_min_area: 0.0,
        objectness_threshold: 0.5,
        attack: AttackConfig::new(0.3, TargetSet::all(K), Norm::L2),
    };
    let undefended = sweep(&f.attack_scenes, &[&f.model_a], &base);
    let defended_cfg = SweepConfig { defence_min_area: floor, ..base };
    let defended = sweep(&f.attack_scenes, &[&f.model_a], &defended_cfg);

    let expected_rows = 2 * NT_GRID.len() * 2;
    assert_eq!(undefended.rows.len(), expected_rows);
    assert_eq!(defended.rows.len(), expected_rows);
    let merged = EvalReport {
        rows: undefended.rows.iter().chain(&defended.rows).cloned().collect(),
    };
    let csv = merged.to_csv();
    assert_eq!(csv.lines().count(), 1 + 2 * expected_rows);

    // benign sanity rows: FP stays low and roughly flat across Nt
    let benign: Vec<f64> = undefended
        .rows
        .iter()
        .filter(|r| r.gamma == 0.0 && r.iou_match == 0.5)
        .filter_map(|r| r.fp_rate)
        .collect();
    assert_eq!(benign.len(), NT_GRID.len());
    let bmin = benign.iter().cloned().fold(f64::INFINITY, f64::min);
    let bmax = benign.iter().cloned().fold(0.0f64, f64::max);
    assert!(bmax <= 0.5, "benign FP rate {bmax:.3} is suspiciously high");
    assert!(bmax - bmin <= 0.25, "benign FP should be flat in Nt: {bmin:.3}..{bmax:.3}");

    // the paper's "barely changes" claim is desk-scale *reported*, never
    // asserted: print the attacked FP with and without the floor
    let cell = |rep: &EvalReport, gamma: f64| {
        rep.rows
            .iter()
            .find(|r| r.gamma == gamma && r.nt == 0.5 && r.iou_match == 0.5)
            .and_then(|r| r.fp_rate)
    };
    pass(
        10,
        "dimension-floor-defence",
        format!(
            "floor {floor:.1} px²; attacked FP@Nt=0.5: undefended {:?}, defended {:?}; benign FP {bmin:.3}..{bmax:.3}",
            cell(&undefended, 0.3),
            cell(&defended, 0.3)
        ),
    );
}

// ── criterion 11: EoT poster ────────────────────────────────────────────

#[test]
fn criterion_11_poster_floods_detections_under_fresh_transforms() {
    let f = &*FIXTURE;
    let eval = evaluate_poster(
        &f.poster_run.poster,
        &f.attack_scenes,
        &f.model_a,
        &DetectOptions::default(),
        100,
        20_000,
    )
    .unwrap();
    let fp = eval.mean_fp.expect("poster frames must produce detections");
    assert!(fp >= 0.8, "poster FP rate {fp:.4} < 0.8 over 100 fresh transforms");
    pass(
        11,
        "eot-poster",
        format!(
            "FP@.50 = {fp:.3} over {} transform samples ({} frames with detections)",
            eval.samples, eval.frames_with_detections
        ),
    );
}

// ── criterion 12: frozen metric examples ────────────────────────────────

#[test]
fn criterion_12_metric_hand_traces_are_exact() {
    // all-point AP of ranked (TP, FP, TP) over 2 ground truths = 5/6
    let ap = average_precision_from_flags(&[true, false, true], 2);
    assert!((ap - 5.0 / 6.0).abs() < 1e-9, "AP {ap}");

    // FP rate 0.75 with 2 greedy TPs among 8 detections
    let gts = vec![
        GtBox { class_id: 0, cx: 10.0, cy: 10.0, w: 6.0, h: 6.0 },
        GtBox { class_id: 1, cx: 40.0, cy: 40.0, w: 6.0, h: 6.0 },
    ];
    let mut boxes = vec![
        GBox::new(10.0, 10.0, 6.0, 6.0, 0, 0.9),
        GBox::new(40.0, 40.0, 6.0, 6.0, 1, 0.8),
    ];
    for i in 0..6 {
        boxes.push(GBox::new(20.0 + i as f64, 55.0, 3.0, 3.0, 2, 0.5));
    }
    let fp = fp_rate(&DetectionSet::new(boxes, "t", "m"), &gts, 0.5).unwrap();
    assert!((fp - 0.75).abs() < 1e-9, "FP {fp}");

    // IoU of corners (0,0,2,2) vs (1,1,3,3) = 1/7
    let a = GBox::from_corners(0.0, 0.0, 2.0, 2.0, 0, 1.0);
    let b = GBox::from_corners(1.0, 1.0, 3.0, 3.0, 0, 1.0);
    let v = iou(&a, &b);
    assert!((v - 1.0 / 7.0).abs() < 1e-9, "IoU {v}");

    // SNPS of an all-mid-gray 2x2 poster against {black, white} = 3.0
    let poster = Poster {
        image: Image::filled(2, 2, 0.5),
        beta: 1.0,
        palette: vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]],
    };
    let s = snps(&poster, 1);
    assert!((s - 3.0).abs() < 1e-9, "SNPS {s}");

    pass(
        12,
        "metric-hand-traces",
        format!("AP {ap:.6} = 5/6, FP {fp}, IoU {v:.6} = 1/7, SNPS {s}"),
    );
}
