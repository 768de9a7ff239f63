//! Implementations of the six subcommands.

use std::path::{Path, PathBuf};

use daedalus::attack::{l0_attack, l2_attack, AttackConfig, Norm};
use daedalus::detector::{
    build_micro, detect as run_detect, load_model, save_model, train_micro, DetectOptions,
    DetectorModel, NmsKind, TrainConfig, Variant,
};
use daedalus::eot::{
    default_palette, optimize_poster, palette_hash, save_poster, PosterMeta, PosterOptions,
};
use daedalus::evaluation::{mean_average_precision, sweep as run_sweep, SweepConfig};
use daedalus::img::Image;
use daedalus::losses::{LossKind, TargetSet};
use daedalus::scenes::{self, Scene};
use daedalus::{Error, Result};
use serde::Serialize;

use crate::config::{parse_grid, resolve, sidecar, ConfigFile, Manifest};
use crate::{
    AttackArgs, DetectArgs, GenScenesArgs, PosterArgs, SweepArgs, TrainArgs,
};

const NUM_CLASSES: usize = scenes::NUM_CLASSES;

fn parse_flag<T: std::str::FromStr>(what: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| Error::invalid(format!("{what}: {e}")))
}

fn parse_targets(spec: &str) -> Result<TargetSet> {
    if spec == "all" {
        return Ok(TargetSet::all(NUM_CLASSES));
    }
    let ids: Vec<usize> = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad target class '{s}'")))
        })
        .collect::<Result<_>>()?;
    TargetSet::new(ids, NUM_CLASSES)
}

fn load_models(spec: &str) -> Result<Vec<DetectorModel>> {
    spec.split(',').map(|p| load_model(p.trim())).collect()
}

fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>> {
    let scenes = scenes::load_scenes(dir)?;
    if scenes.is_empty() {
        return Err(Error::io(
            dir.display().to_string(),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no scene_*.png files"),
        ));
    }
    Ok(scenes)
}

/// Image/model compatibility is an input-data problem (exit code 2).
fn check_image_matches(image: &Image, model: &DetectorModel, image_path: &Path) -> Result<()> {
    let side = model.input_side();
    if image.width() != side || image.height() != side {
        return Err(Error::Format {
            path: image_path.display().to_string(),
            detail: format!(
                "image is {}x{} but model '{}' expects {side}x{side}",
                image.width(),
                image.height(),
                model.id
            ),
        });
    }
    Ok(())
}

// ── gen-scenes ──────────────────────────────────────────────────────────

pub fn gen_scenes(args: GenScenesArgs, cfg: &ConfigFile) -> Result<()> {
    let count = resolve(args.count, cfg.get("count")?, 32usize);
    let seed = resolve(args.seed, cfg.get("seed")?, 0u64);
    let size = resolve(args.size, cfg.get("size")?, 64usize);
    let max_objects = resolve(args.max_objects, cfg.get("max-objects")?, 4usize);
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let scenes = scenes::generate(seed, count, size, max_objects);
    let mut manifest = Manifest::new("gen-scenes");
    manifest.set("count", count);
    manifest.set("seed", seed);
    manifest.set("size", size);
    manifest.set("max_objects", max_objects);
    for (i, scene) in scenes.iter().enumerate() {
        scenes::save_scene(&args.out, i, scene)?;
        let stem = scenes::scene_file_stem(i);
        manifest.add_output(&args.out.join(format!("{stem}.png")))?;
        manifest.add_output(&args.out.join(format!("{stem}.json")))?;
    }
    manifest.write(&args.out.join("manifest.json"))?;
    println!("wrote {count} scenes to {}", args.out.display());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

pub fn train(args: TrainArgs, cfg: &ConfigFile) -> Result<()> {
    let variant: Variant = {
        let raw = resolve(args.variant, cfg.get("variant")?, "A".to_string());
        parse_flag("variant", &raw)?
    };
    let epochs = resolve(args.epochs, cfg.get("epochs")?, 60usize);
    let lr = resolve(args.lr, cfg.get("lr")?, 0.01f64);
    let seed = resolve(args.seed, cfg.get("seed")?, 0u64);
    let holdout_frac = resolve(args.holdout_frac, cfg.get("holdout-frac")?, 0.2f64);
    if !(0.0..1.0).contains(&holdout_frac) {
        return Err(Error::invalid("holdout-frac must be in [0, 1)"));
    }

    let all = load_scene_dir(&args.scenes)?;
    let holdout_n = ((all.len() as f64) * holdout_frac) as usize;
    let (train_set, holdout) = all.split_at(all.len() - holdout_n);
    let size = train_set[0].image.height();

    let model = build_micro(seed, variant, NUM_CLASSES, size)?;
    let (trained, report) =
        train_micro(&model, train_set, &TrainConfig { epochs, learning_rate: lr, seed })?;
    for (e, loss) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}: loss {loss:.6}", e + 1);
    }

    save_model(&trained, &args.out)?;

    let mut manifest = Manifest::new("train");
    manifest.set("variant", format!("{variant:?}"));
    manifest.set("epochs", epochs);
    manifest.set("lr", lr);
    manifest.set("seed", seed);
    manifest.set("holdout_frac", holdout_frac);
    manifest.set("scenes", args.scenes.display().to_string());
    manifest.set("train_scenes", train_set.len());
    manifest.set("holdout_scenes", holdout.len());
    if let Some(final_loss) = report.epoch_losses.last() {
        manifest.set("final_loss", *final_loss);
    }

    if !holdout.is_empty() {
        let opts = DetectOptions::default();
        let dets: Vec<_> = holdout
            .iter()
            .map(|s| run_detect(&s.image, &trained, &opts))
            .collect::<Result<_>>()?;
        let pairs: Vec<_> =
            dets.iter().zip(holdout).map(|(d, s)| (d, s.truths.as_slice())).collect();
        let map = mean_average_precision(&pairs, 0.5).map;
        match map {
            Some(m) => {
                println!("held-out mAP@.50 = {m:.4} over {} scenes", holdout.len());
                manifest.set("holdout_map50", m);
            }
            None => println!("held-out mAP@.50 undefined (no ground truth)"),
        }
    }

    manifest.add_output(&args.out)?;
    manifest.write(&sidecar(&args.out, "manifest", "json"))?;
    println!("saved model to {}", args.out.display());
    Ok(())
}

// ── attack ──────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct AttackResultJson {
    success: bool,
    gamma: f64,
    norm: String,
    loss: String,
    targets: Vec<usize>,
    l2_distortion: f64,
    l0_distortion: usize,
    best_c: f64,
    loss_init: f64,
    final_loss: f64,
    /// Raw boxes whose argmax class falls in each target category, on the
    /// saved (quantized) adversarial image.
    selected_counts: Vec<(usize, usize)>,
}

pub fn attack(args: AttackArgs, cfg: &ConfigFile) -> Result<()> {
    let norm: Norm = parse_flag("norm", &resolve(args.norm, cfg.get("norm")?, "l2".into()))?;
    let gamma = resolve(args.gamma, cfg.get("gamma")?, 0.3f64);
    let targets = parse_targets(&resolve(args.targets, cfg.get("targets")?, "all".into()))?;
    let loss_kind: LossKind =
        parse_flag("loss", &resolve(args.loss, cfg.get("loss")?, "f3".into()))?;

    let mut acfg = AttackConfig::new(gamma, targets.clone(), norm);
    acfg.loss_kind = loss_kind;
    acfg.eta = resolve(args.eta, cfg.get("eta")?, acfg.eta);
    acfg.max_iteration = resolve(args.max_iter, cfg.get("max-iter")?, acfg.max_iteration);
    acfg.binary_steps = resolve(args.binary_steps, cfg.get("binary-steps")?, acfg.binary_steps);
    acfg.l0_top_fraction = resolve(args.l0_frac, cfg.get("l0-frac")?, acfg.l0_top_fraction);
    acfg.seed = resolve(args.seed, cfg.get("seed")?, acfg.seed);

    let models = load_models(&args.model)?;
    let image = Image::load_png(&args.image)?;
    check_image_matches(&image, &models[0], &args.image)?;

    let model_refs: Vec<&DetectorModel> = models.iter().collect();
    let result = match norm {
        Norm::L2 => l2_attack(&image, &model_refs, &acfg)?,
        Norm::L0 => l0_attack(&image, &model_refs, &acfg)?,
    };

    // adversarial PNG (quantized on save), offset-encoded perturbation PNG
    result.adversarial.save_png(&args.out)?;
    let delta_path = sidecar(&args.out, "delta", "png");
    let mut delta_img = Image::zeros(image.height(), image.width());
    for (d, src) in delta_img.data_mut().iter_mut().zip(result.perturbation.data()) {
        *d = (src + 1.0) / 2.0;
    }
    delta_img.save_png(&delta_path)?;

    if let Some(trace_path) = &args.trace {
        daedalus::attack::write_trace_csv(trace_path, &result.trace)?;
    }

    // audit which raw boxes sit in the attacked categories after the
    // quantization round trip
    let reloaded = Image::load_png(&args.out)?;
    let decoded = daedalus::detector::decode_image(&models[0], &reloaded)?;
    let selected_counts: Vec<(usize, usize)> = targets
        .classes()
        .iter()
        .map(|&c| (c, decoded.class_ids.iter().filter(|&&k| k == c).count()))
        .collect();

    let result_json = AttackResultJson {
        success: result.success,
        gamma,
        norm: format!("{norm:?}").to_lowercase(),
        loss: format!("{loss_kind:?}").to_lowercase(),
        targets: targets.classes().to_vec(),
        l2_distortion: result.l2_distortion,
        l0_distortion: result.l0_distortion,
        best_c: result.best_c,
        loss_init: result.loss_init,
        final_loss: result.final_loss,
        selected_counts,
    };
    let json_path = sidecar(&args.out, "result", "json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&result_json).expect("result serializes"),
    )
    .map_err(|e| Error::io(json_path.display().to_string(), e))?;

    let mut manifest = Manifest::new("attack");
    manifest.set("gamma", gamma);
    manifest.set("norm", format!("{norm:?}").to_lowercase());
    manifest.set("loss", format!("{loss_kind:?}").to_lowercase());
    manifest.set("eta", acfg.eta);
    manifest.set("max_iteration", acfg.max_iteration);
    manifest.set("binary_steps", acfg.binary_steps);
    manifest.set("l0_top_fraction", acfg.l0_top_fraction);
    manifest.set("seed", acfg.seed);
    manifest.set(
        "targets",
        targets.classes().iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
    );
    for m in args.model.split(',') {
        manifest.add_input(Path::new(m.trim()))?;
    }
    manifest.add_input(&args.image)?;
    manifest.add_output(&args.out)?;
    manifest.add_output(&delta_path)?;
    manifest.add_output(&json_path)?;
    if let Some(trace_path) = &args.trace {
        manifest.add_output(trace_path)?;
    }
    manifest.write(&sidecar(&args.out, "manifest", "json"))?;

    println!(
        "attack {}: loss {:.6} -> {:.6}, l2 {:.4}, l0 {}",
        if result.success { "succeeded" } else { "failed (best effort saved)" },
        result.loss_init,
        result.final_loss,
        result.l2_distortion,
        result.l0_distortion
    );
    Ok(())
}

// ── detect ──────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct DetectionJson {
    class_id: usize,
    score: f64,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize)]
struct DetectOutputJson {
    image: String,
    model: String,
    nms: String,
    nt: f64,
    objectness_threshold: f64,
    defence_min_area: f64,
    boxes: Vec<DetectionJson>,
}

pub fn detect(args: DetectArgs, cfg: &ConfigFile) -> Result<()> {
    let nms_kind: NmsKind = parse_flag("nms", &resolve(args.nms, cfg.get("nms")?, "hard".into()))?;
    let opts = DetectOptions {
        objectness_threshold: resolve(args.objectness, cfg.get("objectness")?, 0.5),
        nt: resolve(args.nt, cfg.get("nt")?, 0.5),
        nms_kind,
        soft_sigma: resolve(args.sigma, cfg.get("sigma")?, 0.5),
        soft_score_floor: resolve(args.score_floor, cfg.get("score-floor")?, 0.001),
        defence_min_area: resolve(args.defence_min_area, cfg.get("defence-min-area")?, 0.0),
    };
    let model = load_model(&args.model)?;
    let image = Image::load_png(&args.image)?;
    check_image_matches(&image, &model, &args.image)?;

    let dets = run_detect(&image, &model, &opts)?;
    let out = DetectOutputJson {
        image: args.image.display().to_string(),
        model: model.id.clone(),
        nms: format!("{nms_kind:?}"),
        nt: opts.nt,
        objectness_threshold: opts.objectness_threshold,
        defence_min_area: opts.defence_min_area,
        boxes: dets
            .boxes
            .iter()
            .map(|b| DetectionJson {
                class_id: b.class_id,
                score: b.score,
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
            })
            .collect(),
    };
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&out).expect("detections serialize"),
    )
    .map_err(|e| Error::io(args.out.display().to_string(), e))?;

    let mut manifest = Manifest::new("detect");
    manifest.set("nt", opts.nt);
    manifest.set("objectness", opts.objectness_threshold);
    manifest.set("nms", format!("{nms_kind:?}"));
    manifest.set("defence_min_area", opts.defence_min_area);
    manifest.add_input(&args.model)?;
    manifest.add_input(&args.image)?;
    manifest.add_output(&args.out)?;
    manifest.write(&sidecar(&args.out, "manifest", "json"))?;

    println!("{} detections written to {}", dets.len(), args.out.display());
    Ok(())
}

// ── sweep ───────────────────────────────────────────────────────────────

pub fn sweep(args: SweepArgs, cfg: &ConfigFile) -> Result<()> {
    let gammas = parse_grid(&resolve(args.gammas, cfg.get("gammas")?, "0.0,0.3".into()))?;
    let nts = parse_grid(&resolve(args.nts, cfg.get("nts")?, "0.5:0.95:0.05".into()))?;
    let nms_kind: NmsKind = parse_flag("nms", &resolve(args.nms, cfg.get("nms")?, "hard".into()))?;
    let norm: Norm = parse_flag("norm", &resolve(args.norm, cfg.get("norm")?, "l2".into()))?;
    let loss_kind: LossKind =
        parse_flag("loss", &resolve(args.loss, cfg.get("loss")?, "f3".into()))?;
    let targets = parse_targets(&resolve(args.targets, cfg.get("targets")?, "all".into()))?;
    let defence_min_area = resolve(args.defence_min_area, cfg.get("defence-min-area")?, 0.0);
    let jobs = resolve(args.jobs, cfg.get("jobs")?, 0usize); // 0: rayon default

    let mut attack = AttackConfig::new(0.3, targets, norm);
    attack.loss_kind = loss_kind;
    attack.eta = resolve(args.eta, cfg.get("eta")?, attack.eta);
    attack.max_iteration = resolve(args.max_iter, cfg.get("max-iter")?, attack.max_iteration);
    attack.binary_steps = resolve(args.binary_steps, cfg.get("binary-steps")?, attack.binary_steps);
    attack.seed = resolve(args.seed, cfg.get("seed")?, attack.seed);

    for &g in &gammas {
        if !(0.0..1.0).contains(&g) {
            return Err(Error::invalid(format!("gamma {g} outside [0, 1)")));
        }
    }

    let models = load_models(&args.model)?;
    let scenes = load_scene_dir(&args.scenes)?;
    let model_refs: Vec<&DetectorModel> = models.iter().collect();
    let sweep_cfg = SweepConfig {
        gammas: gammas.clone(),
        nts: nts.clone(),
        iou_matches: vec![0.5, 0.75],
        nms_kind,
        soft_sigma: 0.5,
        soft_score_floor: 0.001,
        defence_min_area,
        objectness_threshold: 0.5,
        attack,
    };

    let report = if jobs > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
        pool.install(|| run_sweep(&scenes, &model_refs, &sweep_cfg))
    } else {
        run_sweep(&scenes, &model_refs, &sweep_cfg)
    };
    report.write_csv(&args.out)?;

    let mut manifest = Manifest::new("sweep");
    manifest.set("gammas", gammas.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","));
    manifest.set("nts", nts.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","));
    manifest.set("nms", format!("{nms_kind:?}"));
    manifest.set("defence_min_area", defence_min_area);
    manifest.set("norm", format!("{norm:?}").to_lowercase());
    manifest.set("loss", format!("{loss_kind:?}").to_lowercase());
    manifest.set("rows", report.rows.len());
    for m in args.model.split(',') {
        manifest.add_input(Path::new(m.trim()))?;
    }
    manifest.add_output(&args.out)?;
    manifest.write(&sidecar(&args.out, "manifest", "json"))?;

    println!("{} report rows written to {}", report.rows.len(), args.out.display());
    Ok(())
}

// ── poster ──────────────────────────────────────────────────────────────

pub fn poster(args: PosterArgs, cfg: &ConfigFile) -> Result<()> {
    let size = resolve(args.size, cfg.get("size")?, 32usize);
    let beta = resolve(args.beta, cfg.get("beta")?, 0.01f64);
    let steps = resolve(args.steps, cfg.get("steps")?, 400usize);
    let samples_per_step = resolve(args.samples_per_step, cfg.get("samples-per-step")?, 8usize);
    let eta = resolve(args.eta, cfg.get("eta")?, 0.05f64);
    let seed = resolve(args.seed, cfg.get("seed")?, 0u64);
    let palette_size = resolve(args.palette_size, cfg.get("palette-size")?, 32usize);
    let targets = parse_targets(&resolve(args.targets, cfg.get("targets")?, "all".into()))?;

    let models = load_models(&args.model)?;
    let scenes = load_scene_dir(&args.scenes)?;
    let model_refs: Vec<&DetectorModel> = models.iter().collect();

    let mut acfg = AttackConfig::new(0.3, targets, Norm::L2);
    acfg.eta = eta;
    acfg.max_iteration = steps;
    acfg.seed = seed;
    let mut opts = PosterOptions::new(size, beta);
    opts.samples_per_step = samples_per_step;
    opts.palette = default_palette(seed ^ 0x70a1e77e, palette_size);

    let run = optimize_poster(&scenes, &model_refs, &acfg, &opts)?;
    println!(
        "poster objective {:.4} -> {:.4} over {} steps (final snps {:.3e})",
        run.step_losses.first().unwrap_or(&f64::NAN),
        run.step_losses.last().unwrap_or(&f64::NAN),
        steps,
        run.final_snps
    );

    // hash of the consumed scene corpus for the sidecar
    let mut scene_hash = sha2::Sha256::new();
    use sha2::Digest;
    for (i, _) in scenes.iter().enumerate() {
        let stem = scenes::scene_file_stem(i);
        let p = args.scenes.join(format!("{stem}.png"));
        if let Ok(bytes) = std::fs::read(&p) {
            scene_hash.update(&bytes);
        }
    }
    let meta = PosterMeta {
        seed,
        beta,
        palette_sha256: palette_hash(&opts.palette),
        scenes_sha256: hex::encode(scene_hash.finalize()),
    };
    save_poster(&run.poster, &meta, &args.out)?;

    let mut manifest = Manifest::new("poster");
    manifest.set("size", size);
    manifest.set("beta", beta);
    manifest.set("steps", steps);
    manifest.set("samples_per_step", samples_per_step);
    manifest.set("eta", eta);
    manifest.set("seed", seed);
    manifest.set("palette_size", palette_size);
    for m in args.model.split(',') {
        manifest.add_input(Path::new(m.trim()))?;
    }
    manifest.add_output(&args.out)?;
    manifest.add_output(&args.out.with_extension("json"))?;
    manifest.write(&sidecar(&args.out, "manifest", "json"))?;

    println!("poster written to {}", args.out.display());
    Ok(())
}

// used by gen_scenes error path logging; keep the path type alias local
#[allow(dead_code)]
type _P = PathBuf;
