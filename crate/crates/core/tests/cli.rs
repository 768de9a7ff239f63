//! End-to-end tests of the `daedalus` binary: flags, config precedence,
//! artifact layout, exit codes, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use daedalus::detector::{build_micro, save_model, Variant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_daedalus"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn sha256(path: &Path) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(std::fs::read(path).unwrap()))
}

fn gen_scenes(dir: &Path, count: usize, size: usize) {
    let out = run(&[
        "gen-scenes",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--seed",
        "5",
        "--size",
        &size.to_string(),
        "--max-objects",
        "3",
    ]);
    assert_exit(&out, 0);
}

fn small_model_file(dir: &Path, seed: u64, variant: Variant, side: usize) -> PathBuf {
    let path = dir.join(format!("model-{variant:?}-{seed}.bin"));
    let model = build_micro(seed, variant, 4, side).unwrap();
    save_model(&model, &path).unwrap();
    path
}

#[test]
fn gen_scenes_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("scenes");
    gen_scenes(&out_dir, 10, 64);
    let pngs = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".png")
        })
        .count();
    let jsons = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| {
            let n = e.as_ref().unwrap().file_name();
            let n = n.to_string_lossy();
            n.ends_with(".json") && n.starts_with("scene_")
        })
        .count();
    assert_eq!(pngs, 10);
    assert_eq!(jsons, 10);
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn gen_scenes_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    gen_scenes(&a, 3, 64);
    gen_scenes(&b, 3, 64);
    for stem in ["scene_0000.png", "scene_0002.json"] {
        assert_eq!(sha256(&a.join(stem)), sha256(&b.join(stem)), "{stem} differs");
    }
}

#[test]
fn gen_scenes_zero_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-scenes",
        "--out",
        dir.path().to_str().unwrap(),
        "--count",
        "0",
    ]);
    assert_exit(&out, 1);
}

#[test]
fn gen_scenes_unwritable_output_is_an_io_error() {
    let out = run(&["gen-scenes", "--out", "/proc/daedalus-nope", "--count", "1"]);
    assert_exit(&out, 2);
}

#[test]
fn train_zero_epochs_saves_the_seeded_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 4, 32);
    let model_out = dir.path().join("m.bin");
    let out = run(&[
        "train",
        "--scenes",
        scenes.to_str().unwrap(),
        "--variant",
        "A",
        "--epochs",
        "0",
        "--seed",
        "9",
        "--out",
        model_out.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    // byte-identical to a locally built untrained model
    let reference = small_model_file(dir.path(), 9, Variant::A, 32);
    assert_eq!(sha256(&model_out), sha256(&reference));
    assert!(dir.path().join("m.manifest.json").exists());
}

#[test]
fn train_rejects_corrupt_scene_sidecars_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 2, 32);
    std::fs::write(scenes.join("scene_0001.json"), "garbage").unwrap();
    let out = run(&[
        "train",
        "--scenes",
        scenes.to_str().unwrap(),
        "--epochs",
        "0",
        "--out",
        dir.path().join("m.bin").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("scene_0001.json"),
        "error must name the corrupt file"
    );
}

#[test]
fn train_empty_scene_dir_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = run(&[
        "train",
        "--scenes",
        empty.to_str().unwrap(),
        "--out",
        dir.path().join("m.bin").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn attack_gamma_out_of_range_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 1, 32);
    let model = small_model_file(dir.path(), 3, Variant::A, 32);
    let out = run(&[
        "attack",
        "--model",
        model.to_str().unwrap(),
        "--image",
        scenes.join("scene_0000.png").to_str().unwrap(),
        "--gamma",
        "1.5",
        "--max-iter",
        "2",
        "--out",
        dir.path().join("adv.png").to_str().unwrap(),
    ]);
    assert_exit(&out, 1);
}

#[test]
fn attack_image_model_mismatch_is_an_io_class_error() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 1, 64); // 64px scene, 32px model
    let model = small_model_file(dir.path(), 3, Variant::A, 32);
    let out = run(&[
        "attack",
        "--model",
        model.to_str().unwrap(),
        "--image",
        scenes.join("scene_0000.png").to_str().unwrap(),
        "--out",
        dir.path().join("adv.png").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn attack_gamma_zero_reproduces_the_input_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 1, 32);
    let model = small_model_file(dir.path(), 3, Variant::A, 32);
    let image = scenes.join("scene_0000.png");
    let adv = dir.path().join("adv.png");
    let trace = dir.path().join("trace.csv");
    let out = run(&[
        "attack",
        "--model",
        model.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--gamma",
        "0",
        "--max-iter",
        "3",
        "--binary-steps",
        "1",
        "--out",
        adv.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);

    let orig = daedalus::img::Image::load_png(&image).unwrap();
    let result = daedalus::img::Image::load_png(&adv).unwrap();
    assert_eq!(orig, result, "gamma 0 must leave the image untouched");

    assert!(dir.path().join("adv.delta.png").exists());
    assert!(trace.exists());
    let result_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("adv.result.json")).unwrap())
            .unwrap();
    assert_eq!(result_json["success"], serde_json::json!(true));
    assert_eq!(result_json["l0_distortion"], serde_json::json!(0));
    assert!(dir.path().join("adv.manifest.json").exists());
}

#[test]
fn attack_with_specific_target_masks_only_that_class() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 1, 32);
    let model = small_model_file(dir.path(), 3, Variant::A, 32);
    let adv = dir.path().join("adv.png");
    let out = run(&[
        "attack",
        "--model",
        model.to_str().unwrap(),
        "--image",
        scenes.join("scene_0000.png").to_str().unwrap(),
        "--gamma",
        "0.05",
        "--targets",
        "1",
        "--max-iter",
        "4",
        "--binary-steps",
        "1",
        "--out",
        adv.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let result_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("adv.result.json")).unwrap())
            .unwrap();
    assert_eq!(result_json["targets"], serde_json::json!([1]));
    let counts = result_json["selected_counts"].as_array().unwrap();
    assert_eq!(counts.len(), 1, "only the attacked class is audited");
    assert_eq!(counts[0][0], serde_json::json!(1));
}

#[test]
fn detect_emits_schema_compliant_json() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 1, 32);
    let model = small_model_file(dir.path(), 3, Variant::A, 32);
    let dets = dir.path().join("dets.json");
    let out = run(&[
        "detect",
        "--model",
        model.to_str().unwrap(),
        "--image",
        scenes.join("scene_0000.png").to_str().unwrap(),
        "--objectness",
        "0.0",
        "--out",
        dets.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&dets).unwrap()).unwrap();
    let boxes = parsed["boxes"].as_array().unwrap();
    assert!(!boxes.is_empty());
    assert!(boxes.len() <= 32, "at most grid^2 * anchors boxes, got {}", boxes.len());
    for b in boxes {
        for key in ["class_id", "score", "cx", "cy", "w", "h"] {
            assert!(b.get(key).is_some(), "missing key {key}");
        }
    }
}

#[test]
fn sweep_emits_the_published_grid_axes() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 1, 32);
    let model = small_model_file(dir.path(), 3, Variant::A, 32);
    let csv = dir.path().join("report.csv");
    let out = run(&[
        "sweep",
        "--model",
        model.to_str().unwrap(),
        "--scenes",
        scenes.to_str().unwrap(),
        "--gammas",
        "0.1:0.9:0.1",
        "--nts",
        "0.5:0.95:0.05",
        "--max-iter",
        "2",
        "--binary-steps",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let body = std::fs::read_to_string(&csv).unwrap();
    let rows = body.lines().count() - 1; // header
    // 9 gammas x 10 NMS thresholds x 2 match thresholds
    assert_eq!(rows, 9 * 10 * 2);
    assert!(body.lines().nth(1).unwrap().starts_with("0.1,0.5,hard,"));
}

#[test]
fn config_file_fills_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 1, 32);
    let model = small_model_file(dir.path(), 3, Variant::A, 32);
    let cfg = dir.path().join("attack.cfg");
    std::fs::write(
        &cfg,
        "# attack settings\ngamma = 0.05\nmax-iter = 3\nbinary-steps = 1\n",
    )
    .unwrap();
    let adv = dir.path().join("adv.png");
    // config supplies gamma; flag overrides binary-steps
    let out = run(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--image",
        scenes.join("scene_0000.png").to_str().unwrap(),
        "--out",
        adv.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("adv.result.json")).unwrap())
            .unwrap();
    assert_eq!(result["gamma"], serde_json::json!(0.05));

    // the same config with a --gamma flag: the flag wins
    let out = run(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--image",
        scenes.join("scene_0000.png").to_str().unwrap(),
        "--gamma",
        "0",
        "--out",
        adv.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("adv.result.json")).unwrap())
            .unwrap();
    assert_eq!(result["gamma"], serde_json::json!(0.0));
}

#[test]
fn attack_artifacts_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 1, 32);
    let model = small_model_file(dir.path(), 3, Variant::A, 32);
    let mut hashes = Vec::new();
    for name in ["a.png", "b.png"] {
        let adv = dir.path().join(name);
        let out = run(&[
            "attack",
            "--model",
            model.to_str().unwrap(),
            "--image",
            scenes.join("scene_0000.png").to_str().unwrap(),
            "--gamma",
            "0.05",
            "--max-iter",
            "5",
            "--binary-steps",
            "1",
            "--out",
            adv.to_str().unwrap(),
        ]);
        assert_exit(&out, 0);
        hashes.push(sha256(&adv));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn poster_writes_png_sidecar_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    gen_scenes(&scenes, 2, 32);
    let model = small_model_file(dir.path(), 3, Variant::A, 32);
    let poster = dir.path().join("poster.png");
    let out = run(&[
        "poster",
        "--scenes",
        scenes.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--size",
        "8",
        "--steps",
        "3",
        "--samples-per-step",
        "2",
        "--out",
        poster.to_str().unwrap(),
    ]);
    assert_exit(&out, 0);
    assert!(poster.exists());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(poster.with_extension("json")).unwrap())
            .unwrap();
    assert!(sidecar.get("palette_sha256").is_some());
    assert!(dir.path().join("poster.manifest.json").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["detect", "--bogus-flag", "x"]);
    assert_exit(&out, 1);
}

#[test]
fn help_exits_cleanly() {
    let out = run(&["--help"]);
    assert_exit(&out, 0);
}
