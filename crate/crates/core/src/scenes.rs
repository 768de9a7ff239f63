//! Procedural synthetic scenes with analytic ground truth.
//!
//! Four shape classes on textured noise backgrounds: red squares, green
//! circles, blue triangles, yellow bars. Ground-truth boxes are the exact
//! pixel bounding boxes of the rasterized shapes, so there is no labeling
//! noise anywhere in the corpus.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::img::Image;
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["red-square", "green-circle", "blue-triangle", "yellow-bar"];

/// A ground-truth object: class plus its box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GtBox {
    pub fn to_box(self) -> crate::geometry::Box {
        crate::geometry::Box::new(self.cx, self.cy, self.w, self.h, self.class_id, 1.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// One synthetic scene: an image and its exact ground truth.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Image,
    pub truths: Vec<GtBox>,
    pub seed: u64,
}

/// Deterministic scene generation. With a fixed `seed` the output is
/// bit-identical across runs.
///
/// Objects are placed by rejection sampling so no two ground-truth boxes
/// overlap with IoU above 0.3; after 100 failed placements the scene simply
/// carries fewer objects.
pub fn generate(seed: u64, count: usize, size: usize, max_objects: usize) -> Vec<Scene> {
    generate_detailed(seed, count, size, max_objects)
        .into_iter()
        .map(|(scene, _)| scene)
        .collect()
}

/// Pixel coordinates drawn for one object (used by the tightness audit).
pub(crate) type ShapePixels = Vec<(usize, usize)>;

pub(crate) fn generate_detailed(
    seed: u64,
    count: usize,
    size: usize,
    max_objects: usize,
) -> Vec<(Scene, Vec<ShapePixels>)> {
    assert!(size >= 32, "scenes below 32 px leave no room for shapes");
    (0..count)
        .map(|i| {
            // one independent stream per scene so count changes do not
            // reshuffle earlier scenes
            let scene_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
            generate_one(scene_seed, size, max_objects)
        })
        .collect()
}

fn generate_one(seed: u64, size: usize, max_objects: usize) -> (Scene, Vec<ShapePixels>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = textured_background(&mut rng, size);

    let target = if max_objects == 0 { 0 } else { rng.gen_range(0..=max_objects) };
    let mut truths: Vec<GtBox> = Vec::new();
    let mut masks: Vec<ShapePixels> = Vec::new();

    for _ in 0..target {
        let mut placed = false;
        for _attempt in 0..100 {
            let class_id = rng.gen_range(0..NUM_CLASSES);
            let patch = rasterize_shape(&mut rng, class_id, size);
            let gt = patch.ground_truth(class_id);
            let candidate = gt.to_box();
            let clear = truths
                .iter()
                .all(|t| crate::geometry::iou(&t.to_box(), &candidate) <= 0.3);
            if !clear {
                continue;
            }
            for &(x, y) in &patch.pixels {
                for c in 0..3 {
                    image.set(c, y, x, patch.color[c]);
                }
            }
            truths.push(gt);
            masks.push(patch.pixels);
            placed = true;
            break;
        }
        if !placed {
            break; // record the actual (smaller) object count
        }
    }

    (Scene { image, truths, seed }, masks)
}

fn textured_background(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let mut img = Image::zeros(size, size);
    // coarse value-noise grid, bilinearly upsampled, plus fine grain
    const GRID: usize = 8;
    let mut coarse = [[[0.0f64; GRID + 1]; GRID + 1]; 3];
    let base: [f64; 3] = [
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.15..0.45),
        rng.gen_range(0.15..0.45),
    ];
    for plane in coarse.iter_mut() {
        for row in plane.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(-0.08..0.08);
            }
        }
    }
    let cell = size as f64 / GRID as f64;
    for y in 0..size {
        for x in 0..size {
            let gx = x as f64 / cell;
            let gy = y as f64 / cell;
            let (ix, iy) = (gx as usize, gy as usize);
            let (fx, fy) = (gx - ix as f64, gy - iy as f64);
            for c in 0..3 {
                let p = &coarse[c];
                let v = p[iy][ix] * (1.0 - fx) * (1.0 - fy)
                    + p[iy][ix + 1] * fx * (1.0 - fy)
                    + p[iy + 1][ix] * (1.0 - fx) * fy
                    + p[iy + 1][ix + 1] * fx * fy;
                let grain = rng.gen_range(-0.02..0.02);
                img.set(c, y, x, (base[c] + v + grain).clamp(0.0, 1.0));
            }
        }
    }
    img
}

struct ShapePatch {
    pixels: ShapePixels,
    color: [f64; 3],
}

impl ShapePatch {
    /// The exact pixel bounding box: the continuous box spanning every drawn
    /// pixel cell.
    fn ground_truth(&self, class_id: usize) -> GtBox {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for &(x, y) in &self.pixels {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let w = (x1 - x0 + 1) as f64;
        let h = (y1 - y0 + 1) as f64;
        GtBox { class_id, cx: x0 as f64 + w / 2.0, cy: y0 as f64 + h / 2.0, w, h }
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    let mut c = base;
    for v in c.iter_mut() {
        *v = (*v + rng.gen_range(-0.12..0.12)).clamp(0.0, 1.0);
    }
    c
}

fn rasterize_shape(rng: &mut ChaCha8Rng, class_id: usize, size: usize) -> ShapePatch {
    let margin = 1usize;
    match class_id {
        0 => {
            // red square
            let side = rng.gen_range(6..=16usize);
            let x0 = rng.gen_range(margin..size - margin - side);
            let y0 = rng.gen_range(margin..size - margin - side);
            let mut pixels = Vec::with_capacity(side * side);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    pixels.push((x, y));
                }
            }
            ShapePatch { pixels, color: jitter(rng, [0.85, 0.10, 0.10]) }
        }
        1 => {
            // green circle
            let r = rng.gen_range(3..=8usize);
            let cx = rng.gen_range(margin + r..size - margin - r);
            let cy = rng.gen_range(margin + r..size - margin - r);
            let mut pixels = Vec::new();
            let rf = r as f64;
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    let dx = x as f64 + 0.5 - (cx as f64 + 0.5);
                    let dy = y as f64 + 0.5 - (cy as f64 + 0.5);
                    if dx * dx + dy * dy <= rf * rf {
                        pixels.push((x, y));
                    }
                }
            }
            ShapePatch { pixels, color: jitter(rng, [0.10, 0.80, 0.15]) }
        }
        2 => {
            // blue triangle, apex up
            let base_w = rng.gen_range(7..=17usize);
            let height = rng.gen_range(6..=14usize);
            let x0 = rng.gen_range(margin..size - margin - base_w);
            let y0 = rng.gen_range(margin..size - margin - height);
            let mut pixels = Vec::new();
            let apex = x0 as f64 + base_w as f64 / 2.0;
            for k in 0..height {
                let half = base_w as f64 / 2.0 * (k as f64 + 1.0) / height as f64;
                let xs = (apex - half).ceil().max(0.0) as usize;
                let xe = ((apex + half).floor() as usize).min(size - 1);
                for x in xs..=xe {
                    pixels.push((x, y0 + k));
                }
            }
            ShapePatch { pixels, color: jitter(rng, [0.15, 0.20, 0.90]) }
        }
        _ => {
            // yellow bar
            let w = rng.gen_range(10..=20usize);
            let h = rng.gen_range(3..=6usize);
            let x0 = rng.gen_range(margin..size - margin - w);
            let y0 = rng.gen_range(margin..size - margin - h);
            let mut pixels = Vec::with_capacity(w * h);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    pixels.push((x, y));
                }
            }
            ShapePatch { pixels, color: jitter(rng, [0.92, 0.85, 0.10]) }
        }
    }
}

// ── persistence: PNG + JSON ground-truth sidecar ────────────────────────

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    seed: u64,
    objects: Vec<GtBox>,
}

pub fn scene_file_stem(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Write `scene` as `<dir>/scene_NNNN.png` + `.json`.
pub fn save_scene(dir: impl AsRef<Path>, index: usize, scene: &Scene) -> Result<()> {
    let dir = dir.as_ref();
    let stem = scene_file_stem(index);
    scene.image.save_png(dir.join(format!("{stem}.png")))?;
    let meta = SceneMeta { seed: scene.seed, objects: scene.truths.clone() };
    let json_path = dir.join(format!("{stem}.json"));
    let body = serde_json::to_string_pretty(&meta).expect("scene meta serializes");
    fs::write(&json_path, body).map_err(|e| Error::io(json_path.display().to_string(), e))
}

/// Load every `scene_*.png` + sidecar pair from a directory, sorted by name.
pub fn load_scenes(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let entries =
        fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut stems: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".png").map(|s| s.to_string())
        })
        .filter(|s| s.starts_with("scene_"))
        .collect();
    stems.sort();

    let mut scenes = Vec::with_capacity(stems.len());
    for stem in stems {
        let png = dir.join(format!("{stem}.png"));
        let json = dir.join(format!("{stem}.json"));
        let image = Image::load_png(&png)?;
        let body = fs::read_to_string(&json)
            .map_err(|e| Error::io(json.display().to_string(), e))?;
        let meta: SceneMeta = serde_json::from_str(&body).map_err(|e| Error::Format {
            path: json.display().to_string(),
            detail: e.to_string(),
        })?;
        scenes.push(Scene { image, truths: meta.objects, seed: meta.seed });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(99, 3, 64, 4);
        let b = generate(99, 3, 64, 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.truths, y.truths);
        }
    }

    #[test]
    fn zero_max_objects_yields_background_only() {
        for scene in generate(7, 5, 64, 0) {
            assert!(scene.truths.is_empty());
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for scene in generate(3, 5, 64, 4) {
            assert!(scene.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn ground_truth_boxes_tightly_contain_their_shapes() {
        for (scene, masks) in generate_detailed(11, 20, 64, 4) {
            assert_eq!(scene.truths.len(), masks.len());
            for (gt, mask) in scene.truths.iter().zip(&masks) {
                let (x1, y1) = (gt.cx - gt.w / 2.0, gt.cy - gt.h / 2.0);
                let (x2, y2) = (gt.cx + gt.w / 2.0, gt.cy + gt.h / 2.0);
                let (mut mx0, mut my0, mut mx1, mut my1) =
                    (usize::MAX, usize::MAX, 0usize, 0usize);
                for &(x, y) in mask {
                    // pixel center inside the box
                    assert!(x as f64 + 0.5 > x1 && (x as f64) + 0.5 < x2);
                    assert!(y as f64 + 0.5 > y1 && (y as f64) + 0.5 < y2);
                    mx0 = mx0.min(x);
                    my0 = my0.min(y);
                    mx1 = mx1.max(x);
                    my1 = my1.max(y);
                }
                // and tight: the box hugs the drawn extent exactly
                assert_eq!(mx0 as f64, x1);
                assert_eq!(my0 as f64, y1);
                assert_eq!((mx1 + 1) as f64, x2);
                assert_eq!((my1 + 1) as f64, y2);
            }
        }
    }

    #[test]
    fn placed_objects_respect_the_overlap_bound() {
        for scene in generate(13, 30, 64, 4) {
            for (i, a) in scene.truths.iter().enumerate() {
                for b in &scene.truths[i + 1..] {
                    assert!(crate::geometry::iou(&a.to_box(), &b.to_box()) <= 0.3);
                }
            }
        }
    }

    #[test]
    fn shapes_meet_the_minimum_area() {
        for scene in generate(17, 50, 64, 4) {
            for t in &scene.truths {
                assert!(t.area() >= 16.0, "area {}", t.area());
            }
        }
    }

    #[test]
    fn class_frequencies_are_near_uniform() {
        let mut counts = [0usize; NUM_CLASSES];
        for scene in generate(2025, 1000, 64, 4) {
            for t in &scene.truths {
                counts[t.class_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        assert!(total > 1000, "expected a sizable object corpus, got {total}");
        let uniform = total as f64 / NUM_CLASSES as f64;
        for (c, &n) in counts.iter().enumerate() {
            let dev = (n as f64 - uniform).abs() / uniform;
            assert!(dev <= 0.10, "class {c}: count {n} deviates {dev:.3} from uniform");
        }
    }

    #[test]
    fn save_load_round_trip_preserves_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate(5, 4, 64, 4);
        for (i, s) in scenes.iter().enumerate() {
            save_scene(dir.path(), i, s).unwrap();
        }
        let loaded = load_scenes(dir.path()).unwrap();
        assert_eq!(loaded.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(a.truths, b.truths);
            // pixels go through 8-bit quantization
            let mut q = a.image.clone();
            q.quantize8();
            assert_eq!(q, b.image);
        }
    }

    #[test]
    fn corrupt_sidecar_reports_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate(5, 1, 64, 4);
        save_scene(dir.path(), 0, &scenes[0]).unwrap();
        std::fs::write(dir.path().join("scene_0000.json"), "{ not json").unwrap();
        let err = load_scenes(dir.path()).unwrap_err();
        match err {
            crate::Error::Format { path, .. } => assert!(path.contains("scene_0000.json")),
            other => panic!("expected format error, got {other}"),
        }
    }
}
