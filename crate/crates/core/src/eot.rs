//! Digitally simulated physical attack: a standalone perturbation poster
//! optimized under an expectation over random transformations, plus a
//! sub-sampled non-printability score (SNPS).
//!
//! Transform parameters follow the published ranges: per-pixel additive
//! noise U(0, 0.01); zoom between 0.1 and 0.7 of the tightest frame/poster
//! ratio; rotation within ±π/10; position uniform over placements that keep
//! the scaled poster inside the frame. Pasting uses bilinear interpolation,
//! which is linear in the poster pixels and therefore cleanly differentiable
//! (nearest-neighbour would kill the gradients).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::autodiff::{check_gradient, NodeId, PasteTap, Tape, Tensor, TensorMap};
use crate::detector::{DetectorModel, WeightMode};
use crate::img::Image;
use crate::losses::{
    append_loss, bind_masks, category_masks, BoxNodes, CategoryMask, LossKind, LossNodes,
    TargetSet,
};
use crate::scenes::Scene;
use crate::{Error, Result};

pub const ROTATION_LIMIT: f64 = std::f64::consts::PI / 10.0;
pub const NOISE_LIMIT: f64 = 0.01;
pub const ZOOM_LO_FACTOR: f64 = 0.1;
pub const ZOOM_HI_FACTOR: f64 = 0.7;

/// One sampled transformation of the poster into a frame.
#[derive(Clone, Debug)]
pub struct TransformSample {
    /// Additive per-pixel noise field over the whole frame, `[3, hv, wv]`.
    pub noise: Tensor,
    /// `(416/w_v, 416/h_v)`: the frame-to-detector scale pair. Our frames
    /// are already detector-sized, so this is bookkeeping only.
    pub aspect_ratio: (f64, f64),
    pub zoom: f64,
    /// Radians, within ±π/10.
    pub rotation: f64,
    /// Top-left paste position in frame pixels.
    pub position: (f64, f64),
}

/// Draw one transform from the published ranges.
pub fn sample_transform(
    rng: &mut ChaCha8Rng,
    frame_dims: (usize, usize), // (w_v, h_v)
    poster_dims: (usize, usize), // (w_p, h_p)
) -> Result<TransformSample> {
    let (wv, hv) = frame_dims;
    let (wp, hp) = poster_dims;
    if wv == 0 || hv == 0 || wp == 0 || hp == 0 {
        return Err(Error::invalid("degenerate frame or poster dimensions"));
    }
    let ratio = (wv as f64 / wp as f64).min(hv as f64 / hp as f64);
    let (z_lo, z_hi) = (ZOOM_LO_FACTOR * ratio, ZOOM_HI_FACTOR * ratio);
    if !(z_lo > 0.0 && z_hi > z_lo) {
        return Err(Error::invalid("infeasible zoom range"));
    }
    let noise = Tensor::new(
        vec![3, hv, wv],
        (0..3 * hv * wv).map(|_| rng.gen_range(0.0..NOISE_LIMIT)).collect(),
    );
    let zoom = rng.gen_range(z_lo..z_hi);
    let rotation = rng.gen_range(-ROTATION_LIMIT..ROTATION_LIMIT);
    let x_max = (wv as f64 - zoom * wp as f64).max(0.0);
    let y_max = (hv as f64 - zoom * hp as f64).max(0.0);
    let position = (rng.gen_range(0.0..=x_max), rng.gen_range(0.0..=y_max));
    Ok(TransformSample {
        noise,
        aspect_ratio: (416.0 / wv as f64, 416.0 / hv as f64),
        zoom,
        rotation,
        position,
    })
}

/// A perturbation poster with its SNPS sample rate and printable palette.
#[derive(Clone, Debug)]
pub struct Poster {
    pub image: Image,
    pub beta: f64,
    pub palette: Vec<[f64; 3]>,
}

/// A printable palette: colors sampled uniformly in RGB, seeded.
pub fn default_palette(seed: u64, count: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
        .collect()
}

/// Number of pixels the SNPS samples: `ceil(beta * w * h)`.
pub fn snps_sample_count(beta: f64, width: usize, height: usize) -> usize {
    (beta * (width * height) as f64).ceil() as usize
}

fn sample_pixel_indices(rng: &mut ChaCha8Rng, total: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    // partial Fisher-Yates: the first `count` entries are the sample
    let count = count.min(total);
    for i in 0..count {
        let j = rng.gen_range(i..total);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

/// Sub-sampled non-printability score: for `ceil(beta·w·h)` seeded pixel
/// positions, the product over palette colors of the Euclidean distance to
/// that color, summed over the sampled pixels. Zero iff every sampled pixel
/// is exactly a palette member.
pub fn snps(poster: &Poster, seed: u64) -> f64 {
    assert!(!poster.palette.is_empty(), "palette must not be empty");
    assert!(poster.beta > 0.0 && poster.beta <= 1.0, "beta must be in (0, 1]");
    let (w, h) = (poster.image.width(), poster.image.height());
    let count = snps_sample_count(poster.beta, w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_pixel_indices(&mut rng, w * h, count);
    let data = poster.image.data();
    let plane = w * h;
    picks
        .iter()
        .map(|&p| {
            let px = [data[p], data[plane + p], data[2 * plane + p]];
            poster
                .palette
                .iter()
                .map(|c| {
                    ((px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2) + (px[2] - c[2]).powi(2))
                        .sqrt()
                })
                .product::<f64>()
        })
        .sum()
}

// ── bilinear paste stencil ──────────────────────────────────────────────

pub(crate) struct PasteStencil {
    pub taps: Vec<PasteTap>,
    /// Spatial frame pixels replaced by poster content.
    pub covered: Vec<bool>,
}

/// Inverse-map every frame pixel into poster coordinates under (zoom,
/// rotation about the pasted-region center, translation) and collect the
/// bilinear taps of the covered pixels.
pub(crate) fn compute_stencil(
    frame_h: usize,
    frame_w: usize,
    poster_h: usize,
    poster_w: usize,
    t: &TransformSample,
) -> PasteStencil {
    let (sw, sh) = (t.zoom * poster_w as f64, t.zoom * poster_h as f64);
    let (x0, y0) = t.position;
    let (ccx, ccy) = (x0 + sw / 2.0, y0 + sh / 2.0);
    let (cos, sin) = (t.rotation.cos(), t.rotation.sin());

    // bounding region of the rotated rectangle
    let half_w = (sw / 2.0) * cos.abs() + (sh / 2.0) * sin.abs();
    let half_h = (sw / 2.0) * sin.abs() + (sh / 2.0) * cos.abs();
    let ox_lo = ((ccx - half_w).floor().max(0.0)) as usize;
    let ox_hi = ((ccx + half_w).ceil().min(frame_w as f64)) as usize;
    let oy_lo = ((ccy - half_h).floor().max(0.0)) as usize;
    let oy_hi = ((ccy + half_h).ceil().min(frame_h as f64)) as usize;

    let mut taps = Vec::new();
    let mut covered = vec![false; frame_h * frame_w];
    for oy in oy_lo..oy_hi {
        for ox in ox_lo..ox_hi {
            let px = ox as f64 + 0.5 - ccx;
            let py = oy as f64 + 0.5 - ccy;
            // rotate by -θ back into the unrotated scaled poster
            let vx = cos * px + sin * py + sw / 2.0;
            let vy = -sin * px + cos * py + sh / 2.0;
            if vx < 0.0 || vx > sw || vy < 0.0 || vy > sh {
                continue;
            }
            let (ux, uy) = (vx / t.zoom, vy / t.zoom);
            covered[oy * frame_w + ox] = true;
            let sx = ux - 0.5;
            let sy = uy - 0.5;
            let ix = sx.floor();
            let iy = sy.floor();
            let (fx, fy) = (sx - ix, sy - iy);
            let clamp_x = |v: f64| (v.max(0.0) as usize).min(poster_w - 1);
            let clamp_y = |v: f64| (v.max(0.0) as usize).min(poster_h - 1);
            let corners = [
                (clamp_y(iy), clamp_x(ix), (1.0 - fx) * (1.0 - fy)),
                (clamp_y(iy), clamp_x(ix + 1.0), fx * (1.0 - fy)),
                (clamp_y(iy + 1.0), clamp_x(ix), (1.0 - fx) * fy),
                (clamp_y(iy + 1.0), clamp_x(ix + 1.0), fx * fy),
            ];
            for (cy, cx, w) in corners {
                if w != 0.0 {
                    taps.push(PasteTap {
                        out_px: (oy * frame_w + ox) as u32,
                        in_px: (cy * poster_w + cx) as u32,
                        weight: w,
                    });
                }
            }
        }
    }
    PasteStencil { taps, covered }
}

/// Paste the poster into a frame under the sampled transform, add the noise
/// field, clip to `[0, 1]`.
pub fn apply_transform(frame: &Image, poster: &Poster, t: &TransformSample) -> Image {
    let (fh, fw) = (frame.height(), frame.width());
    let (ph, pw) = (poster.image.height(), poster.image.width());
    let stencil = compute_stencil(fh, fw, ph, pw, t);
    let plane = fh * fw;
    let p_plane = ph * pw;
    let mut out = frame.tensor().clone();
    {
        let data = out.data_mut();
        for (p, &cov) in stencil.covered.iter().enumerate() {
            if cov {
                for c in 0..3 {
                    data[c * plane + p] = 0.0;
                }
            }
        }
        let pd = poster.image.data();
        for tap in &stencil.taps {
            for c in 0..3 {
                data[c * plane + tap.out_px as usize] +=
                    tap.weight * pd[c * p_plane + tap.in_px as usize];
            }
        }
        for (v, n) in data.iter_mut().zip(t.noise.data()) {
            *v = (*v + n).clamp(0.0, 1.0);
        }
    }
    Image::new(out)
}

// ── the EoT objective on a tape ─────────────────────────────────────────

struct SampleGraph {
    tape: Tape,
    loss_graphs: Vec<(crate::detector::DecodeNodes, LossNodes)>,
    objective: NodeId,
    watermark: NodeId,
}

/// Build `poster -> paste -> detector(s) -> f3` for one (scene, transform)
/// sample. With `reparameterize` the poster input is ω and pixels are
/// `½(tanh ω + 1)`; without, the poster pixels are the input (gradient
/// checks use that form).
fn build_sample_graph(
    models: &[&DetectorModel],
    scene: &Image,
    t: &TransformSample,
    targets: &TargetSet,
    poster_side: usize,
    reparameterize: bool,
) -> Result<SampleGraph> {
    let side = scene.height();
    let stencil = compute_stencil(side, side, poster_side, poster_side, t);
    let plane = side * side;
    let mut base = scene.tensor().clone();
    {
        let data = base.data_mut();
        for (p, &cov) in stencil.covered.iter().enumerate() {
            if cov {
                for c in 0..3 {
                    data[c * plane + p] = 0.0;
                }
            }
        }
    }

    let mut tape = Tape::new();
    let input = tape.input("poster", vec![3, poster_side, poster_side]);
    let pixels = if reparameterize {
        let th = tape.tanh(input);
        let one = tape.constant_scalar(1.0);
        let shifted = tape.add(th, one)?;
        let half = tape.constant_scalar(0.5);
        tape.mul(shifted, half)?
    } else {
        input
    };
    let pasted = tape.bilinear_paste(pixels, base, stencil.taps)?;
    let noise = tape.constant(t.noise.clone());
    let noised = tape.add(pasted, noise)?;
    let frame = tape.clamp01(noised)?;

    // decodes before selector inputs; see LossEvaluator::new
    let mut decodes = Vec::with_capacity(models.len());
    for model in models {
        let (raw, _) = model.append_backbone(&mut tape, frame, &WeightMode::Baked)?;
        decodes.push(model.append_decode(&mut tape, raw)?);
    }
    let mut loss_graphs = Vec::with_capacity(models.len());
    for (idx, decode) in decodes.into_iter().enumerate() {
        let loss = append_loss(
            &mut tape,
            &BoxNodes::from(&decode),
            LossKind::F3,
            targets,
            side as f64,
            side as f64,
            &format!("m{idx}/"),
        )?;
        loss_graphs.push((decode, loss));
    }
    let mut acc = loss_graphs[0].1.total;
    for g in &loss_graphs[1..] {
        acc = tape.add(acc, g.1.total)?;
    }
    let inv = tape.constant_scalar(1.0 / models.len() as f64);
    let objective = tape.mul(acc, inv)?;
    let watermark = loss_graphs.iter().map(|g| g.0.watermark()).max().unwrap();
    Ok(SampleGraph { tape, loss_graphs, objective, watermark })
}

impl SampleGraph {
    fn loss_and_gradient(&self, poster_binding: &Tensor, targets: &TargetSet) -> Result<(f64, Tensor)> {
        let mut ev = self.tape.evaluation();
        ev.bind("poster", poster_binding.clone())?;
        ev.run_until(self.watermark)?;
        let masks: Vec<Vec<CategoryMask>> = self
            .loss_graphs
            .iter()
            .map(|(d, _)| category_masks(ev.value(d.class_probs), targets))
            .collect();
        for ((_, l), m) in self.loss_graphs.iter().zip(&masks) {
            bind_masks(&mut ev, l, m)?;
        }
        ev.run()?;
        let loss = ev.value(self.objective).item();
        let id = self.tape.input_id("poster")?;
        let grad = ev.backward(self.objective, &[id])?.wrt("poster")?;
        Ok((loss, grad))
    }
}

/// SNPS over sampled pixels as a differentiable subgraph on ω.
fn build_snps_graph(
    poster_side: usize,
    palette: &[[f64; 3]],
    picks: &[usize],
) -> Result<(Tape, NodeId)> {
    let mut tape = Tape::new();
    let input = tape.input("poster", vec![3, poster_side, poster_side]);
    let th = tape.tanh(input);
    let one = tape.constant_scalar(1.0);
    let shifted = tape.add(th, one)?;
    let half = tape.constant_scalar(0.5);
    let pixels = tape.mul(shifted, half)?;

    let guard = tape.constant_scalar(1e-12);
    let mut per_pixel = Vec::with_capacity(picks.len());
    for &p in picks {
        let (y, x) = (p / poster_side, p % poster_side);
        let row = tape.slice(pixels, 1, y, 1)?;
        let cell = tape.slice(row, 2, x, 1)?;
        let px = tape.reshape(cell, vec![3])?;
        let mut product: Option<NodeId> = None;
        for color in palette {
            let c = tape.constant(Tensor::new(vec![3], color.to_vec()));
            let d = tape.sub(px, c)?;
            let d2 = tape.square(d);
            let s = tape.sum(d2);
            let s_guarded = tape.add(s, guard)?;
            let dist = tape.sqrt(s_guarded);
            product = Some(match product {
                None => dist,
                Some(acc) => tape.mul(acc, dist)?,
            });
        }
        per_pixel.push(product.expect("non-empty palette"));
    }
    let mut total = per_pixel[0];
    for &n in &per_pixel[1..] {
        total = tape.add(total, n)?;
    }
    Ok((tape, total))
}

// ── poster optimization ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PosterOptions {
    pub poster_side: usize,
    pub beta: f64,
    pub samples_per_step: usize,
    pub palette: Vec<[f64; 3]>,
    /// Freeze the transform to identity placement (degenerate EoT, used by
    /// tests to reduce the poster attack to a plain region-restricted one).
    pub identity_transform: bool,
    /// Drop the SNPS term (ablation).
    pub include_snps: bool,
}

impl PosterOptions {
    pub fn new(poster_side: usize, beta: f64) -> Self {
        PosterOptions {
            poster_side,
            beta,
            samples_per_step: 8,
            palette: default_palette(0xDAEDA1, 32),
            identity_transform: false,
            include_snps: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PosterRun {
    pub poster: Poster,
    /// Monte-Carlo objective estimate per step (mean f3 + snps).
    pub step_losses: Vec<f64>,
    pub final_snps: f64,
}

fn identity_sample(frame_side: usize) -> TransformSample {
    TransformSample {
        noise: Tensor::zeros(vec![3, frame_side, frame_side]),
        aspect_ratio: (416.0 / frame_side as f64, 416.0 / frame_side as f64),
        zoom: 1.0,
        rotation: 0.0,
        position: (0.0, 0.0),
    }
}

/// Gradient descent on poster pixels minimizing the Monte-Carlo estimate of
/// `E_scenes E_transforms f3(composite) + SNPS(poster)`. Poster pixels stay
/// in `[0,1]` through the tanh reparameterization.
pub fn optimize_poster(
    scenes: &[Scene],
    models: &[&DetectorModel],
    cfg: &AttackConfig,
    opts: &PosterOptions,
) -> Result<PosterRun> {
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to optimize over"));
    }
    if opts.palette.is_empty() {
        return Err(Error::invalid("palette must not be empty"));
    }
    if !(opts.beta > 0.0 && opts.beta <= 1.0) {
        return Err(Error::invalid("beta must be in (0, 1]"));
    }
    let side = models[0].input_side();
    for s in scenes {
        if s.image.height() != side || s.image.width() != side {
            return Err(Error::invalid("scene size does not match the models"));
        }
    }
    let ps = opts.poster_side;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // mid-gray start: ω = 0 maps to pixel 0.5
    let mut omega = Tensor::zeros(vec![3, ps, ps]);
    let mut step_losses = Vec::with_capacity(cfg.max_iteration);

    for _step in 0..cfg.max_iteration {
        let mut grad = Tensor::zeros(vec![3, ps, ps]);
        let mut f3_acc = 0.0;
        for _ in 0..opts.samples_per_step {
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            let t = if opts.identity_transform {
                identity_sample(side)
            } else {
                sample_transform(&mut rng, (side, side), (ps, ps))?
            };
            let graph =
                build_sample_graph(models, &scene.image, &t, &cfg.targets, ps, true)?;
            let (loss, g) = graph.loss_and_gradient(&omega, &cfg.targets)?;
            if !loss.is_finite() {
                return Err(Error::Numeric("poster objective became non-finite".into()));
            }
            f3_acc += loss;
            for (a, b) in grad.data_mut().iter_mut().zip(g.data()) {
                *a += b / opts.samples_per_step as f64;
            }
        }
        let mut objective = f3_acc / opts.samples_per_step as f64;
        if opts.include_snps {
            let picks = sample_pixel_indices(
                &mut rng,
                ps * ps,
                snps_sample_count(opts.beta, ps, ps),
            );
            let (snps_tape, snps_node) = build_snps_graph(ps, &opts.palette, &picks)?;
            let mut ev = snps_tape.evaluation();
            ev.bind("poster", omega.clone())?;
            ev.run()?;
            objective += ev.value(snps_node).item();
            let id = snps_tape.input_id("poster")?;
            let sg = ev.backward(snps_node, &[id])?.wrt("poster")?;
            for (a, b) in grad.data_mut().iter_mut().zip(sg.data()) {
                *a += b;
            }
        }
        step_losses.push(objective);
        for (w, g) in omega.data_mut().iter_mut().zip(grad.data()) {
            *w -= cfg.eta * g;
        }
    }

    let pixels = omega.map(|w| 0.5 * (w.tanh() + 1.0));
    let poster = Poster {
        image: Image::new(pixels),
        beta: opts.beta,
        palette: opts.palette.clone(),
    };
    let final_snps = snps(&poster, cfg.seed);
    Ok(PosterRun { poster, step_losses, final_snps })
}

/// Mean FP rate of the poster over freshly sampled transforms and scenes.
pub struct PosterEval {
    pub mean_fp: Option<f64>,
    pub frames_with_detections: usize,
    pub samples: usize,
}

pub fn evaluate_poster(
    poster: &Poster,
    scenes: &[Scene],
    model: &DetectorModel,
    detect_opts: &crate::detector::DetectOptions,
    samples: usize,
    seed: u64,
) -> Result<PosterEval> {
    let side = model.input_side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fps = Vec::new();
    for _ in 0..samples {
        let scene = &scenes[rng.gen_range(0..scenes.len())];
        let t = sample_transform(
            &mut rng,
            (side, side),
            (poster.image.width(), poster.image.height()),
        )?;
        let mut frame = apply_transform(&scene.image, poster, &t);
        frame.quantize8();
        let dets = crate::detector::detect(&frame, model, detect_opts)?;
        if let Some(fp) = crate::evaluation::fp_rate(&dets, &scene.truths, 0.5) {
            fps.push(fp);
        }
    }
    Ok(PosterEval {
        mean_fp: (!fps.is_empty()).then(|| fps.iter().sum::<f64>() / fps.len() as f64),
        frames_with_detections: fps.len(),
        samples,
    })
}

/// Check the poster-pixel gradient of the EoT objective against central
/// finite differences on one sample; returns the max relative error.
#[allow(clippy::too_many_arguments)]
pub fn check_poster_gradient(
    model: &DetectorModel,
    scene: &Image,
    t: &TransformSample,
    targets: &TargetSet,
    poster_side: usize,
    poster: &Tensor,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let graph = build_sample_graph(&[model], scene, t, targets, poster_side, false)?;
    // pin the selection masks so the finite differences see a smooth function
    let mut ev = graph.tape.evaluation();
    ev.bind("poster", poster.clone())?;
    ev.run_until(graph.watermark)?;
    let masks: Vec<Vec<CategoryMask>> = graph
        .loss_graphs
        .iter()
        .map(|(d, _)| category_masks(ev.value(d.class_probs), targets))
        .collect();
    let mut bindings = TensorMap::new();
    bindings.insert("poster".into(), poster.clone());
    for ((_, l), ms) in graph.loss_graphs.iter().zip(&masks) {
        for (names, m) in l.mask_inputs.iter().zip(ms) {
            bindings.insert(names.mask.clone(), m.mask.clone());
            bindings.insert(names.inv_count.clone(), Tensor::scalar(m.inv_count));
            if let Some(p) = &names.inv_pairs {
                bindings.insert(p.clone(), Tensor::scalar(m.inv_pairs));
            }
        }
    }
    check_gradient(&graph.tape, graph.objective, &bindings, "poster", 1e-4, samples, seed)
        .map_err(Error::Tape)
}

// ── persistence ─────────────────────────────────────────────────────────

/// Sidecar metadata saved next to a poster PNG.
#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct PosterMeta {
    pub seed: u64,
    pub beta: f64,
    pub palette_sha256: String,
    pub scenes_sha256: String,
}

/// Hash a palette (little-endian f64 triplets, in order).
pub fn palette_hash(palette: &[[f64; 3]]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for c in palette {
        for v in c {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Save the poster as 8-bit PNG plus `<path>.json` sidecar.
pub fn save_poster(poster: &Poster, meta: &PosterMeta, png_path: impl AsRef<std::path::Path>) -> Result<()> {
    let png_path = png_path.as_ref();
    poster.image.save_png(png_path)?;
    let sidecar = png_path.with_extension("json");
    let body = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&sidecar, body).map_err(|e| Error::io(sidecar.display().to_string(), e))
}
