//! A micro end-to-end fully-convolutional detector: a single-scale
//! YOLO-style head over a small conv backbone.
//!
//! The feature map carries, per cell and anchor, the raw offsets
//! `(t_x, t_y, t_w, t_h)`, an objectness value `t_0` and `K` class logits.
//! Decoding follows the usual conventions:
//!
//! ```text
//! b_x = (c_x + sigmoid(t_x)) * stride      b_w = p_w * exp(t_w)
//! b_y = (c_y + sigmoid(t_y)) * stride      b_h = p_h * exp(t_h)
//! b_0 = sigmoid(t_0) * max(softmax(class logits))
//! ```
//!
//! The whole pipeline — backbone, decode, box confidence — is expressed on
//! an [`autodiff`](crate::autodiff) tape, so gradients of any scalar loss
//! reach the input pixels (for attacks) or the weights (for training).

mod format;
mod train;

pub use format::{load_model, save_model};
pub use train::{train_micro, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape, TapeError, Tensor};
use crate::geometry::{
    dimension_floor_filter, nms, soft_nms, DetectionSet, SoftNmsMethod,
};
use crate::img::Image;
use crate::{Error, Result};

/// Anchor layout of the single-scale head.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    /// Cells per side.
    pub grid_s: usize,
    /// Pixels per cell; `grid_s * stride` is the input side length.
    pub stride: usize,
    /// Anchor box priors `(p_w, p_h)` in pixels.
    pub anchors: Vec<(f64, f64)>,
}

impl AnchorGrid {
    pub fn input_side(&self) -> usize {
        self.grid_s * self.stride
    }

    pub fn num_cells(&self) -> usize {
        self.grid_s * self.grid_s
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    /// Raw box count: constant per model, independent of image content.
    pub fn num_boxes(&self) -> usize {
        self.num_cells() * self.num_anchors()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::A => 0,
            Variant::B => 1,
            Variant::C => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::A),
            1 => Some(Variant::B),
            2 => Some(Variant::C),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            other => Err(format!("unknown variant '{other}' (expected A, B or C)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
}

/// One convolution layer of the backbone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// A micro detector: layer plan, weights, anchor grid, class count.
/// Immutable after construction or training.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub id: String,
    pub variant: Variant,
    pub layers: Vec<ConvSpec>,
    pub weights: Vec<LayerWeights>,
    pub grid: AnchorGrid,
    pub num_classes: usize,
}

impl DetectorModel {
    pub fn input_side(&self) -> usize {
        self.grid.input_side()
    }

    pub fn num_boxes(&self) -> usize {
        self.grid.num_boxes()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.kernel.len() + w.bias.len()).sum()
    }
}

/// Deterministic, seeded constructor. Variants differ in depth, width and
/// activation so their feature maps genuinely diverge:
///
/// * `A` — 4 conv layers, ReLU;
/// * `B` — 5 conv layers, leaky ReLU (0.1);
/// * `C` — 4 conv layers with different channel widths.
pub fn build_micro(seed: u64, variant: Variant, num_classes: usize, input_side: usize) -> Result<DetectorModel> {
    const STRIDE: usize = 8;
    if num_classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    if input_side == 0 || !input_side.is_multiple_of(STRIDE) {
        return Err(Error::invalid(format!(
            "input side {input_side} must be a positive multiple of {STRIDE}"
        )));
    }
    let head = 2 * (5 + num_classes); // two anchors
    let lrelu = Activation::LeakyRelu(0.1);
    let layers: Vec<ConvSpec> = match variant {
        Variant::A => vec![
            conv(3, 12, 3, 2, Activation::Relu),
            conv(12, 16, 3, 2, Activation::Relu),
            conv(16, 20, 3, 2, Activation::Relu),
            conv(20, head, 1, 1, Activation::None),
        ],
        Variant::B => vec![
            conv(3, 8, 3, 2, lrelu),
            conv(8, 12, 3, 1, lrelu),
            conv(12, 16, 3, 2, lrelu),
            conv(16, 20, 3, 2, lrelu),
            conv(20, head, 1, 1, Activation::None),
        ],
        Variant::C => vec![
            conv(3, 16, 3, 2, Activation::Relu),
            conv(16, 8, 3, 2, Activation::Relu),
            conv(8, 24, 3, 2, Activation::Relu),
            conv(24, head, 1, 1, Activation::None),
        ],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (variant.tag() as u64) << 56);
    let last = layers.len() - 1;
    let weights = layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            // Kaiming-uniform fan-in initialization; the detection head is
            // scaled down so raw offsets start near zero (boxes near their
            // priors) and early training cannot saturate the sigmoids
            let fan_in = (l.in_ch * l.kernel * l.kernel) as f64;
            let mut limit = (6.0 / fan_in).sqrt();
            if i == last {
                limit *= 0.1;
            }
            let klen = l.out_ch * l.in_ch * l.kernel * l.kernel;
            let kernel = Tensor::new(
                vec![l.out_ch, l.in_ch, l.kernel, l.kernel],
                (0..klen).map(|_| rng.gen_range(-limit..limit)).collect(),
            );
            LayerWeights { kernel, bias: Tensor::zeros(vec![l.out_ch]) }
        })
        .collect();

    let scale = input_side as f64 / 64.0;
    Ok(DetectorModel {
        id: format!("micro-{variant:?}-s{seed}"),
        variant,
        layers,
        weights,
        grid: AnchorGrid {
            grid_s: input_side / STRIDE,
            stride: STRIDE,
            anchors: vec![(12.0 * scale, 12.0 * scale), (24.0 * scale, 24.0 * scale)],
        },
        num_classes,
    })
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, activation: Activation) -> ConvSpec {
    ConvSpec { in_ch, out_ch, kernel, stride, activation }
}

// ── tape construction ──────────────────────────────────────────────────

/// How backbone weights enter a tape: baked constants (detection, attacks)
/// or named inputs (training, weight gradients).
pub enum WeightMode {
    Baked,
    Inputs { prefix: String },
}

/// Handles to the decoded, differentiable box tensors on a tape.
///
/// Box index `i = anchor * grid_s^2 + cell`, with `cell = y * grid_s + x`.
#[derive(Clone, Copy, Debug)]
pub struct DecodeNodes {
    /// Box centers and sizes in pixels, each `[n]`.
    pub bx: NodeId,
    pub by: NodeId,
    pub bw: NodeId,
    pub bh: NodeId,
    /// `sigmoid(t_0)`, `[n]`.
    pub objectness: NodeId,
    /// Softmax class distribution, `[K, n]`.
    pub class_probs: NodeId,
    /// `max(class_probs)` per box, `[n]`.
    pub pmax: NodeId,
    /// Box confidence `b_0 = objectness * pmax`, `[n]`.
    pub confidence: NodeId,
    pub n_boxes: usize,
}

impl DecodeNodes {
    /// Largest node id in the decode subgraph; `run_until` this watermark
    /// before reading class probabilities.
    pub fn watermark(&self) -> NodeId {
        *[self.bx, self.by, self.bw, self.bh, self.objectness, self.class_probs, self.pmax, self.confidence]
            .iter()
            .max()
            .unwrap()
    }
}

/// Per-anchor raw feature-map slices, each `[n_cells]` (logits `[K, n_cells]`).
pub(crate) struct AnchorSlices {
    pub tx: NodeId,
    pub ty: NodeId,
    pub tw: NodeId,
    pub th: NodeId,
    pub t0: NodeId,
    pub logits: NodeId,
}

impl DetectorModel {
    /// Append the conv backbone to `tape`, from `input` (`[3, S, S]`) to the
    /// raw feature map (`[A*(5+K), gs, gs]`). Returns the raw node and, in
    /// `Inputs` mode, the kernel/bias input node per layer.
    pub fn append_backbone(
        &self,
        tape: &mut Tape,
        input: NodeId,
        mode: &WeightMode,
    ) -> std::result::Result<(NodeId, Vec<(NodeId, NodeId)>), TapeError> {
        let mut x = input;
        let mut weight_nodes = Vec::new();
        for (i, (spec, w)) in self.layers.iter().zip(&self.weights).enumerate() {
            let (k, b) = match mode {
                WeightMode::Baked => (tape.constant(w.kernel.clone()), tape.constant(w.bias.clone())),
                WeightMode::Inputs { prefix } => {
                    let kn = tape.input(format!("{prefix}k{i}"), w.kernel.shape().to_vec());
                    let bn = tape.input(format!("{prefix}b{i}"), w.bias.shape().to_vec());
                    weight_nodes.push((kn, bn));
                    (kn, bn)
                }
            };
            let pad = spec.kernel / 2;
            x = tape.conv2d(x, k, b, spec.stride, pad)?;
            x = match spec.activation {
                Activation::None => x,
                Activation::Relu => tape.relu(x),
                Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
            };
        }
        Ok((x, weight_nodes))
    }

    pub(crate) fn append_head_slices(
        &self,
        tape: &mut Tape,
        raw: NodeId,
    ) -> std::result::Result<Vec<AnchorSlices>, TapeError> {
        let k = self.num_classes;
        let cells = self.grid.num_cells();
        let per_anchor = 5 + k;
        let mut out = Vec::with_capacity(self.grid.num_anchors());
        for a in 0..self.grid.num_anchors() {
            let base = a * per_anchor;
            let mut channel = |offset: usize| -> std::result::Result<NodeId, TapeError> {
                let s = tape.slice(raw, 0, base + offset, 1)?;
                tape.reshape(s, vec![cells])
            };
            let tx = channel(0)?;
            let ty = channel(1)?;
            let tw = channel(2)?;
            let th = channel(3)?;
            let t0 = channel(4)?;
            let ls = tape.slice(raw, 0, base + 5, k)?;
            let logits = tape.reshape(ls, vec![k, cells])?;
            out.push(AnchorSlices { tx, ty, tw, th, t0, logits });
        }
        Ok(out)
    }

    /// Append the feature-map decode to `tape`. Fully differentiable.
    pub fn append_decode(
        &self,
        tape: &mut Tape,
        raw: NodeId,
    ) -> std::result::Result<DecodeNodes, TapeError> {
        let gs = self.grid.grid_s;
        let cells = self.grid.num_cells();
        let stride = self.grid.stride as f64;
        let slices = self.append_head_slices(tape, raw)?;

        let cx_map = tape.constant(Tensor::new(
            vec![cells],
            (0..cells).map(|i| (i % gs) as f64).collect(),
        ));
        let cy_map = tape.constant(Tensor::new(
            vec![cells],
            (0..cells).map(|i| (i / gs) as f64).collect(),
        ));
        let stride_c = tape.constant_scalar(stride);

        let (mut bxs, mut bys, mut bws, mut bhs) = (vec![], vec![], vec![], vec![]);
        let (mut objs, mut probs_list, mut pmaxs, mut confs) = (vec![], vec![], vec![], vec![]);
        for (a, s) in slices.iter().enumerate() {
            let (pw, ph) = self.grid.anchors[a];
            let sx = tape.sigmoid(s.tx);
            let ox = tape.add(cx_map, sx)?;
            bxs.push(tape.mul(ox, stride_c)?);
            let sy = tape.sigmoid(s.ty);
            let oy = tape.add(cy_map, sy)?;
            bys.push(tape.mul(oy, stride_c)?);

            let ew = tape.exp(s.tw);
            let pw_c = tape.constant_scalar(pw);
            bws.push(tape.mul(ew, pw_c)?);
            let eh = tape.exp(s.th);
            let ph_c = tape.constant_scalar(ph);
            bhs.push(tape.mul(eh, ph_c)?);

            let obj = tape.sigmoid(s.t0);
            let probs = tape.softmax(s.logits, 0)?;
            let pmax = tape.max_axis(probs, 0)?;
            let conf = tape.mul(obj, pmax)?;
            objs.push(obj);
            probs_list.push(probs);
            pmaxs.push(pmax);
            confs.push(conf);
        }

        Ok(DecodeNodes {
            bx: tape.concat(&bxs, 0)?,
            by: tape.concat(&bys, 0)?,
            bw: tape.concat(&bws, 0)?,
            bh: tape.concat(&bhs, 0)?,
            objectness: tape.concat(&objs, 0)?,
            class_probs: tape.concat(&probs_list, 1)?,
            pmax: tape.concat(&pmaxs, 0)?,
            confidence: tape.concat(&confs, 0)?,
            n_boxes: self.num_boxes(),
        })
    }
}

/// A ready-to-run tape for one model: image input, baked weights, decode.
pub struct EvalTape {
    pub tape: Tape,
    pub image: NodeId,
    pub decode: DecodeNodes,
}

impl DetectorModel {
    pub fn build_eval_tape(&self) -> Result<EvalTape> {
        let side = self.input_side();
        let mut tape = Tape::new();
        let image = tape.input("image", vec![3, side, side]);
        let (raw, _) = self.append_backbone(&mut tape, image, &WeightMode::Baked)?;
        let decode = self.append_decode(&mut tape, raw)?;
        Ok(EvalTape { tape, image, decode })
    }
}

// ── detection pipeline ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NmsKind {
    Hard,
    SoftLinear,
    SoftGaussian,
}

impl std::str::FromStr for NmsKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hard" => Ok(NmsKind::Hard),
            "soft-linear" => Ok(NmsKind::SoftLinear),
            "soft-gaussian" => Ok(NmsKind::SoftGaussian),
            other => Err(format!(
                "unknown NMS kind '{other}' (expected hard, soft-linear or soft-gaussian)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetectOptions {
    /// Boxes with confidence `b_0` below this are discarded before NMS.
    pub objectness_threshold: f64,
    /// NMS / soft-NMS overlap threshold.
    pub nt: f64,
    pub nms_kind: NmsKind,
    pub soft_sigma: f64,
    pub soft_score_floor: f64,
    /// Dimension-floor defence; 0 disables it.
    pub defence_min_area: f64,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            objectness_threshold: 0.5,
            nt: 0.5,
            nms_kind: NmsKind::Hard,
            soft_sigma: 0.5,
            soft_score_floor: 0.001,
            defence_min_area: 0.0,
        }
    }
}

/// Raw decoded boxes of one forward pass (no filtering applied).
#[derive(Clone, Debug)]
pub struct DecodedBoxes {
    pub bx: Vec<f64>,
    pub by: Vec<f64>,
    pub bw: Vec<f64>,
    pub bh: Vec<f64>,
    pub confidence: Vec<f64>,
    pub class_ids: Vec<usize>,
}

impl DecodedBoxes {
    pub fn len(&self) -> usize {
        self.bx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bx.is_empty()
    }
}

/// Run the forward pass and read back the decoded box tensors.
pub fn decode_image(model: &DetectorModel, image: &Image) -> Result<DecodedBoxes> {
    let side = model.input_side();
    if image.height() != side || image.width() != side {
        return Err(Error::invalid(format!(
            "image is {}x{} but the model expects {side}x{side}",
            image.width(),
            image.height()
        )));
    }
    let et = model.build_eval_tape()?;
    let mut ev = et.tape.evaluation();
    ev.bind("image", image.tensor().clone()).map_err(Error::Tape)?;
    ev.run().map_err(Error::Tape)?;
    Ok(read_decoded(&ev, &et.decode, model.num_classes))
}

/// Read decoded tensors out of a completed evaluation.
pub fn read_decoded(
    ev: &crate::autodiff::Evaluation<'_>,
    d: &DecodeNodes,
    num_classes: usize,
) -> DecodedBoxes {
    let probs = ev.value(d.class_probs);
    let n = d.n_boxes;
    let class_ids = (0..n)
        .map(|i| {
            let mut best = 0;
            let mut bv = f64::NEG_INFINITY;
            for k in 0..num_classes {
                let v = probs.data()[k * n + i];
                if v > bv {
                    bv = v;
                    best = k;
                }
            }
            best
        })
        .collect();
    DecodedBoxes {
        bx: ev.value(d.bx).data().to_vec(),
        by: ev.value(d.by).data().to_vec(),
        bw: ev.value(d.bw).data().to_vec(),
        bh: ev.value(d.bh).data().to_vec(),
        confidence: ev.value(d.confidence).data().to_vec(),
        class_ids,
    }
}

/// Full detection pipeline: forward pass, decode, confidence filter,
/// optional dimension-floor defence, then the chosen NMS variant.
pub fn detect(image: &Image, model: &DetectorModel, opts: &DetectOptions) -> Result<DetectionSet> {
    let decoded = decode_image(model, image)?;
    Ok(suppress(&decoded, model, opts))
}

/// The post-forward half of [`detect`], reusable when decoded boxes are
/// already available.
pub fn suppress(decoded: &DecodedBoxes, model: &DetectorModel, opts: &DetectOptions) -> DetectionSet {
    let side = model.input_side() as f64;
    let boxes: Vec<crate::geometry::Box> = (0..decoded.len())
        .filter(|&i| decoded.confidence[i] >= opts.objectness_threshold)
        .map(|i| {
            crate::geometry::Box::new(
                decoded.bx[i],
                decoded.by[i],
                decoded.bw[i],
                decoded.bh[i],
                decoded.class_ids[i],
                decoded.confidence[i],
            )
            .clipped(side, side)
        })
        .collect();
    let candidates = DetectionSet::new(boxes, "", model.id.clone());
    let floored = dimension_floor_filter(&candidates, opts.defence_min_area);
    match opts.nms_kind {
        NmsKind::Hard => nms(&floored, opts.nt),
        NmsKind::SoftLinear => {
            soft_nms(&floored, opts.nt, SoftNmsMethod::Linear, opts.soft_sigma, opts.soft_score_floor)
        }
        NmsKind::SoftGaussian => soft_nms(
            &floored,
            opts.nt,
            SoftNmsMethod::Gaussian,
            opts.soft_sigma,
            opts.soft_score_floor,
        ),
    }
}
