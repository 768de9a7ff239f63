//! The L2 and L0 attack optimizers.
//!
//! Both minimise `‖δ‖₂² + c·f(x+δ)` by plain gradient descent on the tanh
//! reparameterization `x+δ = ½(tanh(ω)+1)` — pixels stay in `[0,1]` for
//! every finite ω, no clipping required. An outer binary search adapts the
//! constant `c`: after each round the loss is tested against
//! `loss_init·(1−γ)`, success shrinks `c` and failure grows it.
//!
//! The L0 variant computes the same full gradient but updates only the
//! top fraction of coordinates by gradient magnitude each iteration,
//! leaving the rest of the image untouched (bit-identical to the input).

use std::io::Write as _;
use std::path::Path;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::detector::{DetectorModel, WeightMode};
use crate::img::Image;
use crate::losses::{
    append_loss, bind_masks, category_masks, BoxNodes, CategoryMask, LossEvaluator, LossKind,
    ModelLossGraph, TargetSet,
};
use crate::{Error, Result};

/// Algorithm initialisation value for the balance constant.
const INITIAL_C: f64 = 10.0;
/// Pixels at exactly 0 or 1 would need ω = ∓∞; clamp the atanh argument.
const ATANH_CLAMP: f64 = 1.0 - 1e-12;
/// Perturbation components with |δ| above this count towards L0.
pub const L0_COUNT_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L2,
    L0,
}

impl std::str::FromStr for Norm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "l2" | "L2" => Ok(Norm::L2),
            "l0" | "L0" => Ok(Norm::L0),
            other => Err(format!("unknown norm '{other}' (expected l2 or l0)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    /// Attack confidence γ ∈ [0, 1): success means the adversarial loss
    /// fell to `(1-γ)` of its initial value.
    pub gamma: f64,
    pub targets: TargetSet,
    pub norm: Norm,
    /// Gradient-descent step size η.
    pub eta: f64,
    pub max_iteration: usize,
    pub binary_steps: usize,
    pub c_min: f64,
    pub c_max: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    /// Fraction of coordinates updated per L0 iteration.
    pub l0_top_fraction: f64,
}

impl AttackConfig {
    pub fn new(gamma: f64, targets: TargetSet, norm: Norm) -> Self {
        AttackConfig {
            gamma,
            targets,
            norm,
            eta: 1e-2,
            max_iteration: 500,
            binary_steps: 5,
            c_min: 0.0,
            c_max: 1e4,
            seed: 0,
            loss_kind: LossKind::F3,
            l0_top_fraction: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.c_min >= self.c_max {
            return Err(Error::invalid("c_min must be below c_max"));
        }
        if self.eta <= 0.0 {
            return Err(Error::invalid("eta must be positive"));
        }
        if !(0.0..=1.0).contains(&self.l0_top_fraction) || self.l0_top_fraction == 0.0 {
            return Err(Error::invalid("l0_top_fraction must be in (0, 1]"));
        }
        if self.targets.is_empty() {
            return Err(Error::invalid("target set must not be empty"));
        }
        Ok(())
    }
}

/// One optimizer iteration in the trace CSV.
#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub round: usize,
    pub iteration: usize,
    pub c: f64,
    pub loss: f64,
    pub l2_distortion: f64,
    pub l0_distortion: usize,
    pub success_flag: bool,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub adversarial: Image,
    /// δ = x' − x, planar `[3, H, W]`.
    pub perturbation: Tensor,
    pub l2_distortion: f64,
    pub l0_distortion: usize,
    /// `success_test` applied to the returned example's freshly recomputed
    /// loss (never a stale cached value).
    pub success: bool,
    pub best_c: f64,
    pub loss_init: f64,
    pub final_loss: f64,
    pub trace: Vec<TraceRow>,
}

/// The Algorithm‑2/3 success criterion.
pub fn success_test(loss_now: f64, loss_init: f64, gamma: f64) -> bool {
    loss_now <= loss_init * (1.0 - gamma)
}

/// Change of variables: given free variables ω and the benign image x,
/// return the perturbed image `½(tanh(ω)+1)` and the perturbation δ.
pub fn to_tanh_space(x: &Tensor, omega: &Tensor) -> (Tensor, Tensor) {
    assert_eq!(x.shape(), omega.shape());
    let xprime = omega.map(|w| 0.5 * (w.tanh() + 1.0));
    let delta = Tensor::new(
        x.shape().to_vec(),
        xprime.data().iter().zip(x.data()).map(|(&p, &b)| p - b).collect(),
    );
    (xprime, delta)
}

/// Inverse of the change of variables at δ = 0: `ω = atanh(2x − 1)`,
/// clamped away from the poles.
pub fn atanh_image(x: &Tensor) -> Tensor {
    x.map(|v| (2.0 * v - 1.0).clamp(-ATANH_CLAMP, ATANH_CLAMP).atanh())
}

/// The L2 attack (all-pixel updates).
pub fn l2_attack(x: &Image, models: &[&DetectorModel], cfg: &AttackConfig) -> Result<AttackResult> {
    if cfg.norm != Norm::L2 {
        return Err(Error::invalid("l2_attack called with a non-L2 config"));
    }
    run_attack(x, models, cfg)
}

/// The L0 attack (top-fraction coordinate updates, untouched pixels stay
/// bit-identical to the input).
pub fn l0_attack(x: &Image, models: &[&DetectorModel], cfg: &AttackConfig) -> Result<AttackResult> {
    if cfg.norm != Norm::L0 {
        return Err(Error::invalid("l0_attack called with a non-L0 config"));
    }
    run_attack(x, models, cfg)
}

// ── optimizer internals ─────────────────────────────────────────────────

struct AttackGraph {
    tape: Tape,
    model_graphs: Vec<ModelLossGraph>,
    ensemble: NodeId,
    objective: NodeId,
    xprime: NodeId,
    dist_sq: NodeId,
    watermark: NodeId,
    targets: TargetSet,
}

fn build_attack_graph(
    models: &[&DetectorModel],
    kind: LossKind,
    targets: &TargetSet,
    side: usize,
) -> Result<AttackGraph> {
    let mut tape = Tape::new();
    let omega = tape.input("omega", vec![3, side, side]);
    let x0 = tape.input("x0", vec![3, side, side]);
    let c = tape.input("c", vec![1]);

    let th = tape.tanh(omega);
    let one = tape.constant_scalar(1.0);
    let shifted = tape.add(th, one)?;
    let half = tape.constant_scalar(0.5);
    let xprime = tape.mul(shifted, half)?;
    let delta = tape.sub(xprime, x0)?;
    let dsq = tape.square(delta);
    let dist_sq = tape.sum(dsq);

    // decodes first, loss subgraphs second: the selector inputs must come
    // after every model's class probabilities so one prefix run suffices
    let mut decodes = Vec::with_capacity(models.len());
    for model in models {
        let (raw, _) = model.append_backbone(&mut tape, xprime, &WeightMode::Baked)?;
        decodes.push(model.append_decode(&mut tape, raw)?);
    }
    let mut model_graphs = Vec::with_capacity(models.len());
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
        model_graphs.push(ModelLossGraph { decode, loss });
    }
    let mut acc = model_graphs[0].loss.total;
    for g in &model_graphs[1..] {
        acc = tape.add(acc, g.loss.total)?;
    }
    let inv = tape.constant_scalar(1.0 / models.len() as f64);
    let ensemble = tape.mul(acc, inv)?;
    let weighted = tape.mul(ensemble, c)?;
    let objective = tape.add(dist_sq, weighted)?;
    let watermark = model_graphs.iter().map(|g| g.decode.watermark()).max().unwrap();

    Ok(AttackGraph {
        tape,
        model_graphs,
        ensemble,
        objective,
        xprime,
        dist_sq,
        watermark,
        targets: targets.clone(),
    })
}

struct StepValues {
    loss: f64,
    dist_sq: f64,
    xprime: Tensor,
    gradient: Option<Tensor>,
}

impl AttackGraph {
    /// Forward (two-phase, fresh masks) and optionally backward.
    fn step(
        &self,
        omega: &Tensor,
        x0: &Tensor,
        c: f64,
        want_gradient: bool,
    ) -> Result<StepValues> {
        let mut ev = self.tape.evaluation();
        ev.bind("omega", omega.clone())?;
        ev.bind("x0", x0.clone())?;
        ev.bind("c", Tensor::scalar(c))?;
        ev.run_until(self.watermark)?;
        let masks: Vec<Vec<CategoryMask>> = self
            .model_graphs
            .iter()
            .map(|g| category_masks(ev.value(g.decode.class_probs), &self.targets))
            .collect();
        for (g, m) in self.model_graphs.iter().zip(&masks) {
            bind_masks(&mut ev, &g.loss, m)?;
        }
        ev.run()?;
        let loss = ev.value(self.ensemble).item();
        let dist_sq = ev.value(self.dist_sq).item();
        let xprime = ev.value(self.xprime).clone();
        let gradient = if want_gradient && loss.is_finite() && dist_sq.is_finite() {
            let omega_id = self.tape.input_id("omega")?;
            Some(ev.backward(self.objective, &[omega_id])?.wrt("omega")?)
        } else {
            None
        };
        Ok(StepValues { loss, dist_sq, xprime, gradient })
    }
}

#[derive(Clone)]
struct Candidate {
    adversarial: Tensor,
    delta: Tensor,
    l2: f64,
    l0: usize,
    loss: f64,
    c: f64,
}

fn make_candidate(
    xprime: &Tensor,
    x0: &Tensor,
    omega: &Tensor,
    omega0: &Tensor,
    snap_untouched: bool,
    loss: f64,
    c: f64,
) -> Candidate {
    let mut adv = xprime.clone();
    if snap_untouched {
        // coordinates whose ω never moved carry exactly the benign pixel
        let od = omega.data();
        let o0 = omega0.data();
        let base = x0.data();
        for (i, v) in adv.data_mut().iter_mut().enumerate() {
            if od[i].to_bits() == o0[i].to_bits() {
                *v = base[i];
            }
        }
    }
    let delta = Tensor::new(
        adv.shape().to_vec(),
        adv.data().iter().zip(x0.data()).map(|(&a, &b)| a - b).collect(),
    );
    let l2 = delta.data().iter().map(|d| d * d).sum::<f64>().sqrt();
    let l0 = delta.data().iter().filter(|d| d.abs() > L0_COUNT_THRESHOLD).count();
    Candidate { adversarial: adv, delta, l2, l0, loss, c }
}

fn run_attack(x: &Image, models: &[&DetectorModel], cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::invalid("need at least one model"));
    }
    let side = models[0].input_side();
    if x.height() != side || x.width() != side {
        return Err(Error::invalid(format!(
            "image is {}x{} but the models expect {side}x{side}",
            x.width(),
            x.height()
        )));
    }

    // loss_init = f(x): the adversarial loss of the clean image
    let evaluator = LossEvaluator::new(models, cfg.loss_kind, &cfg.targets)?;
    let loss_init = evaluator.loss(x.tensor())?.total;
    if !loss_init.is_finite() {
        return Err(Error::Numeric("initial loss is not finite".into()));
    }

    let graph = build_attack_graph(models, cfg.loss_kind, &cfg.targets, side)?;
    let x0 = x.tensor().clone();
    let omega0 = atanh_image(&x0);
    let mut omega = omega0.clone();

    // the clean image is the first candidate: δ = 0 exactly, loss = loss_init
    let benign = Candidate {
        adversarial: x0.clone(),
        delta: Tensor::zeros(x0.shape().to_vec()),
        l2: 0.0,
        l0: 0,
        loss: loss_init,
        c: INITIAL_C,
    };
    let mut best_success: Option<Candidate> = None;
    let mut best_any: Candidate = benign.clone();
    if success_test(benign.loss, loss_init, cfg.gamma) {
        best_success = Some(benign);
    }

    let consider = |cand: Candidate,
                        best_success: &mut Option<Candidate>,
                        best_any: &mut Candidate| {
        if !cand.loss.is_finite() {
            return;
        }
        if cand.loss < best_any.loss {
            *best_any = cand.clone();
        }
        if success_test(cand.loss, loss_init, cfg.gamma) {
            let better = match (&cfg.norm, best_success.as_ref()) {
                (_, None) => true,
                (Norm::L2, Some(b)) => cand.l2 < b.l2,
                (Norm::L0, Some(b)) => cand.l0 < b.l0 || (cand.l0 == b.l0 && cand.l2 < b.l2),
            };
            if better {
                *best_success = Some(cand);
            }
        }
    };

    let snap = cfg.norm == Norm::L0;
    let k_update = match cfg.norm {
        Norm::L2 => omega.len(),
        Norm::L0 => ((cfg.l0_top_fraction * omega.len() as f64).ceil() as usize).clamp(1, omega.len()),
    };

    let mut c = INITIAL_C;
    let (mut c_lo, mut c_hi) = (cfg.c_min, cfg.c_max);
    let mut trace = Vec::with_capacity(cfg.binary_steps * cfg.max_iteration);

    for round in 0..cfg.binary_steps {
        let mut round_failed = false;
        for iteration in 0..cfg.max_iteration {
            let step = graph.step(&omega, &x0, c, true)?;
            if !step.loss.is_finite() || !step.dist_sq.is_finite() {
                round_failed = true;
                break;
            }
            let cand = make_candidate(&step.xprime, &x0, &omega, &omega0, snap, step.loss, c);
            trace.push(TraceRow {
                round,
                iteration,
                c,
                loss: step.loss,
                l2_distortion: cand.l2,
                l0_distortion: cand.l0,
                success_flag: success_test(step.loss, loss_init, cfg.gamma),
            });
            consider(cand, &mut best_success, &mut best_any);

            let Some(grad) = step.gradient else {
                round_failed = true;
                break;
            };
            if !grad.all_finite() {
                round_failed = true;
                break;
            }
            if k_update == omega.len() {
                let od = omega.data_mut();
                for (w, g) in od.iter_mut().zip(grad.data()) {
                    *w -= cfg.eta * g;
                }
            } else {
                // top-k coordinates by |gradient|, ties broken by index
                let gd = grad.data();
                let mut idx: Vec<usize> = (0..gd.len()).collect();
                idx.sort_by(|&a, &b| {
                    gd[b].abs().partial_cmp(&gd[a].abs()).unwrap().then(a.cmp(&b))
                });
                let od = omega.data_mut();
                for &i in idx.iter().take(k_update) {
                    od[i] -= cfg.eta * gd[i];
                }
            }
        }

        // closing evaluation: the round's success test per the algorithm
        let round_success = if round_failed {
            false
        } else {
            let step = graph.step(&omega, &x0, c, false)?;
            if step.loss.is_finite() && step.dist_sq.is_finite() {
                let cand = make_candidate(&step.xprime, &x0, &omega, &omega0, snap, step.loss, c);
                consider(cand, &mut best_success, &mut best_any);
                success_test(step.loss, loss_init, cfg.gamma)
            } else {
                false
            }
        };

        if round_success {
            c_hi = c.min(c_hi);
        } else {
            c_lo = c.max(c_lo);
        }
        c = 0.5 * (c_hi + c_lo);
    }

    let chosen = best_success.unwrap_or(best_any);

    // recompute the returned example's loss from scratch (fresh masks)
    let final_loss = evaluator.loss(&chosen.adversarial)?.total;
    Ok(AttackResult {
        adversarial: Image::new(chosen.adversarial),
        perturbation: chosen.delta,
        l2_distortion: chosen.l2,
        l0_distortion: chosen.l0,
        success: success_test(final_loss, loss_init, cfg.gamma),
        best_c: chosen.c,
        loss_init,
        final_loss,
        trace,
    })
}

/// Write the per-iteration trace as CSV.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "round,iteration,c,loss,l2_distortion,l0_distortion,success_flag").unwrap();
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.round, r.iteration, r.c, r.loss, r.l2_distortion, r.l0_distortion, r.success_flag
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
