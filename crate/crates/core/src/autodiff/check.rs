//! Finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape, TapeError};
use super::TensorMap;

/// Evaluate the scalar at `output` under `bindings`.
fn eval_scalar(tape: &Tape, output: NodeId, bindings: &TensorMap) -> Result<f64, TapeError> {
    let mut ev = tape.evaluation();
    for (name, value) in bindings {
        ev.bind(name, value.clone())?;
    }
    ev.run()?;
    Ok(ev.value(output).item())
}

/// Compare the analytic gradient of `output` w.r.t. the input `wrt` against
/// central finite differences at `samples` coordinates (sampled without
/// replacement, seeded), returning the maximum relative error
/// `|analytic - difference| / max(|analytic|, |difference|, 1e-12)`.
pub fn check_gradient(
    tape: &Tape,
    output: NodeId,
    bindings: &TensorMap,
    wrt: &str,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, TapeError> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    assert!(samples >= 1, "need at least one sample");

    let wrt_id = tape.input_id(wrt)?;
    let mut ev = tape.evaluation();
    for (name, value) in bindings {
        ev.bind(name, value.clone())?;
    }
    ev.run()?;
    let analytic = ev.backward(output, &[wrt_id])?.wrt(wrt)?;

    let base = bindings
        .get(wrt)
        .ok_or_else(|| TapeError::UnboundInput(wrt.to_string()))?
        .clone();
    let mut coords: Vec<usize> = (0..base.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(samples.min(base.len()));

    let mut worst: f64 = 0.0;
    let mut perturbed = bindings.clone();
    for &i in &coords {
        let mut plus = base.clone();
        plus.data_mut()[i] += epsilon;
        perturbed.insert(wrt.to_string(), plus);
        let f_plus = eval_scalar(tape, output, &perturbed)?;

        let mut minus = base.clone();
        minus.data_mut()[i] -= epsilon;
        perturbed.insert(wrt.to_string(), minus);
        let f_minus = eval_scalar(tape, output, &perturbed)?;

        let diff = (f_plus - f_minus) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let err = (a - diff).abs() / a.abs().max(diff.abs()).max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
