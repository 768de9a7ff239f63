//! Minimal reverse-mode differentiation engine.
//!
//! Exactly the primitives the micro-detector and the adversarial losses need:
//! dense `f64` tensors, a frozen [`Tape`] of primitive ops, per-call
//! [`Evaluation`] state, and a finite-difference [`check_gradient`] oracle.
//! No graph optimization or fusion; clarity wins at desk scale.

mod check;
mod tape;
mod tensor;

pub use check::check_gradient;
pub use tape::{Evaluation, Gradients, NodeId, PasteTap, Tape, TapeError};
pub use tensor::{broadcast_shape, broadcast_zip, Tensor};

use std::collections::BTreeMap;

/// Named tensor bindings for tape inputs and outputs.
pub type TensorMap = BTreeMap<String, Tensor>;

/// Evaluate a tape on named inputs and return all named outputs.
pub fn eval(tape: &Tape, inputs: &TensorMap) -> Result<TensorMap, TapeError> {
    let mut ev = tape.evaluation();
    for (name, value) in inputs {
        ev.bind(name, value.clone())?;
    }
    ev.run()?;
    let mut out = TensorMap::new();
    for (name, id) in tape.outputs() {
        out.insert(name.to_string(), ev.value(id).clone());
    }
    Ok(out)
}

/// Gradient of the scalar at `output` with respect to the input `wrt`.
pub fn gradient(
    tape: &Tape,
    output: NodeId,
    inputs: &TensorMap,
    wrt: &str,
) -> Result<Tensor, TapeError> {
    let wrt_id = tape.input_id(wrt)?;
    let mut ev = tape.evaluation();
    for (name, value) in inputs {
        ev.bind(name, value.clone())?;
    }
    ev.run()?;
    ev.backward(output, &[wrt_id])?.wrt(wrt)
}
