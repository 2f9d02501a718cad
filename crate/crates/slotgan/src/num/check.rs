//! Finite-difference gradient checking.
//!
//! The numeric side is an independent oracle: it only ever calls the
//! forward pass, so agreement with the reverse sweep is meaningful.

use rand::Rng;

use super::tape::{NodeId, NumResult, Tape};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Relative error with a unit floor, so tiny gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite difference of `f` w.r.t. `inputs[which][coord]`.
pub fn numerical_grad(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    coord: usize,
    h: f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[coord] += h;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[coord] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Compare reverse-mode gradients of `build` against central differences on
/// `coords` random coordinates per input. Returns the worst relative error.
pub fn check_gradients(
    build: &dyn Fn(&mut Tape, &[NodeId]) -> NumResult<NodeId>,
    inputs: &[Tensor],
    coords: usize,
    rng: &mut impl Rng,
    tol: f64,
) -> Result<f64, String> {
    let forward = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids).expect("forward in gradient check");
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids).map_err(|e| e.to_string())?;
    let grads = tape.backward(out).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let g = grads[ids[which].0]
            .as_ref()
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for _ in 0..coords.min(input.len()).max(1) {
            let coord = rng.gen_range(0..input.len());
            let analytic = g.data()[coord];
            let numeric = numerical_grad(&forward, inputs, which, coord, FD_STEP);
            let err = rel_err(analytic, numeric);
            worst = worst.max(err);
            if err > tol {
                return Err(format!(
                    "input {} coord {}: analytic {} vs numeric {} (rel err {:.3e})",
                    which, coord, analytic, numeric, err
                ));
            }
        }
    }
    Ok(worst)
}
