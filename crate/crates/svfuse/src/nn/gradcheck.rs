//! Central finite-difference verification of tape gradients.
//!
//! Lives in the library (not test code) because the acceptance suite runs the
//! same checks against every trainable network.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Builds a scalar loss from leaf variables created from `inputs`.
pub type LossBuilder<'a> = &'a mut dyn FnMut(&mut Tape, &[Var]) -> Var;

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `build`'s loss against central finite
/// differences for every component of every input.
///
/// Relative error uses max(|analytic|, |numeric|, 1e-6) as the scale so that
/// near-zero gradients do not blow up the ratio.
pub fn check_gradients(
    inputs: &[Tensor],
    step: f64,
    build: LossBuilder,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);

    let eval = |inputs: &[Tensor], build: &mut dyn FnMut(&mut Tape, &[Var]) -> Var| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss)[0]
    };

    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut perturbed = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[ti]).map(|g| g.to_vec());
        for vi in 0..input.numel() {
            let orig = input.data[vi];
            perturbed[ti].data[vi] = orig + step;
            let plus = eval(&perturbed, build);
            perturbed[ti].data[vi] = orig - step;
            let minus = eval(&perturbed, build);
            perturbed[ti].data[vi] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g[vi]);
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            max_rel_err = max_rel_err.max((a - numeric).abs() / scale);
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        checked,
    }
}

/// Panics when any gradient deviates beyond `tol`.
pub fn assert_gradients(name: &str, inputs: &[Tensor], step: f64, tol: f64, build: LossBuilder) {
    let report = check_gradients(inputs, step, build);
    assert!(
        report.max_rel_err < tol,
        "{name}: max relative gradient error {:.3e} over {} components exceeds {tol:.1e}",
        report.max_rel_err,
        report.checked
    );
}
