//! Central finite-difference gradient checking.
//!
//! The harness treats the function under test as a black box that rebuilds
//! its graph from the supplied leaf tensors on every call, so the same
//! machinery checks a single primitive or a full image-to-loss chain.

use super::catalogue::PrimitiveCase;
use super::Tensor;
use crate::error::Result;
use crate::rng::{stream, StreamTag};

/// Perturbation step used everywhere.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error tolerance: |analytic − numeric| / max(1, |numeric|).
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

impl GradCheckOutcome {
    fn merge(&mut self, other: &GradCheckOutcome) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.coords_checked += other.coords_checked;
        self.passed &= other.passed;
    }
}

/// Compare analytic gradients of `f` with central differences at every
/// coordinate of every input (or a deterministic stride-subsample when
/// `max_coords_per_input` is set).
///
/// `corrupt_analytic` injects a deliberate error into the analytic gradient
/// before comparison; it exists so tests can verify the harness actually
/// catches broken backward rules.
pub fn check_function(
    name: &str,
    inputs: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    step: f64,
    tol: f64,
    max_coords_per_input: Option<usize>,
    corrupt_analytic: bool,
) -> Result<GradCheckOutcome> {
    for input in inputs {
        input.zero_grad();
    }
    let loss = f(inputs)?;
    loss.backward()?;
    let mut analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for input in inputs {
        input.zero_grad();
    }
    if corrupt_analytic {
        if let Some(first) = analytic.iter_mut().find(|g| !g.is_empty()) {
            first[0] += 0.5;
        }
    }

    let mut max_rel_err = 0.0f64;
    let mut coords_checked = 0usize;
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match max_coords_per_input {
            Some(cap) if n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut coord = 0usize;
        while coord < n {
            let numeric = {
                input.update_data(|d| d[coord] += step)?;
                let plus = f(inputs)?.item();
                input.update_data(|d| d[coord] -= 2.0 * step)?;
                let minus = f(inputs)?.item();
                input.update_data(|d| d[coord] += step)?;
                (plus - minus) / (2.0 * step)
            };
            let rel = (analytic[idx][coord] - numeric).abs() / numeric.abs().max(1.0);
            max_rel_err = max_rel_err.max(rel);
            coords_checked += 1;
            coord += stride;
        }
    }

    Ok(GradCheckOutcome {
        name: name.to_string(),
        max_rel_err,
        coords_checked,
        passed: max_rel_err < tol,
    })
}

/// Run one catalogue entry over `instances` random shapes.
pub fn check_primitive_case(
    case: &PrimitiveCase,
    instances: usize,
    seed: u64,
    corrupt_analytic: bool,
) -> Result<GradCheckOutcome> {
    let mut outcome = GradCheckOutcome {
        name: case.name.to_string(),
        max_rel_err: 0.0,
        coords_checked: 0,
        passed: true,
    };
    for i in 0..instances {
        let mut rng = stream(seed, StreamTag::GradCheck, case.ordinal() as u64, i as u64, 0);
        let instance = case.instantiate(&mut rng);
        let partial = check_function(
            case.name,
            &instance.inputs,
            instance.f.as_ref(),
            FD_STEP,
            FD_TOL,
            None,
            corrupt_analytic,
        )?;
        outcome.merge(&partial);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::super::primitive_catalogue;
    use super::*;

    // Sweep the whole differentiable primitive catalogue on random shapes.
    #[test]
    fn primitive_sweep_passes_finite_difference_check() {
        for case in primitive_catalogue() {
            let outcome = check_primitive_case(&case, 3, 0xC0FFEE, false).unwrap();
            assert!(
                outcome.passed,
                "{} failed gradient check: max rel err {:.3e} over {} coords",
                outcome.name, outcome.max_rel_err, outcome.coords_checked
            );
        }
    }

    #[test]
    fn harness_catches_injected_broken_backward_rule() {
        let case = primitive_catalogue()
            .into_iter()
            .find(|c| c.name == "matmul")
            .unwrap();
        let outcome = check_primitive_case(&case, 1, 7, true).unwrap();
        assert!(!outcome.passed, "sabotaged rule must be flagged");
    }

    #[test]
    fn two_layer_mlp_gradient_matches_finite_differences() {
        use crate::tensor::Tensor;
        let mut rng = stream(11, StreamTag::GradCheck, 99, 0, 0);
        let rand_vec = |rng: &mut rand_chacha::ChaCha12Rng, n: usize| -> Vec<f64> {
            use rand::Rng;
            (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect()
        };
        let x = Tensor::param(rand_vec(&mut rng, 3 * 4), &[3, 4]).unwrap();
        let w1 = Tensor::param(rand_vec(&mut rng, 4 * 5), &[4, 5]).unwrap();
        let b1 = Tensor::param(rand_vec(&mut rng, 5), &[5]).unwrap();
        let w2 = Tensor::param(rand_vec(&mut rng, 5 * 2), &[5, 2]).unwrap();
        let inputs = vec![x, w1, b1, w2];
        let f = |t: &[Tensor]| -> crate::error::Result<Tensor> {
            t[0].matmul(&t[1])?
                .add(&t[2])?
                .gelu()?
                .matmul(&t[3])?
                .softmax(1)?
                .log()?
                .mean_all()?
                .neg()
        };
        let outcome = check_function("mlp2", &inputs, &f, FD_STEP, 1e-5, None, false).unwrap();
        assert!(
            outcome.passed,
            "2-layer MLP check failed: {:.3e}",
            outcome.max_rel_err
        );
    }
}
