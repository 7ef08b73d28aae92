//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The tape computes in `f32`. The oracle perturbs the same input values by
//! a fixed step but evaluates an independent `f64` forward model (usually
//! built from [`reference`](super::reference)), so rounding noise in the
//! differences stays far below the tolerance being checked.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which derivatives are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub elements_checked: usize,
    /// Relative disagreement between the tape's forward value and the
    /// reference forward model at the unperturbed point.
    pub forward_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance && self.forward_rel_error <= 1e-4
    }
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `tape_fn` against
/// central finite differences of `reference_fn`, for every element of every
/// input.
///
/// `tape_fn` receives one leaf per input, all requiring gradients, and must
/// return a single-element variable. `reference_fn` receives the same inputs
/// widened to `f64` and must compute the same scalar.
pub fn grad_check<F, R>(
    tape_fn: F,
    reference_fn: R,
    inputs: &[Tensor],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Fn(&[Vec<f64>]) -> f64,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = tape_fn(&mut g, &vars)?;
    let tape_value = g.scalar_f64(loss);
    let grads = g.backward(loss)?;

    let mut work: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let ref_value = reference_fn(&work);
    let forward_rel_error = (tape_value - ref_value).abs() / ref_value.abs().max(1.0);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements_checked: 0,
        forward_rel_error,
        tolerance,
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for j in 0..work[i].len() {
            let orig = work[i][j];
            work[i][j] = orig + FD_STEP;
            let plus = reference_fn(&work);
            work[i][j] = orig - FD_STEP;
            let minus = reference_fn(&work);
            work[i][j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.map_or(0.0, |g| f64::from(g[j]));
            let err = relative_error(a, numeric);
            report.elements_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

/// Fixed random weights used to reduce a tensor-valued output to a scalar.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// `Σ out ⊙ probe_weights(shape(out), seed)` on the tape.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = probe_weights(g.value(out).shape(), seed);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// The same reduction for a reference output.
pub fn reference_weighted_sum(out: &[f64], shape: &[usize], seed: u64) -> f64 {
    let w = probe_weights(shape, seed);
    out.iter().zip(w.data()).map(|(a, &b)| a * f64::from(b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
        assert!((relative_error(1e-6, 0.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x * stop_grad(x): the tape sees half the true derivative of x².
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let c = g.constant(g.value(v[0]).clone());
                let p = g.mul(v[0], c)?;
                Ok(g.sum(p))
            },
            |x| x[0].iter().map(|v| v * v).sum(),
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error > 0.4);
    }

    #[test]
    fn detects_a_wrong_forward_model() {
        let x = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let report = grad_check(
            |g, v| Ok(g.sum(v[0])),
            |x| 2.0 * x[0].iter().sum::<f64>(),
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(!report.passed());
    }
}
