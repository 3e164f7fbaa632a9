//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_err: f64,
    /// Input index and flat coordinate of the worst entry.
    pub worst: (usize, usize),
    /// Number of coordinates probed.
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compare tape gradients of a scalar-valued graph against central finite
/// differences with step `1e-5`.
///
/// `f` rebuilds the graph from the given leaves on a fresh tape and must be
/// deterministic. When `sample` is `Some((per_input, seed))`, only that many
/// randomly chosen coordinates per input are probed, which keeps large-graph
/// checks affordable; otherwise every coordinate is probed.
pub fn grad_check<F>(
    inputs: &[Tensor],
    f: F,
    tol: f64,
    sample: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    const H: f64 = 1e-5;

    // Analytic gradients.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    if root.value().numel() != 1 {
        return Err(Error::config(format!(
            "grad_check requires a scalar-valued graph, got {:?}",
            root.value().dims()
        )));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Option<Tensor>> = vars.iter().map(|v| grads.get(*v).cloned()).collect();

    let eval = |tensors: Vec<Tensor>| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = tensors.into_iter().map(|t| tape.leaf(t)).collect();
        f(&tape, &vars)?.item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        tol,
    };
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match sample {
            None => (0..input.numel()).collect(),
            Some((per_input, seed)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (which as u64).wrapping_mul(0x9e3779b97f4a7c15),
                );
                let n = input.numel();
                if per_input >= n {
                    (0..n).collect()
                } else {
                    let mut picked: Vec<usize> =
                        (0..per_input).map(|_| rng.random_range(0..n)).collect();
                    picked.sort_unstable();
                    picked.dedup();
                    picked
                }
            }
        };
        for flat in coords {
            let base = input.data()[flat];
            let mut plus = inputs.to_vec();
            plus[which] = input.with_value_at(flat, base + H)?;
            let mut minus = inputs.to_vec();
            minus[which] = input.with_value_at(flat, base - H)?;
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * H);
            let a = analytic[which].as_ref().map_or(0.0, |g| g.data()[flat]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (which, flat);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_closed_form() {
        // f(x) = sum(x^2) at (1, 2): analytic (2, 4); FD agrees tightly.
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let report =
            grad_check(&[x], |_tape, vars| vars[0].mul(&vars[0])?.sum(), 1e-8, None).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn non_scalar_graph_is_usage_error() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(&[x], |_tape, vars| vars[0].mul(&vars[0]), 1e-8, None);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn sampled_mode_probes_fewer_coordinates() {
        let x = Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let report = grad_check(
            &[x],
            |_tape, vars| vars[0].tanh()?.sum(),
            1e-6,
            Some((5, 42)),
        )
        .unwrap();
        assert!(report.checked <= 5);
        assert!(report.passed());
    }
}
