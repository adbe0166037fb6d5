use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Fault, Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check only this many randomly chosen entries (across all inputs).
    pub sample: Option<(usize, u64)>,
    /// Corrupt one adjoint on the autodiff side.
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            sample: None,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per input tensor (0 when none of its entries
    /// were sampled).
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out)[0])
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, entry by entry.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = match opts.fault {
        Some(fault) => Graph::with_fault(fault),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.clone().with_grad())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let entries: Vec<(usize, usize)> = match opts.sample {
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect(),
        Some((n, seed)) => {
            let total: usize = inputs.iter().map(Tensor::len).sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    let mut flat = rng.gen_range(0..total);
                    let mut i = 0;
                    while flat >= inputs[i].len() {
                        flat -= inputs[i].len();
                        i += 1;
                    }
                    (i, flat)
                })
                .collect()
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut per_input = vec![0.0f64; inputs.len()];
    for &(i, j) in &entries {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + opts.eps;
        let plus = evaluate(&f, &work)?;
        work[i].data_mut()[j] = orig - opts.eps;
        let minus = evaluate(&f, &work)?;
        work[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[i][j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        per_input[i] = per_input[i].max(rel);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_error,
        checked: entries.len(),
        passed: max_rel_error <= opts.tol,
    })
}
