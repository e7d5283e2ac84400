//! Central finite-difference check of tape gradients, run in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub h: f64,
    /// Check a seeded random subset of at most this many coordinates.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            h: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    /// `max |a − b| / max(|a|, |b|, 1e-8)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a selection decision.
    pub skipped_kinks: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Checks the gradient of a scalar function of one tensor.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let opts = GradcheckOptions {
        h,
        ..Default::default()
    };
    gradcheck_inputs(|tape, xs| f(tape, &xs[0]), std::slice::from_ref(x), &opts)
}

/// Checks the gradient of a scalar function with respect to every input.
///
/// A coordinate is skipped when perturbing it by `±h` changes the selection
/// pattern logged by the tape, since the function has a kink there.
pub fn gradcheck_inputs<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.get(v).expect("inputs are tracked leaves"))
        .collect();
    let base_pattern = tape.selection_log();
    drop(tape);

    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<u32>)> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<f64>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok((out.item(), tape.selection_log()))
    };

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if let Some(max) = opts.max_coords {
        if coords.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picked: Vec<usize> = sample(&mut rng, coords.len(), max).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|k| coords[k]).collect();
        }
    }

    let mut report = GradcheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + opts.h;
        let (fp, pp) = eval(&work)?;
        work[i].data_mut()[j] = orig - opts.h;
        let (fm, pm) = eval(&work)?;
        work[i].data_mut()[j] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at input {i}, coordinate {j} (f+ = {fp}, f- = {fm})"
            )));
        }
        if pp != base_pattern || pm != base_pattern {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * opts.h);
        let a = analytic[i].data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        log::trace!("input {i} coord {j}: analytic {a:e} numeric {numeric:e} rel {rel:e}");
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}
