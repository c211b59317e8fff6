//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative step: each element `x` is perturbed by `±STEP·max(1, |x|)`.
pub const STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
#[derive(Default)]
pub struct GradCheckOptions {
    /// Check at most this many elements per input, chosen at random.
    /// `None` checks every element.
    pub max_elements: Option<usize>,
    /// Alternatively check this fraction of each input's elements (rounded up).
    pub fraction: Option<f64>,
    pub sample_seed: u64,
}


#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| Error::shape("grad_check", "closure must return a scalar"))
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences for every (or a sampled subset of) input element.
pub fn grad_check<F>(f: F, inputs: &[(String, Tensor)], tol: f64, options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.sample_seed);
    let mut entries = Vec::with_capacity(inputs.len());
    for (i, (name, tensor)) in inputs.iter().enumerate() {
        let analytic = grads
            .take(vars[i])
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        let n = tensor.len();
        let mut budget = n;
        if let Some(frac) = options.fraction {
            budget = budget.min(((n as f64) * frac).ceil() as usize).max(1);
        }
        if let Some(max) = options.max_elements {
            budget = budget.min(max);
        }
        let mut indices: Vec<usize> = if budget >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, budget).into_vec()
        };
        indices.sort_unstable();

        let mut entry = GradCheckEntry {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst: None,
        };
        let mut probe = inputs.to_vec();
        for idx in indices {
            let x = tensor.data()[idx];
            let h = STEP * x.abs().max(1.0);
            probe[i].1.data_mut()[idx] = x + h;
            let plus = evaluate(&f, &probe)?;
            probe[i].1.data_mut()[idx] = x - h;
            let minus = evaluate(&f, &probe)?;
            probe[i].1.data_mut()[idx] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            if err > entry.max_rel_error || entry.worst.is_none() {
                entry.max_rel_error = entry.max_rel_error.max(err);
                entry.worst = Some((idx, a, numeric));
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries, tolerance: tol })
}
