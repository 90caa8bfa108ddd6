//! Central finite-difference checks for tape operations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Worst disagreement found by a gradient check.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
    }
}

/// Relative error with an absolute floor so that gradients that are zero
/// up to rounding do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(abs_floor)
}

/// Checks d(loss)/d(input) for every element of every input, where the loss
/// is `sum(f(inputs) * r)` for a fixed random projection `r`.
pub fn check_op<F>(inputs: &[Tensor], h: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_op_with(None, inputs, h, seed, f)
}

/// [`check_op`] for operations that also read stored parameters.
pub fn check_op_with<F>(
    store: Option<&ParamStore>,
    inputs: &[Tensor],
    h: f64,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let new_tape = || store.map_or_else(Tape::new, Tape::with_params);
    let projected = |tape: &mut Tape, vals: &[Tensor]| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t)).collect();
        let out = f(tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = tape.dims(out).to_vec();
        let n = dims.iter().product();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rv = tape.constant(&dims, r)?;
        let prod = tape.mul(out, rv)?;
        Ok((tape.sum(prod), vars))
    };

    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = new_tape();
    let (loss, vars) = projected(&mut tape, &tracked)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport::default();
    for (k, input) in tracked.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for (i, &a) in analytic.iter().enumerate().take(input.len()) {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted = tracked.clone();
                shifted[k].data_mut()[i] += delta;
                let mut t = new_tape();
                let (l, _) = projected(&mut t, &shifted)?;
                Ok(t.scalar_value(l))
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, 1e-6));
        }
    }
    Ok(report)
}

/// Checks gradients of a scalar built from stored parameters. `coords`
/// lists `(parameter, flat index)` pairs to perturb; `f` must build the
/// same graph every time it is called.
pub fn check_params<F>(store: &ParamStore, coords: &[(ParamId, usize)], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for &(id, i) in coords {
        if i >= store.get(id).len() {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of range for {}",
                store.name(id)
            )));
        }
        let analytic = grads.param(id).map_or(0.0, |g| g[i]);
        let orig = store.get(id).data()[i];
        let mut eval = |x: f64| -> Result<f64> {
            work.get_mut(id).data_mut()[i] = x;
            let mut t = Tape::inference(&work);
            let l = f(&mut t)?;
            Ok(t.scalar_value(l))
        };
        let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
        work.get_mut(id).data_mut()[i] = orig;
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric, 1e-6));
    }
    Ok(report)
}
