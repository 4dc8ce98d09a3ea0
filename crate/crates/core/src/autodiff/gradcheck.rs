//! Central-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Indexed access to a set of named parameter tensors.
pub trait ParamAccess {
    fn count(&self) -> usize;
    fn tensor(&self, i: usize) -> &Tensor<f64>;
    fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f64>;
    fn label(&self, i: usize) -> String {
        format!("#{i}")
    }
}

impl ParamAccess for Vec<Tensor<f64>> {
    fn count(&self) -> usize {
        self.len()
    }
    fn tensor(&self, i: usize) -> &Tensor<f64> {
        &self[i]
    }
    fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f64> {
        &mut self[i]
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so components whose true
    /// gradient is ~0 are judged by absolute error instead.
    pub abs_floor: f64,
    /// Check at most this many scalar entries, sampled without replacement.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Set aside entries whose `±step` evaluations take a different branch of
    /// a piecewise op (see [`Tape::kink_signature`]) than the unperturbed
    /// point; the central difference is not a derivative estimate there.
    /// With `max_entries`, sampling continues until that many smooth
    /// entries are checked.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-5,
            abs_floor: 1e-6,
            max_entries: None,
            seed: 0,
            skip_kinks: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Entries set aside because a kink lies within `±step`.
    pub kinked: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` builds a scalar loss from the parameter set; parameters are put on the
/// tape with [`Tape::param`] using their index as key. Only tensors with
/// `requires_grad` are checked.
pub fn grad_check<P, F>(params: &mut P, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    P: ParamAccess,
    F: for<'a> Fn(&mut Tape<'a, f64>, &'a P) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, &*params)?;
        check_finite(tape.value(loss).item()?, "unperturbed loss")?;
        tape.backward(loss)?.into_params()
    };

    let mut candidates = Vec::new();
    for p in 0..params.count() {
        let t = params.tensor(p);
        if t.requires_grad() {
            candidates.extend((0..t.numel()).map(|i| (p, i)));
        }
    }
    let want = opts.max_entries.unwrap_or(candidates.len()).min(candidates.len());
    let order: Vec<(usize, usize)> = if want < candidates.len() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let pool = if opts.skip_kinks { candidates.len() } else { want };
        let idx = index::sample(&mut rng, candidates.len(), pool).into_vec();
        idx.into_iter().map(|i| candidates[i]).collect()
    } else {
        candidates
    };

    let eval = |params: &P| -> Result<(f64, u64)> {
        let mut tape = Tape::no_grad();
        let loss = f(&mut tape, params)?;
        Ok((tape.value(loss).item()?, tape.kink_signature()))
    };
    let base_sig = eval(params)?.1;

    let mut entries = Vec::with_capacity(want);
    let mut kinked = Vec::new();
    for (p, i) in order {
        if entries.len() == want {
            break;
        }
        let orig = params.tensor(p).data()[i];
        params.tensor_mut(p).data_mut()[i] = orig + opts.step;
        let plus = eval(params);
        params.tensor_mut(p).data_mut()[i] = orig - opts.step;
        let minus = eval(params);
        params.tensor_mut(p).data_mut()[i] = orig;
        let label = params.label(p);
        let (plus, sig_p) = plus?;
        let (minus, sig_m) = minus?;
        let plus = check_finite(plus, &format!("loss at {label}[{i}] + step"))?;
        let minus = check_finite(minus, &format!("loss at {label}[{i}] - step"))?;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic.get(&p).map_or(0.0, |g| g[i]);
        let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
        let entry = GradCheckEntry {
            param: label,
            index: i,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / denom,
        };
        if opts.skip_kinks && (sig_p != base_sig || sig_m != base_sig) {
            kinked.push(entry);
        } else {
            entries.push(entry);
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < opts.tolerance,
        max_rel_error,
        tolerance: opts.tolerance,
        entries,
        kinked,
    })
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} evaluated to {v}; gradient check aborted")))
    }
}
