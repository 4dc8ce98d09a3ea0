use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability clamp applied before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Weights of the amodal and occluded loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_a: f64,
    pub lambda_o: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_a: 1.0,
            lambda_o: 0.25,
        }
    }
}

impl LossConfig {
    pub fn new(lambda_a: f64, lambda_o: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(lambda_a) || !ok(lambda_o) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {lambda_a}, {lambda_o}"
            )));
        }
        Ok(Self { lambda_a, lambda_o })
    }

    /// `lambda_a * la + lambda_o * lo`, evaluated the same way as
    /// [`total_loss`] so the two agree bitwise.
    pub fn combine<T: Scalar>(&self, la: T, lo: T) -> T {
        let a = la * T::lit(self.lambda_a);
        if self.lambda_o == 0.0 {
            a
        } else {
            a + lo * T::lit(self.lambda_o)
        }
    }
}

/// Mean binary cross-entropy of probabilities against `{0,1}` targets.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return contract_err(format!("bce prediction {:?} vs target {:?}", pred.shape(), target.shape()));
    }
    let mut tape = Tape::no_grad();
    let p = tape.constant(pred.clone());
    let l = tape.bce(p, target, T::lit(BCE_CLAMP))?;
    tape.value(l).item()
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub amodal: Var,
    pub occluded: Option<Var>,
}

/// `lambda_a * BCE(amodal) + lambda_o * BCE(occluded)`.
///
/// With `lambda_o == 0` the occluded term is still evaluated for logging
/// when available but does not enter `total`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    amodal: Var,
    occluded: Option<Var>,
    gt_amodal: &Tensor<T>,
    gt_occluded: Option<&Tensor<T>>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let clamp = T::lit(BCE_CLAMP);
    let la = tape.bce(amodal, gt_amodal, clamp)?;
    let lo = match (occluded, gt_occluded) {
        (Some(o), Some(gt)) => Some(tape.bce(o, gt, clamp)?),
        _ if cfg.lambda_o > 0.0 && occluded.is_none() => {
            return contract_err("occluded loss weight is positive but the model has no occluded output")
        }
        _ if cfg.lambda_o > 0.0 => return contract_err("occluded loss weight is positive but no occluded target given"),
        _ => None,
    };
    let mut total = tape.scale(la, T::lit(cfg.lambda_a))?;
    if cfg.lambda_o != 0.0 {
        let lo = lo.expect("checked above");
        let weighted = tape.scale(lo, T::lit(cfg.lambda_o))?;
        total = tape.add(total, weighted)?;
    }
    Ok(LossVars {
        total,
        amodal: la,
        occluded: lo,
    })
}
