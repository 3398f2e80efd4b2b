use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::Result;
use crate::graph::SparseDepthMap;

/// Scalar loss nodes of one sample.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub mse_s: Var,
    pub mse_i: Var,
    pub smooth: Var,
}

/// Mean squared error over labelled ground-truth pixels.
pub fn loss_mse<T: Scalar>(tape: &mut Tape<'_, T>, pred: Var, gt: &SparseDepthMap) -> Result<Var> {
    if gt.observed_count() == 0 {
        log::warn!("ground truth has no labelled pixels; loss is zero");
    }
    let target: Vec<T> = gt.depth().iter().map(|&d| T::of(d as f64)).collect();
    tape.masked_mse(pred, &target, gt.mask())
}

/// Edge-aware smoothness of a prediction against an RGB image `[3, H, W]`.
pub fn loss_smooth<T: Scalar>(tape: &mut Tape<'_, T>, pred: Var, rgb: &Tensor<f32>) -> Result<Var> {
    tape.smoothness(pred, &rgb.cast())
}

/// `mse(y) + γ1·(mse(y_s) + mse(y_i)) + γ2·smooth(y)`.
#[allow(clippy::too_many_arguments)]
pub fn loss_total<T: Scalar>(
    tape: &mut Tape<'_, T>,
    y: Var,
    y_s: Var,
    y_i: Var,
    gt: &SparseDepthMap,
    rgb: &Tensor<f32>,
    gamma1: f64,
    gamma2: f64,
) -> Result<LossTerms> {
    let mse = loss_mse(tape, y, gt)?;
    let mse_s = loss_mse(tape, y_s, gt)?;
    let mse_i = loss_mse(tape, y_i, gt)?;
    let smooth = loss_smooth(tape, y, rgb)?;
    let aux = tape.add(mse_s, mse_i)?;
    let aux = tape.scale(aux, T::of(gamma1));
    let sm = tape.scale(smooth, T::of(gamma2));
    let total = tape.add(mse, aux)?;
    let total = tape.add(total, sm)?;
    Ok(LossTerms {
        total,
        mse,
        mse_s,
        mse_i,
        smooth,
    })
}
