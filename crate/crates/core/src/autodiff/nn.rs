//! Layer handles: parameter ids plus the hyperparameters needed to apply
//! them on a tape.

use rand::Rng;

use super::{ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::Result;

/// Square-kernel convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add_kaiming(
            format!("{name}.weight"),
            vec![out_ch, in_ch, kernel, kernel],
            fan_in,
            slope,
            rng,
        )?;
        let bias = store.add_zeros(format!("{name}.bias"), vec![out_ch])?;
        Ok(Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
        })
    }

    /// "Same" padding, so the output is `ceil(H / stride)` tall.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.kernel / 2)
    }
}

/// Stride-2, 3×3 transposed convolution that exactly doubles H and W.
#[derive(Debug, Clone)]
pub struct Upconv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Upconv2d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        // Each output pixel sees ~in_ch·(3/2)² taps.
        let fan_in = (in_ch * 9).div_ceil(4);
        let weight = store.add_kaiming(format!("{name}.weight"), vec![in_ch, out_ch, 3, 3], fan_in, slope, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), vec![out_ch])?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv_transpose2d(x, w, Some(b), 2, 1, 1)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_kaiming(format!("{name}.weight"), vec![out_dim, in_dim], in_dim, slope, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), vec![out_dim])?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }
}
