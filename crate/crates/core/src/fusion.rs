//! Decoder fusion of the depth and image streams.
//!
//! Every decoder level runs two mirrored branches. In the gated strategy a
//! branch scales the partner stream's features by a sigmoid gate computed
//! from its own gate source before concatenating them; the direct and
//! attention-weighted strategies replace the gate by a plain or attention
//! weighted concatenation of both streams.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Conv2d, Upconv2d};
use crate::autodiff::{ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// How the two streams are combined at each decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionStrategy {
    /// Direct concatenation followed by a convolution.
    #[serde(rename = "DF")]
    Df,
    /// Concatenation of attention-weighted streams.
    #[serde(rename = "DAF")]
    Daf,
    /// Symmetric gated fusion.
    #[serde(rename = "SG")]
    Sg,
}

impl FusionStrategy {
    pub fn tag(self) -> &'static str {
        match self {
            FusionStrategy::Df => "DF",
            FusionStrategy::Daf => "DAF",
            FusionStrategy::Sg => "SG",
        }
    }
}

/// `act(conv(act(conv(x))) + proj(x))`, with a 1×1 projection when the
/// channel count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Option<Conv2d>,
    pub slope: f64,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, slope, rng)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, slope, rng)?,
            proj: if in_ch != out_ch {
                Some(Conv2d::new(
                    store,
                    &format!("{name}.proj"),
                    in_ch,
                    out_ch,
                    1,
                    1,
                    1.0,
                    rng,
                )?)
            } else {
                None
            },
            slope,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let slope = T::of(self.slope);
        let h = self.conv1.forward(tape, x)?;
        let h = tape.leaky_relu(h, slope);
        let h = self.conv2.forward(tape, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(tape, x)?,
            None => x,
        };
        let s = tape.add(h, skip)?;
        Ok(tape.leaky_relu(s, slope))
    }
}

#[derive(Debug, Clone)]
enum Body {
    Res(ResBlock, ResBlock),
    Conv(Conv2d),
}

/// One side of a decoder level.
#[derive(Debug, Clone)]
pub struct Branch {
    /// Gate on the partner stream (gated strategy only).
    gate: Option<Conv2d>,
    /// Initial fusion convolution (direct and attention strategies only).
    init: Option<Conv2d>,
    body: Body,
    up: Option<Upconv2d>,
    slope: f64,
}

/// Outputs of one branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    pub q: Var,
    pub gate: Option<Var>,
}

/// Channel layout of one decoder level.
#[derive(Debug, Clone, Copy)]
pub struct LevelShape {
    /// Width of the encoder features and of this level's outputs.
    pub channels: usize,
    /// Width after upsampling, i.e. the next finer level's width; `None` at
    /// level 0.
    pub up_channels: Option<usize>,
    /// Whether an upsampled input arrives from the coarser level.
    pub has_coarser: bool,
    /// Two residual blocks instead of a single convolution.
    pub residual: bool,
}

impl Branch {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        strategy: FusionStrategy,
        shape: LevelShape,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let c = shape.channels;
        let coarse = if shape.has_coarser { c } else { 0 };
        let (gate, init, body_in) = match strategy {
            FusionStrategy::Sg => (
                Some(Conv2d::new(store, &format!("{name}.gate"), c, c, 3, 1, 1.0, rng)?),
                None,
                coarse + 2 * c,
            ),
            FusionStrategy::Df | FusionStrategy::Daf => (
                None,
                Some(Conv2d::new(store, &format!("{name}.init"), 2 * c, c, 3, 1, slope, rng)?),
                coarse + c,
            ),
        };
        let body = if shape.residual {
            Body::Res(
                ResBlock::new(store, &format!("{name}.res1"), body_in, c, slope, rng)?,
                ResBlock::new(store, &format!("{name}.res2"), c, c, slope, rng)?,
            )
        } else {
            Body::Conv(Conv2d::new(
                store,
                &format!("{name}.conv"),
                body_in,
                c,
                3,
                1,
                slope,
                rng,
            )?)
        };
        let up = match shape.up_channels {
            Some(uc) => Some(Upconv2d::new(store, &format!("{name}.up"), c, uc, slope, rng)?),
            None => None,
        };
        Ok(Self {
            gate,
            init,
            body,
            up,
            slope,
        })
    }

    /// `own` and `partner` are the encoder features of this branch's stream
    /// and of the other stream; `weighted` is the attention-weighted pair
    /// (own first) used by the attention strategy.
    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        coarse: Option<Var>,
        own: Var,
        partner: Var,
        weighted: Option<(Var, Var)>,
    ) -> Result<BranchOutput> {
        let slope = T::of(self.slope);
        let mut gate_out = None;
        let fused = if let Some(gate) = &self.gate {
            let src = coarse.unwrap_or(own);
            let g = gate.forward(tape, src)?;
            let g = tape.sigmoid(g);
            gate_out = Some(g);
            let gated = tape.mul(g, partner)?;
            tape.concat_channels(&[own, gated])?
        } else {
            let init = self.init.as_ref().expect("init conv present without gate");
            let (a, b) = weighted.unwrap_or((own, partner));
            let x = tape.concat_channels(&[a, b])?;
            let x = init.forward(tape, x)?;
            tape.leaky_relu(x, slope)
        };
        let x = match coarse {
            Some(q) => tape.concat_channels(&[q, fused])?,
            None => fused,
        };
        let q = match &self.body {
            Body::Res(r1, r2) => {
                let h = r1.forward(tape, x)?;
                r2.forward(tape, h)?
            }
            Body::Conv(c) => {
                let h = c.forward(tape, x)?;
                tape.leaky_relu(h, slope)
            }
        };
        Ok(BranchOutput { q, gate: gate_out })
    }

    fn upsample<T: Scalar>(&self, tape: &mut Tape<'_, T>, q: Var) -> Result<Option<Var>> {
        match &self.up {
            Some(up) => {
                let u = up.forward(tape, q)?;
                Ok(Some(tape.leaky_relu(u, T::of(self.slope))))
            }
            None => Ok(None),
        }
    }
}

/// One decoder level: a depth-side and an image-side branch.
#[derive(Debug, Clone)]
pub struct FusionLevel {
    pub strategy: FusionStrategy,
    pub depth: Branch,
    pub image: Branch,
    /// Shared attention conv of the attention strategy: `2C → 2C`.
    pub attention: Option<Conv2d>,
    pub channels: usize,
}

/// Outputs of both branches of a level.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    pub q_si: Var,
    pub q_is: Var,
    pub q_si_up: Option<Var>,
    pub q_is_up: Option<Var>,
    /// Gate on the image features used by the depth branch, and vice versa.
    pub gates: Option<(Var, Var)>,
}

impl FusionLevel {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        strategy: FusionStrategy,
        shape: LevelShape,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let c = shape.channels;
        let attention = if strategy == FusionStrategy::Daf {
            Some(Conv2d::new(
                store,
                &format!("{name}.attention"),
                2 * c,
                2 * c,
                3,
                1,
                1.0,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            strategy,
            depth: Branch::new(store, &format!("{name}.depth"), strategy, shape, slope, rng)?,
            image: Branch::new(store, &format!("{name}.image"), strategy, shape, slope, rng)?,
            attention,
            channels: c,
        })
    }

    /// Fuse and upsample; `q_up_*` come from the coarser level and are
    /// absent at the coarsest level.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        q_up_s: Option<Var>,
        q_up_i: Option<Var>,
        f_s: Var,
        f_i: Var,
    ) -> Result<FusionOutput> {
        let out = self.fuse(tape, q_up_s, q_up_i, f_s, f_i)?;
        self.upsample(tape, out)
    }

    /// Deconvolve both branch outputs to the next finer level (no-op at
    /// level 0).
    pub fn upsample<T: Scalar>(&self, tape: &mut Tape<'_, T>, mut out: FusionOutput) -> Result<FusionOutput> {
        out.q_si_up = self.depth.upsample(tape, out.q_si)?;
        out.q_is_up = self.image.upsample(tape, out.q_is)?;
        Ok(out)
    }

    /// Fusion without the upsampling step.
    pub fn fuse<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        q_up_s: Option<Var>,
        q_up_i: Option<Var>,
        f_s: Var,
        f_i: Var,
    ) -> Result<FusionOutput> {
        let fs_shape = tape.shape(f_s).to_vec();
        if tape.shape(f_i) != fs_shape.as_slice() {
            return Err(Error::Config(format!(
                "fusion inputs differ: {:?} vs {:?}",
                fs_shape,
                tape.shape(f_i)
            )));
        }
        for q in [q_up_s, q_up_i].into_iter().flatten() {
            if tape.shape(q)[1..] != fs_shape[1..] {
                return Err(Error::Config(format!(
                    "upsampled features {:?} do not match level features {:?}",
                    tape.shape(q),
                    fs_shape
                )));
            }
        }
        let weighted = match &self.attention {
            Some(att) => {
                let x = tape.concat_channels(&[f_s, f_i])?;
                let a = att.forward(tape, x)?;
                let a = tape.sigmoid(a);
                let c = self.channels;
                let a_s = tape.slice_channels(a, 0, c)?;
                let a_i = tape.slice_channels(a, c, c)?;
                let ws = tape.mul(f_s, a_s)?;
                let wi = tape.mul(f_i, a_i)?;
                Some((ws, wi))
            }
            None => None,
        };
        let d = self.depth.forward(tape, q_up_s, f_s, f_i, weighted)?;
        let i = self
            .image
            .forward(tape, q_up_i, f_i, f_s, weighted.map(|(a, b)| (b, a)))?;
        Ok(FusionOutput {
            q_si: d.q,
            q_is: i.q,
            q_si_up: None,
            q_is_up: None,
            gates: d.gate.zip(i.gate),
        })
    }
}

/// Direct fusion of two maps: `conv([f_s ‖ f_i])`.
pub fn fuse_df<T: Scalar>(tape: &mut Tape<'_, T>, f_s: Var, f_i: Var, conv: &Conv2d) -> Result<Var> {
    let x = tape.concat_channels(&[f_s, f_i])?;
    conv.forward(tape, x)
}

/// Attention-weighted fusion: `conv([f_s·A_s ‖ f_i·A_i])` with
/// `[A_s ‖ A_i] = σ(att([f_s ‖ f_i]))`.
pub fn fuse_daf<T: Scalar>(tape: &mut Tape<'_, T>, f_s: Var, f_i: Var, att: &Conv2d, conv: &Conv2d) -> Result<Var> {
    let c = tape.shape(f_s)[0];
    let x = tape.concat_channels(&[f_s, f_i])?;
    let a = att.forward(tape, x)?;
    let a = tape.sigmoid(a);
    let a_s = tape.slice_channels(a, 0, c)?;
    let a_i = tape.slice_channels(a, c, c)?;
    let ws = tape.mul(f_s, a_s)?;
    let wi = tape.mul(f_i, a_i)?;
    fuse_df(tape, ws, wi, conv)
}

/// Progressive fusion of both branches' features from coarse to fine,
/// ending in a one-channel prediction.
#[derive(Debug, Clone)]
pub struct FeatureIntegration {
    /// Two convolutions per level, index 0 = finest.
    pub levels: Vec<(Conv2d, Conv2d)>,
    pub head: Conv2d,
    pub slope: f64,
}

impl FeatureIntegration {
    /// `channels[l]` is the width of `Q_SI` and `Q_IS` at level `l`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: &[usize],
        width: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let top = channels.len() - 1;
        let levels = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let prev = if l == top { 0 } else { width };
                Ok((
                    Conv2d::new(
                        store,
                        &format!("{name}.l{l}.conv1"),
                        prev + 2 * c,
                        width,
                        3,
                        1,
                        slope,
                        rng,
                    )?,
                    Conv2d::new(store, &format!("{name}.l{l}.conv2"), width, width, 3, 1, slope, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Conv2d::new(store, &format!("{name}.head"), width, 1, 3, 1, 1.0, rng)?;
        Ok(Self { levels, head, slope })
    }

    /// `q_si[l]`, `q_is[l]` for levels `0..=L`; returns `[1, H, W]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, q_si: &[Var], q_is: &[Var]) -> Result<Var> {
        if q_si.len() != self.levels.len() || q_is.len() != self.levels.len() {
            return Err(Error::Config(format!(
                "feature integration over {} levels given {} / {} maps",
                self.levels.len(),
                q_si.len(),
                q_is.len()
            )));
        }
        let slope = T::of(self.slope);
        let mut prev: Option<Var> = None;
        for l in (0..self.levels.len()).rev() {
            let x = match prev {
                Some(p) => {
                    let up = tape.upsample2x(p)?;
                    tape.concat_channels(&[up, q_si[l], q_is[l]])?
                }
                None => tape.concat_channels(&[q_si[l], q_is[l]])?,
            };
            let (c1, c2) = &self.levels[l];
            let h = c1.forward(tape, x)?;
            let h = tape.leaky_relu(h, slope);
            let h = c2.forward(tape, h)?;
            prev = Some(tape.leaky_relu(h, slope));
        }
        self.head.forward(tape, prev.expect("at least one level"))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tensor;

    fn rand_map(tape: &mut Tape<'_, f64>, shape: [usize; 3], seed: u64, grad: bool) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap(), grad)
    }

    fn level(strategy: FusionStrategy, coarse: bool, residual: bool) -> (ParamStore<f64>, FusionLevel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = LevelShape {
            channels: 3,
            up_channels: Some(2),
            has_coarser: coarse,
            residual,
        };
        let lvl = FusionLevel::new(&mut store, "f", strategy, shape, 0.2, &mut rng).unwrap();
        (store, lvl)
    }

    #[test]
    fn output_shapes() {
        for s in [FusionStrategy::Df, FusionStrategy::Daf, FusionStrategy::Sg] {
            let (store, lvl) = level(s, true, true);
            let mut tape = Tape::new(&store);
            let fs = rand_map(&mut tape, [3, 4, 4], 1, false);
            let fi = rand_map(&mut tape, [3, 4, 4], 2, false);
            let qs = rand_map(&mut tape, [3, 4, 4], 3, false);
            let qi = rand_map(&mut tape, [3, 4, 4], 4, false);
            let out = lvl.forward(&mut tape, Some(qs), Some(qi), fs, fi).unwrap();
            assert_eq!(tape.shape(out.q_si), &[3, 4, 4]);
            assert_eq!(tape.shape(out.q_is_up.unwrap()), &[2, 8, 8]);
            assert_eq!(out.gates.is_some(), s == FusionStrategy::Sg);
        }
    }

    #[test]
    fn zero_gate_conv_gives_half() {
        let (mut store, lvl) = level(FusionStrategy::Sg, false, false);
        for name in ["f.depth.gate.weight", "f.depth.gate.bias"] {
            let id = store.id(name).unwrap();
            store.get_mut(id).tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new(&store);
        let fs = rand_map(&mut tape, [3, 4, 4], 1, false);
        let fi = rand_map(&mut tape, [3, 4, 4], 2, false);
        let out = lvl.forward(&mut tape, None, None, fs, fi).unwrap();
        assert!(tape.value(out.gates.unwrap().0).iter().all(|&g| g == 0.5));
    }

    #[test]
    fn spatial_mismatch_is_config_error() {
        let (store, lvl) = level(FusionStrategy::Sg, true, false);
        let mut tape = Tape::new(&store);
        let fs = rand_map(&mut tape, [3, 4, 4], 1, false);
        let fi = rand_map(&mut tape, [3, 4, 4], 2, false);
        let q = rand_map(&mut tape, [3, 2, 2], 3, false);
        assert!(matches!(
            lvl.forward(&mut tape, Some(q), Some(q), fs, fi),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn daf_with_open_attention_equals_df() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(&mut store, "c", 4, 3, 3, 1, 0.2, &mut rng).unwrap();
        let att = Conv2d::new(&mut store, "a", 4, 4, 3, 1, 1.0, &mut rng).unwrap();
        store
            .get_mut(att.weight)
            .tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        store
            .get_mut(att.bias)
            .tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 60.0);
        let mut tape = Tape::new(&store);
        let fs = rand_map(&mut tape, [2, 5, 5], 1, false);
        let fi = rand_map(&mut tape, [2, 5, 5], 2, false);
        let a = fuse_daf(&mut tape, fs, fi, &att, &conv).unwrap();
        let b = fuse_df(&mut tape, fs, fi, &conv).unwrap();
        for (x, y) in tape.value(a).iter().zip(tape.value(b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_integration_shape_and_reach() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fi = FeatureIntegration::new(&mut store, "int", &[2, 3], 4, 0.2, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let s0 = rand_map(&mut tape, [2, 8, 8], 1, true);
        let i0 = rand_map(&mut tape, [2, 8, 8], 2, true);
        let s1 = rand_map(&mut tape, [3, 4, 4], 3, true);
        let i1 = rand_map(&mut tape, [3, 4, 4], 4, true);
        let y = fi.forward(&mut tape, &[s0, s1], &[i0, i1]).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 8]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        for v in [s0, i0, s1, i1] {
            assert!(g.wrt(v).unwrap().iter().any(|&x| x != 0.0));
        }
    }
}
