use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Integration, ModelConfig};
use crate::autodiff::nn::Conv2d;
use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{FeatureIntegration, FusionLevel, LevelShape};
use crate::graph::{build_pyramid, CameraIntrinsics, Pyramid, SparseDepthMap};
use crate::propagation::{AttentionMode, Cgpm, CgpmShape};

/// Two-stream encoder with graph propagation, two-branch fusion decoder and
/// prediction heads. Holds parameter ids only; weights live in a
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Acmnet {
    pub cfg: ModelConfig,
    stem_s: [Conv2d; 2],
    stem_i: [Conv2d; 2],
    /// Two blocks per level `1..=L`.
    encoder: Vec<[Cgpm; 2]>,
    /// Propagation on decoder features at levels `1..=L`.
    decoder_prop: Vec<Option<Cgpm>>,
    /// Levels `0..=L`.
    fusion: Vec<FusionLevel>,
    head_s: Conv2d,
    head_i: Conv2d,
    confidence: Option<(Conv2d, Conv2d)>,
    integration: Option<FeatureIntegration>,
}

/// Normalised edge weights recorded during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LevelAttention {
    pub level: usize,
    pub depth: Var,
    pub image: Var,
}

/// Tape handles of one forward pass. Predictions are `[1, H, W]` in meters.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub y: Var,
    pub y_s: Var,
    pub y_i: Var,
    /// Confidence logits of the two branches (end integration only).
    pub confidence: Option<(Var, Var)>,
    /// Gates of the finest level, depth branch first (gated fusion only).
    pub gates: Option<(Var, Var)>,
    /// Fused decoder features per level, index 0 = finest.
    pub q_si: Vec<Var>,
    pub q_is: Vec<Var>,
    /// Encoder attention, last block of each level.
    pub attention: Vec<LevelAttention>,
    /// Some level had no observed pixels, so propagation was skipped there.
    pub graph_free: bool,
}

fn act<T: Scalar>(tape: &mut Tape<'_, T>, conv: &Conv2d, x: Var, slope: f64) -> Result<Var> {
    let h = conv.forward(tape, x)?;
    Ok(tape.leaky_relu(h, T::of(slope)))
}

impl Acmnet {
    /// Register all parameters in `store`, initialised from `cfg.seed`.
    pub fn new<T: Scalar>(cfg: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng = &mut rng;
        let s = cfg.leaky_slope;
        let c0 = cfg.width(0);
        let stem_s = [
            Conv2d::new(store, "stem.depth.0", 1, c0, 3, 1, s, rng)?,
            Conv2d::new(store, "stem.depth.1", c0, c0, 3, 1, s, rng)?,
        ];
        let stem_i = [
            Conv2d::new(store, "stem.image.0", 3, c0, 3, 1, s, rng)?,
            Conv2d::new(store, "stem.image.1", c0, c0, 3, 1, s, rng)?,
        ];
        let mode = if cfg.co_attention {
            AttentionMode::Co
        } else {
            AttentionMode::Single
        };
        let pos_dim = cfg.coord_system.dim();
        let enc_prop = cfg.propagation_placement.encoder().then_some(mode);
        let mut encoder = Vec::with_capacity(cfg.levels);
        let mut decoder_prop = Vec::with_capacity(cfg.levels);
        for l in 1..=cfg.levels {
            let (cin, c) = (cfg.width(l - 1), cfg.width(l));
            let first = CgpmShape {
                in_depth: cin,
                in_image: cin,
                out: c,
                stride: 2,
                pos_dim,
            };
            let second = CgpmShape {
                in_depth: c,
                in_image: c,
                stride: 1,
                ..first
            };
            encoder.push([
                Cgpm::new(store, &format!("enc.l{l}.b0"), first, enc_prop, s, rng)?,
                Cgpm::new(store, &format!("enc.l{l}.b1"), second, enc_prop, s, rng)?,
            ]);
            decoder_prop.push(if cfg.propagation_placement.decoder() {
                Some(Cgpm::new(store, &format!("dec.l{l}.prop"), second, Some(mode), s, rng)?)
            } else {
                None
            });
        }
        let mut fusion = Vec::with_capacity(cfg.levels + 1);
        for l in 0..=cfg.levels {
            let shape = LevelShape {
                channels: cfg.width(l),
                up_channels: (l > 0).then(|| cfg.width(l - 1)),
                has_coarser: l < cfg.levels,
                residual: l > 0,
            };
            fusion.push(FusionLevel::new(
                store,
                &format!("dec.l{l}"),
                cfg.fusion,
                shape,
                s,
                rng,
            )?);
        }
        let head_s = Conv2d::new(store, "head.depth", c0, 1, 3, 1, 1.0, rng)?;
        let head_i = Conv2d::new(store, "head.image", c0, 1, 3, 1, 1.0, rng)?;
        let (confidence, integration) = match cfg.integration {
            Integration::End => (
                Some((
                    Conv2d::new(store, "conf.depth", c0, 1, 3, 1, 1.0, rng)?,
                    Conv2d::new(store, "conf.image", c0, 1, 3, 1, 1.0, rng)?,
                )),
                None,
            ),
            Integration::Feature => {
                let widths: Vec<usize> = (0..=cfg.levels).map(|l| cfg.width(l)).collect();
                let fi = FeatureIntegration::new(store, "integrate", &widths, cfg.integration_channels, s, rng)?;
                (None, Some(fi))
            }
        };
        Ok(Self {
            cfg,
            stem_s,
            stem_i,
            encoder,
            decoder_prop,
            fusion,
            head_s,
            head_i,
            confidence,
            integration,
        })
    }

    /// Model plus a fresh 32-bit parameter store.
    pub fn init(cfg: ModelConfig) -> Result<(Self, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Self::new(cfg, &mut store)?;
        Ok((model, store))
    }

    /// Graphs for one input under this model's graph settings.
    pub fn pyramid(&self, sparse: &SparseDepthMap, cam: &CameraIntrinsics, seed: u64) -> Result<Pyramid> {
        self.cfg.check_input(sparse.width(), sparse.height())?;
        build_pyramid(sparse, cam, &self.cfg.graph(), seed)
    }

    /// Run the network on `pyramid.maps[0]` and an RGB image `[3, H, W]`
    /// with values in `[0, 1]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        pyramid: &Pyramid,
        rgb: &Tensor<f32>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let sparse = &pyramid.maps[0];
        let (w, h) = (sparse.width(), sparse.height());
        cfg.check_input(w, h)?;
        if rgb.shape() != [3, h, w] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match {h}x{w} depth",
                rgb.shape()
            )));
        }
        if pyramid.graphs.len() != cfg.levels {
            return Err(Error::Config(format!(
                "pyramid has {} graph levels, model expects {}",
                pyramid.graphs.len(),
                cfg.levels
            )));
        }
        let inv = 1.0 / cfg.depth_scale;
        let depth = sparse.depth().iter().map(|&d| T::of(d as f64 * inv)).collect();
        let xs = tape.constant(Tensor::new(vec![1, h, w], depth)?);
        let xi = tape.constant(rgb.cast());
        let slope = cfg.leaky_slope;

        let s0 = act(tape, &self.stem_s[0], xs, slope)?;
        let s0 = act(tape, &self.stem_s[1], s0, slope)?;
        let i0 = act(tape, &self.stem_i[0], xi, slope)?;
        let i0 = act(tape, &self.stem_i[1], i0, slope)?;
        let mut f_s = vec![s0];
        let mut f_i = vec![i0];
        let mut attention = Vec::new();
        for (idx, blocks) in self.encoder.iter().enumerate() {
            let l = idx + 1;
            let g = pyramid.graph(l);
            let a = blocks[0].forward(tape, f_s[idx], f_i[idx], Some(g))?;
            let b = blocks[1].forward(tape, a.depth, a.image, Some(g))?;
            if let Some((d, i)) = b.attention {
                attention.push(LevelAttention {
                    level: l,
                    depth: d,
                    image: i,
                });
            }
            f_s.push(b.depth);
            f_i.push(b.image);
        }

        let mut q_si = vec![None; cfg.levels + 1];
        let mut q_is = vec![None; cfg.levels + 1];
        let (mut up_s, mut up_i) = (None, None);
        let mut gates = None;
        for l in (0..=cfg.levels).rev() {
            let mut out = self.fusion[l].fuse(tape, up_s, up_i, f_s[l], f_i[l])?;
            if l > 0 {
                if let Some(p) = &self.decoder_prop[l - 1] {
                    let o = p.forward(tape, out.q_si, out.q_is, Some(pyramid.graph(l)))?;
                    out.q_si = o.depth;
                    out.q_is = o.image;
                }
            }
            let out = self.fusion[l].upsample(tape, out)?;
            q_si[l] = Some(out.q_si);
            q_is[l] = Some(out.q_is);
            up_s = out.q_si_up;
            up_i = out.q_is_up;
            if l == 0 {
                gates = out.gates;
            }
        }
        let q_si: Vec<Var> = q_si.into_iter().map(|q| q.expect("every level decoded")).collect();
        let q_is: Vec<Var> = q_is.into_iter().map(|q| q.expect("every level decoded")).collect();

        let scale = T::of(cfg.depth_scale);
        let ys = self.head_s.forward(tape, q_si[0])?;
        let y_s = tape.scale(ys, scale);
        let yi = self.head_i.forward(tape, q_is[0])?;
        let y_i = tape.scale(yi, scale);
        let (y, confidence) = match (&self.confidence, &self.integration) {
            (Some((cs, ci)), _) => {
                let c_s = cs.forward(tape, q_si[0])?;
                let c_i = ci.forward(tape, q_is[0])?;
                (tape.end_integrate(y_s, y_i, c_s, c_i)?, Some((c_s, c_i)))
            }
            (None, Some(fi)) => {
                let y = fi.forward(tape, &q_si, &q_is)?;
                (tape.scale(y, scale), None)
            }
            (None, None) => unreachable!("one integration head is always built"),
        };
        Ok(ForwardOutput {
            y,
            y_s,
            y_i,
            confidence,
            gates,
            q_si,
            q_is,
            attention,
            graph_free: pyramid.has_empty_level(),
        })
    }

    /// Dense prediction in meters without keeping the tape.
    pub fn predict(&self, store: &ParamStore<f32>, pyramid: &Pyramid, rgb: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, pyramid, rgb)?;
        Ok(tape.value(out.y).to_vec())
    }
}
