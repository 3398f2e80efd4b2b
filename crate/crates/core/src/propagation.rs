//! Attention-guided propagation among observed pixels.
//!
//! Each encoder block convolves both streams, propagates node features along
//! the level's kNN graph with softmax-normalised edge weights, scatters the
//! result back into the map, and refines the whole map with a convolution
//! plus a residual connection. With co-attention the edge weights of one
//! stream also see the other stream's feature differences.

use std::io::Write;

use rand::Rng;

use crate::autodiff::nn::{Conv2d, Linear};
use crate::autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;
use crate::graph::GraphLevel;

/// Two-layer perceptron scoring one edge: `in → hidden`, LeakyReLU,
/// `hidden → 1`.
#[derive(Debug, Clone)]
pub struct EdgeMlp {
    pub hidden: Linear,
    pub out: Linear,
    pub slope: f64,
}

impl EdgeMlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, slope, rng)?,
            out: Linear::new(store, &format!("{name}.fc2"), hidden, 1, 1.0, rng)?,
            slope,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    /// `[E, in] → [E, 1]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.leaky_relu(h, T::of(self.slope));
        self.out.forward(tape, h)
    }

    /// Put the weights on the tape without using them, so they receive zero
    /// gradients when a sample has no usable graph.
    pub fn touch<T: Scalar>(&self, tape: &mut Tape<'_, T>) {
        for id in [self.hidden.weight, self.hidden.bias, self.out.weight, self.out.bias] {
            tape.param(id);
        }
    }
}

/// Position offsets `p_j − p_i` of every edge as a constant `[n·k, dim]`.
pub fn edge_offsets<T: Scalar>(tape: &mut Tape<'_, T>, graph: &GraphLevel) -> Result<Var> {
    let dim = graph.coord_system.dim();
    let data = graph.edge_offsets().into_iter().map(T::of).collect();
    Ok(tape.constant(Tensor::new(vec![graph.len() * graph.k, dim], data)?))
}

/// Edge logits from one stream: `f([Δp ‖ ΔF])`, shaped `[n, k]`.
pub fn edge_weights_single<T: Scalar>(
    tape: &mut Tape<'_, T>,
    nodes_f: Var,
    graph: &GraphLevel,
    mlp: &EdgeMlp,
) -> Result<Var> {
    let dp = edge_offsets(tape, graph)?;
    let df = tape.edge_diff(nodes_f, &graph.neighbors, graph.k)?;
    let x = tape.concat_cols(&[dp, df])?;
    let w = mlp.forward(tape, x)?;
    tape.reshape(w, vec![graph.len(), graph.k])
}

/// Co-attention logits: depth weights from `[Δp ‖ ΔF_S ‖ ΔF_I]`, image
/// weights from `[Δp ‖ ΔF_I ‖ ΔF_S]`.
pub fn edge_weights_co<T: Scalar>(
    tape: &mut Tape<'_, T>,
    depth_f: Var,
    image_f: Var,
    graph: &GraphLevel,
    mlp_s: &EdgeMlp,
    mlp_i: &EdgeMlp,
) -> Result<(Var, Var)> {
    let dp = edge_offsets(tape, graph)?;
    let ds = tape.edge_diff(depth_f, &graph.neighbors, graph.k)?;
    let di = tape.edge_diff(image_f, &graph.neighbors, graph.k)?;
    let xs = tape.concat_cols(&[dp, ds, di])?;
    let xi = tape.concat_cols(&[dp, di, ds])?;
    let ws = mlp_s.forward(tape, xs)?;
    let wi = mlp_i.forward(tape, xi)?;
    let shape = vec![graph.len(), graph.k];
    Ok((tape.reshape(ws, shape.clone())?, tape.reshape(wi, shape)?))
}

/// Softmax the logits over each neighbourhood and aggregate neighbour
/// features.
pub fn attention_aggregate<T: Scalar>(tape: &mut Tape<'_, T>, nodes_f: Var, w: Var, graph: &GraphLevel) -> Result<Var> {
    tape.attention_aggregate(nodes_f, w, &graph.neighbors, graph.k)
}

/// Write one level's normalised edge weights as `level,i,j,alpha` rows.
pub fn write_attention_csv<W: Write, T: Scalar>(graph: &GraphLevel, alpha: &[T], mut w: W) -> Result<()> {
    writeln!(w, "level,i,j,alpha")?;
    for i in 0..graph.len() {
        for (slot, &j) in graph.neighbors_of(i).iter().enumerate() {
            writeln!(w, "{},{i},{j},{}", graph.level, alpha[i * graph.k + slot])?;
        }
    }
    Ok(())
}

/// Which streams' differences feed each stream's edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Each stream scores edges from its own features only.
    Single,
    /// Each stream also sees the partner's feature differences.
    Co,
}

/// Graph propagation on a pair of `[C, H, W]` maps followed by an
/// enhancement convolution and a residual connection. Stride 2 halves the
/// resolution first.
#[derive(Debug, Clone)]
pub struct Cgpm {
    pub conv_s: Conv2d,
    pub conv_i: Conv2d,
    pub enh_s: Conv2d,
    pub enh_i: Conv2d,
    /// `None` builds a convolution-only block.
    pub mlps: Option<(EdgeMlp, EdgeMlp)>,
    pub mode: AttentionMode,
    pub slope: f64,
}

/// Outputs of one [`Cgpm`] pass.
#[derive(Debug, Clone, Copy)]
pub struct CgpmOutput {
    pub depth: Var,
    pub image: Var,
    /// Aggregation nodes of both streams, when propagation ran. Their
    /// normalised weights are available through [`Tape::attention_weights`].
    pub attention: Option<(Var, Var)>,
}

/// Width and geometry of a [`Cgpm`].
#[derive(Debug, Clone, Copy)]
pub struct CgpmShape {
    pub in_depth: usize,
    pub in_image: usize,
    pub out: usize,
    pub stride: usize,
    /// Spatial dimension of edge offsets (2 or 3).
    pub pos_dim: usize,
}

impl Cgpm {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: CgpmShape,
        propagate: Option<AttentionMode>,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let c = shape.out;
        let conv_s = Conv2d::new(
            store,
            &format!("{name}.depth.conv"),
            shape.in_depth,
            c,
            3,
            shape.stride,
            slope,
            rng,
        )?;
        let conv_i = Conv2d::new(
            store,
            &format!("{name}.image.conv"),
            shape.in_image,
            c,
            3,
            shape.stride,
            slope,
            rng,
        )?;
        let mlps = match propagate {
            Some(mode) => {
                let in_dim = shape.pos_dim + if mode == AttentionMode::Co { 2 * c } else { c };
                Some((
                    EdgeMlp::new(store, &format!("{name}.depth.edge"), in_dim, c, slope, rng)?,
                    EdgeMlp::new(store, &format!("{name}.image.edge"), in_dim, c, slope, rng)?,
                ))
            }
            None => None,
        };
        let enh_s = Conv2d::new(store, &format!("{name}.depth.enhance"), c, c, 3, 1, slope, rng)?;
        let enh_i = Conv2d::new(store, &format!("{name}.image.enhance"), c, c, 3, 1, slope, rng)?;
        Ok(Self {
            conv_s,
            conv_i,
            enh_s,
            enh_i,
            mlps,
            mode: propagate.unwrap_or(AttentionMode::Co),
            slope,
        })
    }

    pub fn propagates(&self) -> bool {
        self.mlps.is_some()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        depth_in: Var,
        image_in: Var,
        graph: Option<&GraphLevel>,
    ) -> Result<CgpmOutput> {
        let slope = T::of(self.slope);
        let fs = self.conv_s.forward(tape, depth_in)?;
        let fs = tape.leaky_relu(fs, slope);
        let fi = self.conv_i.forward(tape, image_in)?;
        let fi = tape.leaky_relu(fi, slope);
        let (ss, si, attention) = match (&self.mlps, graph) {
            (Some(mlps), Some(g)) if g.can_propagate() => {
                let (ss, si, att) = self.propagate(tape, fs, fi, g, mlps)?;
                (ss, si, Some(att))
            }
            (Some((ms, mi)), _) => {
                ms.touch(tape);
                mi.touch(tape);
                (fs, fi, None)
            }
            (None, _) => (fs, fi, None),
        };
        let depth = self.enhance(tape, &self.enh_s, ss)?;
        let image = self.enhance(tape, &self.enh_i, si)?;
        Ok(CgpmOutput {
            depth,
            image,
            attention,
        })
    }

    fn propagate<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        fs: Var,
        fi: Var,
        g: &GraphLevel,
        (ms, mi): &(EdgeMlp, EdgeMlp),
    ) -> Result<(Var, Var, (Var, Var))> {
        let cells = g.cells();
        let ns = tape.gather_nodes(fs, &cells)?;
        let ni = tape.gather_nodes(fi, &cells)?;
        let (ws, wi) = match self.mode {
            AttentionMode::Co => edge_weights_co(tape, ns, ni, g, ms, mi)?,
            AttentionMode::Single => (
                edge_weights_single(tape, ns, g, ms)?,
                edge_weights_single(tape, ni, g, mi)?,
            ),
        };
        let as_ = attention_aggregate(tape, ns, ws, g)?;
        let ai = attention_aggregate(tape, ni, wi, g)?;
        let ss = tape.scatter_nodes(fs, as_, &cells, &g.node_depth)?;
        let si = tape.scatter_nodes(fi, ai, &cells, &g.node_depth)?;
        Ok((ss, si, (as_, ai)))
    }

    fn enhance<T: Scalar>(&self, tape: &mut Tape<'_, T>, conv: &Conv2d, x: Var) -> Result<Var> {
        let e = conv.forward(tape, x)?;
        let e = tape.leaky_relu(e, T::of(self.slope));
        tape.add(e, x)
    }
}
