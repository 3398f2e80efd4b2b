//! Wengert tape: every op appends a node holding its output value; backward
//! walks the nodes in reverse and applies each op's vector-Jacobian product.

use std::collections::HashMap;

use super::conv::{col2im, im2col, ConvGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Storage<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    LeakyRelu {
        x: usize,
        slope: T,
    },
    Sigmoid {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    Concat {
        parts: Vec<usize>,
        /// Elements contributed by each part per outer index.
        inner: Vec<usize>,
        outer: usize,
    },
    SliceChannels {
        x: usize,
        start: usize,
    },
    Reshape {
        x: usize,
    },
    Upsample2x {
        x: usize,
    },
    Gather {
        x: usize,
        cells: Vec<usize>,
    },
    Scatter {
        base: usize,
        nodes: usize,
        cells: Vec<usize>,
        winner: Vec<bool>,
    },
    EdgeDiff {
        f: usize,
        neighbors: Vec<usize>,
        k: usize,
    },
    Attention {
        f: usize,
        w: usize,
        neighbors: Vec<usize>,
        k: usize,
        alpha: Vec<T>,
    },
    EndIntegrate {
        ys: usize,
        yi: usize,
        cs: usize,
        ci: usize,
    },
    MaskedMse {
        pred: usize,
        target: Vec<T>,
        mask: Vec<bool>,
        count: usize,
    },
    Smoothness {
        pred: usize,
        height: usize,
        width: usize,
        wu: Vec<T>,
        wv: Vec<T>,
    },
    Sum {
        x: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    storage: Storage<T>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
}

/// Records one forward pass. Parameters are read from the borrowed store.
pub struct Tape<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, usize>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) params: Vec<Option<Vec<T>>>,
    pub(crate) leaves: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n_params: usize) -> Self {
        Self {
            params: vec![None; n_params],
            leaves: HashMap::new(),
        }
    }

    /// Gradient for a parameter; `None` if it never appeared on the tape.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a `requires_grad` leaf.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(|g| g.as_slice())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Elementwise sum of parameter gradients (batch accumulation).
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.iter_mut().zip(t).for_each(|(a, b)| *a = *a + *b),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.params.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn zeros_like<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.data(v.0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.data(v.0).to_vec()).expect("node shape matches data")
    }

    /// Softmax weights of an attention node, one row of `k` per graph node.
    pub fn attention_weights(&self, v: Var) -> Option<(&[T], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { alpha, k, .. } => Some((alpha, *k)),
            _ => None,
        }
    }

    fn data(&self, i: usize) -> &[T] {
        match &self.nodes[i].storage {
            Storage::Owned(v) => v,
            Storage::Param(id) => self.store.get(*id).tensor.data(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            shape,
            storage: Storage::Owned(data),
            op,
            needs_grad,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves ---------------------------------------------------------

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            storage: Storage::Owned(t.into_data()),
            op: Op::Leaf,
            needs_grad: requires_grad,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&i) = self.param_nodes.get(&id) {
            return Var(i);
        }
        let shape = self.store.get(id).tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            storage: Storage::Param(id),
            op: Op::Param(id),
            needs_grad: true,
            requires_grad: true,
        });
        let i = self.nodes.len() - 1;
        self.param_nodes.insert(id, i);
        Var(i)
    }

    // ---- dense layers ---------------------------------------------------

    /// 2-D convolution of a `[C_in,H,W]` map with `[C_out,C_in,k,k]` weights.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(shape_err("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        let (co, ci, k) = (ws[0], ws[1], ws[2]);
        if ci != xs[0] || ws[3] != k || k % 2 == 0 || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?} incompatible with weight {ws:?} (stride {stride})"),
            ));
        }
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return Err(shape_err("conv2d", format!("input {xs:?} smaller than kernel {k}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {co} outputs", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            channels: ci,
            height: xs[1],
            width: xs[2],
            kernel: k,
            stride,
            pad,
        };
        let npix = geom.out_pixels();
        let mut cols = vec![T::zero(); geom.patch_len() * npix];
        im2col(self.data(x.0), &geom, &mut cols);
        let mut out = vec![T::zero(); co * npix];
        T::gemm(
            false,
            false,
            co,
            npix,
            geom.patch_len(),
            self.data(w.0),
            &cols,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.data(b.0);
            for (c, row) in out.chunks_mut(npix).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + bias[c]);
            }
        }
        let shape = vec![co, geom.out_height(), geom.out_width()];
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            &inputs,
        ))
    }

    /// Transposed convolution; weights are `[C_in,C_out,k,k]`. Output size is
    /// `(H-1)·stride - 2·pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err("conv_transpose2d", format!("input {xs:?}, weight {ws:?}")));
        }
        let (ci, co, k) = (ws[0], ws[1], ws[2]);
        if out_pad >= stride || (xs[1] - 1) * stride + k + out_pad < 2 * pad {
            return Err(shape_err("conv_transpose2d", "invalid padding"));
        }
        let ho = (xs[1] - 1) * stride + k + out_pad - 2 * pad;
        let wo = (xs[2] - 1) * stride + k + out_pad - 2 * pad;
        let geom = ConvGeom {
            channels: co,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            pad,
        };
        if geom.out_height() != xs[1] || geom.out_width() != xs[2] {
            return Err(shape_err("conv_transpose2d", "geometry is not invertible"));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err("conv_transpose2d", "bias length"));
            }
        }
        let hw = xs[1] * xs[2];
        let mut cols = vec![T::zero(); geom.patch_len() * hw];
        T::gemm(
            true,
            false,
            geom.patch_len(),
            hw,
            ci,
            self.data(w.0),
            self.data(x.0),
            T::zero(),
            &mut cols,
        );
        let mut out = vec![T::zero(); co * ho * wo];
        col2im(&cols, &geom, &mut out);
        if let Some(b) = b {
            let bias = self.data(b.0);
            for (c, plane) in out.chunks_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v + bias[c]);
            }
        }
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            vec![co, ho, wo],
            out,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            &inputs,
        ))
    }

    /// Row-wise affine map: `[N,C_in] · [C_out,C_in]ᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (n, ci, co) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err("linear", "bias length"));
            }
        }
        let mut out = vec![T::zero(); n * co];
        T::gemm(
            false,
            true,
            n,
            co,
            ci,
            self.data(x.0),
            self.data(w.0),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.data(b.0);
            for row in out.chunks_mut(co) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v = *v + *b);
            }
        }
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            vec![n, co],
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &inputs,
        ))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self
            .data(x.0)
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::LeakyRelu { x: x.0, slope }, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x.0).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sigmoid { x: x.0 }, &[x.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.data(x.0).iter().map(|v| *v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x: x.0, c }, &[x.0])
    }

    // ---- structural -----------------------------------------------------

    fn concat_along(&mut self, op: &'static str, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err(op, "no inputs"))?;
        let rank = self.shape(*first).len();
        if axis >= rank {
            return Err(shape_err(op, format!("rank {rank} input")));
        }
        let outer_dims = self.shape(*first)[..axis].to_vec();
        let trailing = self.shape(*first)[axis + 1..].to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != rank || s[..axis] != outer_dims[..] || s[axis + 1..] != trailing[..] {
                return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(*first), s)));
            }
            total += s[axis];
        }
        let outer: usize = outer_dims.iter().product();
        let tail: usize = trailing.iter().product();
        let inner: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis] * tail).collect();
        let row: usize = inner.iter().sum();
        let mut out = vec![T::zero(); outer * row];
        for o in 0..outer {
            let mut off = o * row;
            for (p, &len) in parts.iter().zip(&inner) {
                out[off..off + len].copy_from_slice(&self.data(p.0)[o * len..(o + 1) * len]);
                off += len;
            }
        }
        let mut shape = outer_dims;
        shape.push(total);
        shape.extend(trailing);
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: idx.clone(),
                inner,
                outer,
            },
            &idx,
        ))
    }

    /// Concatenate `[C_i,H,W]` maps along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat_along("concat_channels", parts, 0)
    }

    /// Concatenate `[N,C_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat_along("concat_cols", parts, 1)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || start + len > s[0] {
            return Err(shape_err("slice_channels", format!("{s:?}[{start}..{}]", start + len)));
        }
        let plane = s[1] * s[2];
        let out = self.data(x.0)[start * plane..(start + len) * plane].to_vec();
        Ok(self.push(vec![len, s[1], s[2]], out, Op::SliceChannels { x: x.0, start }, &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.data(x.0).to_vec();
        Ok(self.push(shape, out, Op::Reshape { x: x.0 }, &[x.0]))
    }

    /// Nearest-neighbour 2× upsampling of a `[C,H,W]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("upsample2x", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.data(x.0);
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample2x { x: x.0 }, &[x.0]))
    }

    /// Pick the feature vectors at flat cell indices of a `[C,H,W]` map,
    /// giving `[n,C]`.
    pub fn gather_nodes(&mut self, x: Var, cells: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("gather_nodes", format!("{s:?}")));
        }
        let (c, plane) = (s[0], s[1] * s[2]);
        if let Some(bad) = cells.iter().find(|&&p| p >= plane) {
            return Err(shape_err("gather_nodes", format!("cell {bad} outside {s:?}")));
        }
        let src = self.data(x.0);
        let mut out = Vec::with_capacity(cells.len() * c);
        for &p in cells {
            out.extend((0..c).map(|ch| src[ch * plane + p]));
        }
        Ok(self.push(
            vec![cells.len(), c],
            out,
            Op::Gather {
                x: x.0,
                cells: cells.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Write `[n,C]` node features into their cells of a `[C,H,W]` base map.
    /// When several nodes share a cell the one with the largest `priority`
    /// wins (lower index on ties); other cells pass through unchanged.
    pub fn scatter_nodes(&mut self, base: Var, nodes: Var, cells: &[usize], priority: &[f64]) -> Result<Var> {
        let s = self.shape(base).to_vec();
        let ns = self.shape(nodes).to_vec();
        if s.len() != 3 || ns.len() != 2 || ns[1] != s[0] || ns[0] != cells.len() || priority.len() != cells.len() {
            return Err(shape_err("scatter_nodes", format!("base {s:?}, nodes {ns:?}")));
        }
        let (c, plane) = (s[0], s[1] * s[2]);
        let mut best: HashMap<usize, usize> = HashMap::new();
        for (i, &p) in cells.iter().enumerate() {
            if p >= plane {
                return Err(shape_err("scatter_nodes", format!("cell {p} outside {s:?}")));
            }
            best.entry(p)
                .and_modify(|cur| {
                    if priority[i] > priority[*cur] {
                        *cur = i;
                    }
                })
                .or_insert(i);
        }
        let winner: Vec<bool> = cells.iter().enumerate().map(|(i, p)| best[p] == i).collect();
        let mut out = self.data(base.0).to_vec();
        let nd = self.data(nodes.0);
        for (i, &p) in cells.iter().enumerate() {
            if winner[i] {
                for ch in 0..c {
                    out[ch * plane + p] = nd[i * c + ch];
                }
            }
        }
        Ok(self.push(
            s,
            out,
            Op::Scatter {
                base: base.0,
                nodes: nodes.0,
                cells: cells.to_vec(),
                winner,
            },
            &[base.0, nodes.0],
        ))
    }

    /// Per-edge feature differences `f[j] - f[i]` for the `k` neighbours of
    /// every node; rows are ordered `(i, slot)`. Output `[n·k, C]`.
    pub fn edge_diff(&mut self, f: Var, neighbors: &[usize], k: usize) -> Result<Var> {
        let s = self.shape(f).to_vec();
        if s.len() != 2 || neighbors.len() != s[0] * k {
            return Err(shape_err(
                "edge_diff",
                format!("features {s:?}, {} neighbours, k={k}", neighbors.len()),
            ));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(bad) = neighbors.iter().find(|&&j| j >= n) {
            return Err(shape_err("edge_diff", format!("neighbour {bad} >= {n}")));
        }
        let src = self.data(f.0);
        let mut out = Vec::with_capacity(n * k * c);
        for i in 0..n {
            for slot in 0..k {
                let j = neighbors[i * k + slot];
                out.extend((0..c).map(|ch| src[j * c + ch] - src[i * c + ch]));
            }
        }
        Ok(self.push(
            vec![n * k, c],
            out,
            Op::EdgeDiff {
                f: f.0,
                neighbors: neighbors.to_vec(),
                k,
            },
            &[f.0],
        ))
    }

    /// Softmax the `k` logits of each node and aggregate the neighbours'
    /// features with those weights: `out_i = Σ_j α_ij f_j`.
    pub fn attention_aggregate(&mut self, f: Var, w: Var, neighbors: &[usize], k: usize) -> Result<Var> {
        let s = self.shape(f).to_vec();
        if s.len() != 2 || k == 0 || neighbors.len() != s[0] * k || self.value(w).len() != s[0] * k {
            return Err(shape_err(
                "attention_aggregate",
                format!("features {s:?}, logits {:?}, k={k}", self.shape(w)),
            ));
        }
        let (n, c) = (s[0], s[1]);
        if neighbors.iter().any(|&j| j >= n) {
            return Err(shape_err("attention_aggregate", "neighbour index out of range"));
        }
        let logits = self.data(w.0);
        if logits.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("attention logits"));
        }
        let mut alpha = vec![T::zero(); n * k];
        for i in 0..n {
            let row = &logits[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut alpha[i * k..(i + 1) * k];
            let mut z = T::zero();
            for (a, &l) in dst.iter_mut().zip(row) {
                *a = (l - m).exp();
                z = z + *a;
            }
            dst.iter_mut().for_each(|a| *a = *a / z);
        }
        let src = self.data(f.0);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let dst = &mut out[i * c..(i + 1) * c];
            for slot in 0..k {
                let j = neighbors[i * k + slot];
                let a = alpha[i * k + slot];
                for (o, v) in dst.iter_mut().zip(&src[j * c..(j + 1) * c]) {
                    *o = *o + a * *v;
                }
            }
        }
        Ok(self.push(
            vec![n, c],
            out,
            Op::Attention {
                f: f.0,
                w: w.0,
                neighbors: neighbors.to_vec(),
                k,
                alpha,
            },
            &[f.0, w.0],
        ))
    }

    // ---- heads and losses -----------------------------------------------

    /// Confidence-weighted blend `σ(c_s−c_i)·y_s + σ(c_i−c_s)·y_i`.
    pub fn end_integrate(&mut self, ys: Var, yi: Var, cs: Var, ci: Var) -> Result<Var> {
        self.same_shape("end_integrate", ys, yi)?;
        self.same_shape("end_integrate", ys, cs)?;
        self.same_shape("end_integrate", ys, ci)?;
        let out = {
            let (a, b, c, d) = (self.data(ys.0), self.data(yi.0), self.data(cs.0), self.data(ci.0));
            (0..a.len())
                .map(|p| {
                    let s = sigmoid(c[p] - d[p]);
                    s * a[p] + (T::one() - s) * b[p]
                })
                .collect()
        };
        let shape = self.shape(ys).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::EndIntegrate {
                ys: ys.0,
                yi: yi.0,
                cs: cs.0,
                ci: ci.0,
            },
            &[ys.0, yi.0, cs.0, ci.0],
        ))
    }

    /// Mean squared error over the pixels where `mask` is set. With no
    /// labelled pixels the loss is zero.
    pub fn masked_mse(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Result<Var> {
        let p = self.data(pred.0);
        if p.len() != target.len() || p.len() != mask.len() {
            return Err(shape_err(
                "masked_mse",
                format!("{} predictions, {} targets", p.len(), target.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let loss = if count == 0 {
            T::zero()
        } else {
            let s: T = p
                .iter()
                .zip(target)
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|((a, b), _)| (*b - *a) * (*b - *a))
                .sum();
            s / T::of(count as f64)
        };
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::MaskedMse {
                pred: pred.0,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[pred.0],
        ))
    }

    /// Edge-aware smoothness: mean over all pixels of `|∂Ŷ|·exp(-|∂I|)` with
    /// forward differences along both axes; `|∂I|` is the channel-mean
    /// absolute difference of `image` (`[C,H,W]`).
    pub fn smoothness(&mut self, pred: Var, image: &Tensor<T>) -> Result<Var> {
        let ps = self.shape(pred).to_vec();
        let is = image.shape();
        let (h, w) = match ps.as_slice() {
            [1, h, w] | [h, w] => (*h, *w),
            _ => return Err(shape_err("smoothness", format!("prediction {ps:?}"))),
        };
        if is.len() != 3 || is[1] != h || is[2] != w || is[0] == 0 {
            return Err(shape_err("smoothness", format!("image {is:?} vs prediction {ps:?}")));
        }
        let ch = is[0];
        let img = image.data();
        let inv_c = T::one() / T::of(ch as f64);
        let grad_mag = |a: usize, b: usize| -> T {
            let s: T = (0..ch).map(|c| (img[c * h * w + a] - img[c * h * w + b]).abs()).sum();
            (-(s * inv_c)).exp()
        };
        let mut wu = vec![T::zero(); h * w.saturating_sub(1)];
        let mut wv = vec![T::zero(); h.saturating_sub(1) * w];
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                wu[y * (w - 1) + x] = grad_mag(y * w + x + 1, y * w + x);
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                wv[y * w + x] = grad_mag((y + 1) * w + x, y * w + x);
            }
        }
        let p = self.data(pred.0);
        let mut total = T::zero();
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                total = total + (p[y * w + x + 1] - p[y * w + x]).abs() * wu[y * (w - 1) + x];
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                total = total + (p[(y + 1) * w + x] - p[y * w + x]).abs() * wv[y * w + x];
            }
        }
        let loss = total / T::of((h * w) as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Smoothness {
                pred: pred.0,
                height: h,
                width: w,
                wu,
                wv,
            },
            &[pred.0],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x.0).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum { x: x.0 }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Every parameter with a node
    /// on this tape receives a gradient (zeros if it does not influence the
    /// loss); so does every `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::empty(self.store.len());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            match &node.op {
                Op::Param(id) => out.params[id.0] = Some(g),
                Op::Leaf if node.requires_grad => {
                    out.leaves.insert(i, g);
                }
                _ => {}
            }
        }
        for (id, &i) in &self.param_nodes {
            if out.params[id.0].is_none() {
                out.params[id.0] = Some(vec![T::zero(); self.data(i).len()]);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.leaves
                    .entry(i)
                    .or_insert_with(|| vec![T::zero(); node.shape.iter().product()]);
            }
        }
        Ok(out)
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |j: usize| self.data(j).len();
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let co = self.nodes[i].shape[0];
                let npix = geom.out_pixels();
                let kk = geom.patch_len();
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let gb = zeros_like(grads, b, co);
                    for (c, row) in g.chunks(npix).enumerate() {
                        gb[c] = gb[c] + row.iter().copied().sum();
                    }
                }
                let need_w = self.wants(*w);
                let need_x = self.wants(*x);
                if need_w {
                    let mut cols = vec![T::zero(); kk * npix];
                    im2col(self.data(*x), geom, &mut cols);
                    let gw = zeros_like(grads, *w, co * kk);
                    T::gemm(false, true, co, kk, npix, g, &cols, T::one(), gw);
                }
                if need_x {
                    let mut dcols = vec![T::zero(); kk * npix];
                    T::gemm(true, false, kk, npix, co, self.data(*w), g, T::zero(), &mut dcols);
                    let gx = zeros_like(grads, *x, len(*x));
                    col2im(&dcols, geom, gx);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xs = &self.nodes[*x].shape;
                let (ci, hw) = (xs[0], xs[1] * xs[2]);
                let co = geom.channels;
                let kk = geom.patch_len();
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let plane = geom.height * geom.width;
                    let gb = zeros_like(grads, b, co);
                    for (c, row) in g.chunks(plane).enumerate() {
                        gb[c] = gb[c] + row.iter().copied().sum();
                    }
                }
                if self.wants(*x) || self.wants(*w) {
                    let mut dcols = vec![T::zero(); kk * hw];
                    im2col(g, geom, &mut dcols);
                    if self.wants(*x) {
                        let gx = zeros_like(grads, *x, ci * hw);
                        T::gemm(false, false, ci, hw, kk, self.data(*w), &dcols, T::one(), gx);
                    }
                    if self.wants(*w) {
                        let gw = zeros_like(grads, *w, ci * kk);
                        T::gemm(false, true, ci, kk, hw, self.data(*x), &dcols, T::one(), gw);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = &self.nodes[*x].shape;
                let (n, ci) = (xs[0], xs[1]);
                let co = self.nodes[*w].shape[0];
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    let gb = zeros_like(grads, b, co);
                    for row in g.chunks(co) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a = *a + *v);
                    }
                }
                if self.wants(*x) {
                    let gx = zeros_like(grads, *x, n * ci);
                    T::gemm(false, false, n, ci, co, g, self.data(*w), T::one(), gx);
                }
                if self.wants(*w) {
                    let gw = zeros_like(grads, *w, co * ci);
                    T::gemm(true, false, co, ci, n, g, self.data(*x), T::one(), gw);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.data(*x);
                let gx = zeros_like(grads, *x, xv.len());
                for ((a, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                    *a = *a + if *v > T::zero() { *gv } else { *gv * *slope };
                }
            }
            Op::Sigmoid { x } => {
                let y = self.data(i);
                let gx = zeros_like(grads, *x, y.len());
                for ((a, gv), s) in gx.iter_mut().zip(g).zip(y) {
                    *a = *a + *gv * *s * (T::one() - *s);
                }
            }
            Op::Add { a, b } => {
                for &t in [a, b] {
                    if self.wants(t) {
                        let gt = zeros_like(grads, t, g.len());
                        gt.iter_mut().zip(g).for_each(|(x, v)| *x = *x + *v);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (t, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(t) {
                        let ov = self.data(other);
                        let gt = zeros_like(grads, t, g.len());
                        for ((x, gv), o) in gt.iter_mut().zip(g).zip(ov) {
                            *x = *x + *gv * *o;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                let gx = zeros_like(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, v)| *a = *a + *v * *c);
            }
            Op::Concat { parts, inner, outer } => {
                let row: usize = inner.iter().sum();
                let mut off = 0;
                for (&p, &l) in parts.iter().zip(inner) {
                    if self.wants(p) {
                        let gp = zeros_like(grads, p, outer * l);
                        for o in 0..*outer {
                            let src = &g[o * row + off..o * row + off + l];
                            gp[o * l..(o + 1) * l]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, v)| *a = *a + *v);
                        }
                    }
                    off += l;
                }
            }
            Op::SliceChannels { x, start } => {
                let s = &self.nodes[*x].shape;
                let plane = s[1] * s[2];
                let gx = zeros_like(grads, *x, len(*x));
                gx[start * plane..start * plane + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, v)| *a = *a + *v);
            }
            Op::Reshape { x } => {
                let gx = zeros_like(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, v)| *a = *a + *v);
            }
            Op::Upsample2x { x } => {
                let s = &self.nodes[*x].shape;
                let (c, h, w) = (s[0], s[1], s[2]);
                let gx = zeros_like(grads, *x, c * h * w);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let d = (ch * h + y / 2) * w + xx / 2;
                            gx[d] = gx[d] + g[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            }
            Op::Gather { x, cells } => {
                let s = &self.nodes[*x].shape;
                let (c, plane) = (s[0], s[1] * s[2]);
                let gx = zeros_like(grads, *x, c * plane);
                for (n, &p) in cells.iter().enumerate() {
                    for ch in 0..c {
                        gx[ch * plane + p] = gx[ch * plane + p] + g[n * c + ch];
                    }
                }
            }
            Op::Scatter {
                base,
                nodes,
                cells,
                winner,
            } => {
                let s = &self.nodes[*base].shape;
                let (c, plane) = (s[0], s[1] * s[2]);
                if self.wants(*base) {
                    let gb = zeros_like(grads, *base, c * plane);
                    gb.iter_mut().zip(g).for_each(|(a, v)| *a = *a + *v);
                    for (&p, &win) in cells.iter().zip(winner) {
                        if win {
                            for ch in 0..c {
                                gb[ch * plane + p] = gb[ch * plane + p] - g[ch * plane + p];
                            }
                        }
                    }
                }
                if self.wants(*nodes) {
                    let gn = zeros_like(grads, *nodes, cells.len() * c);
                    for (n, (&p, &win)) in cells.iter().zip(winner).enumerate() {
                        if win {
                            for ch in 0..c {
                                gn[n * c + ch] = gn[n * c + ch] + g[ch * plane + p];
                            }
                        }
                    }
                }
            }
            Op::EdgeDiff { f, neighbors, k } => {
                let c = self.nodes[*f].shape[1];
                let gf = zeros_like(grads, *f, len(*f));
                for (e, &j) in neighbors.iter().enumerate() {
                    let i_node = e / k;
                    for ch in 0..c {
                        let v = g[e * c + ch];
                        gf[j * c + ch] = gf[j * c + ch] + v;
                        gf[i_node * c + ch] = gf[i_node * c + ch] - v;
                    }
                }
            }
            Op::Attention {
                f,
                w,
                neighbors,
                k,
                alpha,
            } => {
                let (n, c) = (self.nodes[*f].shape[0], self.nodes[*f].shape[1]);
                let fv = self.data(*f);
                if self.wants(*f) {
                    let gf = zeros_like(grads, *f, n * c);
                    for i in 0..n {
                        for slot in 0..*k {
                            let j = neighbors[i * k + slot];
                            let a = alpha[i * k + slot];
                            for ch in 0..c {
                                gf[j * c + ch] = gf[j * c + ch] + a * g[i * c + ch];
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let gw = zeros_like(grads, *w, n * k);
                    let mut da = vec![T::zero(); *k];
                    for i in 0..n {
                        let gi = &g[i * c..(i + 1) * c];
                        for (slot, d) in da.iter_mut().enumerate() {
                            let j = neighbors[i * k + slot];
                            *d = gi.iter().zip(&fv[j * c..(j + 1) * c]).map(|(a, b)| *a * *b).sum();
                        }
                        let row = &alpha[i * k..(i + 1) * k];
                        let dot: T = row.iter().zip(&da).map(|(a, d)| *a * *d).sum();
                        for slot in 0..*k {
                            let idx = i * k + slot;
                            gw[idx] = gw[idx] + row[slot] * (da[slot] - dot);
                        }
                    }
                }
            }
            Op::EndIntegrate { ys, yi, cs, ci } => {
                let (a, b, c, d) = (self.data(*ys), self.data(*yi), self.data(*cs), self.data(*ci));
                let s: Vec<T> = c.iter().zip(d).map(|(x, y)| sigmoid(*x - *y)).collect();
                if self.wants(*ys) {
                    let gt = zeros_like(grads, *ys, g.len());
                    for p in 0..g.len() {
                        gt[p] = gt[p] + g[p] * s[p];
                    }
                }
                if self.wants(*yi) {
                    let gt = zeros_like(grads, *yi, g.len());
                    for p in 0..g.len() {
                        gt[p] = gt[p] + g[p] * (T::one() - s[p]);
                    }
                }
                let dlogit: Vec<T> = (0..g.len())
                    .map(|p| g[p] * (a[p] - b[p]) * s[p] * (T::one() - s[p]))
                    .collect();
                if self.wants(*cs) {
                    let gt = zeros_like(grads, *cs, g.len());
                    gt.iter_mut().zip(&dlogit).for_each(|(x, v)| *x = *x + *v);
                }
                if self.wants(*ci) {
                    let gt = zeros_like(grads, *ci, g.len());
                    gt.iter_mut().zip(&dlogit).for_each(|(x, v)| *x = *x - *v);
                }
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                if *count > 0 {
                    let p = self.data(*pred);
                    let scale = g[0] * T::of(2.0) / T::of(*count as f64);
                    let gp = zeros_like(grads, *pred, p.len());
                    for q in 0..p.len() {
                        if mask[q] {
                            gp[q] = gp[q] + scale * (p[q] - target[q]);
                        }
                    }
                }
            }
            Op::Smoothness {
                pred,
                height,
                width,
                wu,
                wv,
            } => {
                let (h, w) = (*height, *width);
                let p = self.data(*pred);
                let scale = g[0] / T::of((h * w) as f64);
                let sign = |v: T| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                };
                let gp = zeros_like(grads, *pred, p.len());
                for y in 0..h {
                    for x in 0..w.saturating_sub(1) {
                        let (a, b) = (y * w + x, y * w + x + 1);
                        let d = sign(p[b] - p[a]) * wu[y * (w - 1) + x] * scale;
                        gp[b] = gp[b] + d;
                        gp[a] = gp[a] - d;
                    }
                }
                for y in 0..h.saturating_sub(1) {
                    for x in 0..w {
                        let (a, b) = (y * w + x, (y + 1) * w + x);
                        let d = sign(p[b] - p[a]) * wv[y * w + x] * scale;
                        gp[b] = gp[b] + d;
                        gp[a] = gp[a] - d;
                    }
                }
            }
            Op::Sum { x } => {
                let gx = zeros_like(grads, *x, len(*x));
                gx.iter_mut().for_each(|a| *a = *a + g[0]);
            }
        }
    }
}
