mod common;

use acmnet::autodiff::{ParamStore, Tape, Tensor, Var};
use acmnet::graph::{build_pyramid, CameraIntrinsics, CoordSystem, GraphConfig, GraphLevel, SparseDepthMap};
use acmnet::propagation::{attention_aggregate, edge_weights_co, AttentionMode, Cgpm, CgpmShape, EdgeMlp};
use common::{random_tensor, rng};
use rand::seq::SliceRandom;
use rand::Rng;

fn graph(seed: u64, n: usize, coord: CoordSystem) -> GraphLevel {
    let mut r = rng(seed);
    let depth = (0..256)
        .map(|_| {
            if r.random_bool(0.4) {
                r.random_range(1.0..40.0)
            } else {
                0.0
            }
        })
        .collect();
    let map = SparseDepthMap::from_depth(16, 16, depth).unwrap();
    let cam = CameraIntrinsics::new(15.0, 15.0, 7.5, 7.5).unwrap();
    let cfg = GraphConfig {
        levels: 1,
        k: 6,
        nodes_per_level: vec![n],
        coord_system: coord,
    };
    build_pyramid(&map, &cam, &cfg, seed).unwrap().graphs.remove(0)
}

/// Relabel nodes so that old node `i` becomes `perm[i]`.
fn relabel(g: &GraphLevel, perm: &[usize]) -> GraphLevel {
    let n = g.len();
    let mut out = g.clone();
    for i in 0..n {
        let p = perm[i];
        out.node_pix[p] = g.node_pix[i];
        out.node_xyz[p] = g.node_xyz[i];
        out.node_depth[p] = g.node_depth[i];
        for s in 0..g.k {
            out.neighbors[p * g.k + s] = perm[g.neighbors[i * g.k + s]];
        }
    }
    out
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = t.shape()[1];
    let mut data = vec![0.0; t.numel()];
    for (i, &p) in perm.iter().enumerate() {
        data[p * c..(p + 1) * c].copy_from_slice(&t.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

struct Propagated {
    depth: Vec<f64>,
    image: Vec<f64>,
    alpha: Vec<f64>,
}

fn propagate(
    store: &ParamStore<f64>,
    mlps: &(EdgeMlp, EdgeMlp),
    g: &GraphLevel,
    fs: &Tensor<f64>,
    fi: &Tensor<f64>,
) -> Propagated {
    let mut tape = Tape::new(store);
    let (s, i) = (tape.constant(fs.clone()), tape.constant(fi.clone()));
    let (ws, wi) = edge_weights_co(&mut tape, s, i, g, &mlps.0, &mlps.1).unwrap();
    let out_s: Var = attention_aggregate(&mut tape, s, ws, g).unwrap();
    let out_i = attention_aggregate(&mut tape, i, wi, g).unwrap();
    Propagated {
        depth: tape.value(out_s).to_vec(),
        image: tape.value(out_i).to_vec(),
        alpha: tape.attention_weights(out_s).unwrap().0.to_vec(),
    }
}

fn setup(c: usize, dim: usize, seed: u64) -> (ParamStore<f64>, (EdgeMlp, EdgeMlp)) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let a = EdgeMlp::new(&mut store, "s", dim + 2 * c, c, 0.2, &mut r).unwrap();
    let b = EdgeMlp::new(&mut store, "i", dim + 2 * c, c, 0.2, &mut r).unwrap();
    (store, (a, b))
}

#[test]
fn weights_match_direct_softmax() {
    let g = graph(1, 60, CoordSystem::Camera3d);
    let (store, mlps) = setup(4, 3, 2);
    let mut r = rng(3);
    let fs = random_tensor(&mut r, &[g.len(), 4], -1.0, 1.0);
    let fi = random_tensor(&mut r, &[g.len(), 4], -1.0, 1.0);
    let mut tape = Tape::new(&store);
    let (s, i) = (tape.constant(fs), tape.constant(fi));
    let (ws, _) = edge_weights_co(&mut tape, s, i, &g, &mlps.0, &mlps.1).unwrap();
    let out = attention_aggregate(&mut tape, s, ws, &g).unwrap();
    let logits = tape.value(ws).to_vec();
    let (alpha, k) = tape.attention_weights(out).unwrap();
    for node in 0..g.len() {
        let row = &logits[node * k..(node + 1) * k];
        let z: f64 = row.iter().map(|l| l.exp()).sum();
        for s in 0..k {
            assert!((alpha[node * k + s] - row[s].exp() / z).abs() < 1e-6);
        }
        let total: f64 = alpha[node * k..(node + 1) * k].iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
    }
}

#[test]
fn saturated_logits_select_first_neighbour() {
    let g = GraphLevel {
        level: 1,
        width: 2,
        height: 2,
        coord_system: CoordSystem::Pixel2d,
        node_pix: vec![[0, 0], [1, 0], [0, 1]],
        node_xyz: vec![[0.0; 3]; 3],
        node_depth: vec![1.0; 3],
        neighbors: vec![1, 2, 0, 2, 0, 1],
        k: 2,
        degenerate: true,
    };
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let f = tape.constant(Tensor::new(vec![3, 1], vec![10.0, 20.0, 30.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![3, 2], vec![50.0, -50.0, 50.0, -50.0, 50.0, -50.0]).unwrap());
    let out = attention_aggregate(&mut tape, f, w, &g).unwrap();
    for (o, e) in tape.value(out).iter().zip([20.0, 10.0, 10.0]) {
        assert!((o - e).abs() < 1e-9);
    }
}

#[test]
fn node_relabelling_is_equivariant() {
    let g = graph(4, 50, CoordSystem::Camera3d);
    let (store, mlps) = setup(3, 3, 5);
    let mut r = rng(6);
    let fs = random_tensor(&mut r, &[g.len(), 3], -1.0, 1.0);
    let fi = random_tensor(&mut r, &[g.len(), 3], -1.0, 1.0);
    let mut perm: Vec<usize> = (0..g.len()).collect();
    perm.shuffle(&mut r);
    let a = propagate(&store, &mlps, &g, &fs, &fi);
    let b = propagate(
        &store,
        &mlps,
        &relabel(&g, &perm),
        &permute_rows(&fs, &perm),
        &permute_rows(&fi, &perm),
    );
    for (i, &p) in perm.iter().enumerate() {
        for ch in 0..3 {
            assert!((a.depth[i * 3 + ch] - b.depth[p * 3 + ch]).abs() < 1e-12);
            assert!((a.image[i * 3 + ch] - b.image[p * 3 + ch]).abs() < 1e-12);
        }
    }
}

#[test]
fn neighbour_order_does_not_matter() {
    for coord in [CoordSystem::Pixel2d, CoordSystem::Camera3d] {
        let g = graph(7, 80, coord);
        let (store, mlps) = setup(4, coord.dim(), 8);
        let mut r = rng(9);
        let fs = random_tensor(&mut r, &[g.len(), 4], -1.0, 1.0);
        let fi = random_tensor(&mut r, &[g.len(), 4], -1.0, 1.0);
        let mut shuffled = g.clone();
        for row in shuffled.neighbors.chunks_mut(g.k) {
            row.shuffle(&mut r);
        }
        let a = propagate(&store, &mlps, &g, &fs, &fi);
        let b = propagate(&store, &mlps, &shuffled, &fs, &fi);
        let worst = a
            .depth
            .iter()
            .chain(&a.image)
            .zip(b.depth.iter().chain(&b.image))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
        assert_eq!(a.alpha.len(), g.len() * g.k);
    }
}

#[test]
fn swapped_streams_swap_outputs_with_shared_weights() {
    let g = graph(10, 40, CoordSystem::Camera3d);
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(11);
    let m = EdgeMlp::new(&mut store, "shared", 3 + 2 * 4, 4, 0.2, &mut r).unwrap();
    let pair = (m.clone(), m);
    let fs = random_tensor(&mut r, &[g.len(), 4], -1.0, 1.0);
    let fi = random_tensor(&mut r, &[g.len(), 4], -1.0, 1.0);
    let a = propagate(&store, &pair, &g, &fs, &fi);
    let b = propagate(&store, &pair, &g, &fi, &fs);
    assert_eq!(a.depth, b.image);
    assert_eq!(a.image, b.depth);
}

fn cgpm_output(
    cgpm: &Cgpm,
    store: &ParamStore<f64>,
    g: Option<&GraphLevel>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
) -> Vec<f64> {
    let mut tape = Tape::new(store);
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let out = cgpm.forward(&mut tape, a, b, g).unwrap();
    let mut v = tape.value(out.depth).to_vec();
    v.extend_from_slice(tape.value(out.image));
    v
}

#[test]
fn empty_graph_reduces_to_convolution_path() {
    let shape = CgpmShape {
        in_depth: 2,
        in_image: 3,
        out: 4,
        stride: 2,
        pos_dim: 3,
    };
    let mut with_store = ParamStore::<f64>::new();
    let with = Cgpm::new(&mut with_store, "m", shape, Some(AttentionMode::Co), 0.2, &mut rng(12)).unwrap();
    let mut without_store = ParamStore::<f64>::new();
    let without = Cgpm::new(&mut without_store, "m", shape, None, 0.2, &mut rng(13)).unwrap();
    let shared: Vec<(String, Tensor<f64>)> = without_store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.clone()))
        .collect();
    for (name, _) in &shared {
        let src = with_store.id(name).unwrap();
        let dst = without_store.id(name).unwrap();
        without_store.get_mut(dst).tensor = with_store.get(src).tensor.clone();
    }
    let mut r = rng(14);
    let x = random_tensor(&mut r, &[2, 16, 16], -1.0, 1.0);
    let y = random_tensor(&mut r, &[3, 16, 16], -1.0, 1.0);
    let empty = GraphLevel {
        level: 1,
        width: 8,
        height: 8,
        coord_system: CoordSystem::Camera3d,
        node_pix: Vec::new(),
        node_xyz: Vec::new(),
        node_depth: Vec::new(),
        neighbors: Vec::new(),
        k: 0,
        degenerate: true,
    };
    let a = cgpm_output(&with, &with_store, Some(&empty), &x, &y);
    let b = cgpm_output(&without, &without_store, None, &x, &y);
    assert_eq!(a, b);
    let g = graph(15, 30, CoordSystem::Camera3d);
    let c = cgpm_output(&with, &with_store, Some(&g), &x, &y);
    assert_ne!(a, c);
}
