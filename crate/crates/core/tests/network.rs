mod common;

use acmnet::autodiff::{ParamStore, Tape, Tensor, Var};
use acmnet::data::{generate_scene, sparsify, SparsePattern};
use acmnet::fusion::FusionStrategy;
use acmnet::graph::SparseDepthMap;
use acmnet::network::{
    compute_metrics, loss_mse, loss_smooth, loss_total, Acmnet, Integration, MetricsAccumulator, ModelConfig, Placement,
};
use common::rng;
use rand::Rng;

fn row(tape: &mut Tape<'_, f64>, v: &[f64]) -> Var {
    tape.leaf(Tensor::new(vec![1, 1, v.len()], v.to_vec()).unwrap(), true)
}

fn gt(v: &[f32]) -> SparseDepthMap {
    SparseDepthMap::from_depth(v.len(), 1, v.to_vec()).unwrap()
}

fn flat_image(w: usize, h: usize) -> Tensor<f32> {
    Tensor::full(vec![3, h, w], 0.5)
}

#[test]
fn mse_counts_labelled_pixels_only() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let p = row(&mut tape, &[3.0, 9.0, 4.0]);
    let l = loss_mse(&mut tape, p, &gt(&[2.0, 0.0, 4.0])).unwrap();
    assert!((tape.value(l)[0] - 0.5).abs() < 1e-6);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(p).unwrap()[1], 0.0);

    let mut tape = Tape::new(&store);
    let p = row(&mut tape, &[2.0, 1.0, 4.0]);
    let l = loss_mse(&mut tape, p, &gt(&[2.0, 0.0, 4.0])).unwrap();
    assert_eq!(tape.value(l)[0], 0.0);
}

#[test]
fn smoothness_of_constant_and_ramp() {
    let store = ParamStore::<f64>::new();
    let (w, h) = (4, 3);
    let mut tape = Tape::new(&store);
    let c = tape.leaf(Tensor::full(vec![1, h, w], 7.0), true);
    let l = loss_smooth(&mut tape, c, &flat_image(w, h)).unwrap();
    assert_eq!(tape.value(l)[0], 0.0);

    let s = -0.5;
    let ramp: Vec<f64> = (0..h * w).map(|p| s * (p % w) as f64).collect();
    let mut tape = Tape::new(&store);
    let r = tape.leaf(Tensor::new(vec![1, h, w], ramp).unwrap(), true);
    let l = loss_smooth(&mut tape, r, &flat_image(w, h)).unwrap();
    // Forward differences exist on W-1 of every W columns; the mean runs
    // over all H·W pixels.
    let expected = s.abs() * (w - 1) as f64 / w as f64;
    assert!((tape.value(l)[0] - expected).abs() < 1e-6);
}

#[test]
fn smoothness_prefers_depth_edges_on_image_edges() {
    let (w, h) = (8, 4);
    let mut img = vec![0.0f32; 3 * h * w];
    for ch in 0..3 {
        for y in 0..h {
            for x in 4..w {
                img[(ch * h + y) * w + x] = 1.0;
            }
        }
    }
    let img = Tensor::new(vec![3, h, w], img).unwrap();
    let step_at = |col: usize| -> Vec<f64> { (0..h * w).map(|p| if p % w >= col { 10.0 } else { 2.0 }).collect() };
    let store = ParamStore::<f64>::new();
    let eval = |d: Vec<f64>| {
        let mut tape = Tape::new(&store);
        let v = tape.leaf(Tensor::new(vec![1, h, w], d).unwrap(), true);
        let l = loss_smooth(&mut tape, v, &img).unwrap();
        tape.value(l)[0]
    };
    assert!(eval(step_at(4)) < eval(step_at(2)));
}

#[test]
fn total_combines_terms_with_weights() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let y = row(&mut tape, &[3.0, 9.0, 4.0]);
    let ys = row(&mut tape, &[2.0, 5.0, 6.0]);
    let yi = row(&mut tape, &[4.0, 1.0, 4.0]);
    let g = gt(&[2.0, 0.0, 4.0]);
    let l = loss_total(&mut tape, y, ys, yi, &g, &flat_image(3, 1), 0.5, 0.01).unwrap();
    // mse 0.5, branch mses 2 and 2, smoothness (6 + 5) / 3.
    let expected = 0.5 + 0.5 * 4.0 + 0.01 * 11.0 / 3.0;
    assert!((tape.value(l.total)[0] - expected).abs() < 1e-6);
    let l0 = loss_total(&mut tape, y, ys, yi, &g, &flat_image(3, 1), 0.0, 0.0).unwrap();
    assert_eq!(tape.value(l0.total)[0], tape.value(l0.mse)[0]);
}

#[test]
fn default_loss_weights() {
    let c = ModelConfig::default();
    assert_eq!((c.gamma1, c.gamma2), (0.5, 0.01));
}

#[test]
fn metrics_strict_threshold_example() {
    let m = compute_metrics(&gt(&[2.0; 4]), &[2.5; 4]).unwrap();
    assert!((m.rel - 0.25).abs() < 1e-12);
    assert_eq!(m.delta1, 0.0);
    assert_eq!(m.delta2, 100.0);
    assert!((m.rmse - 500.0).abs() < 1e-9);
    assert!((m.irmse - 100.0).abs() < 1e-9);
    let p = compute_metrics(&gt(&[2.0, 3.0]), &[2.0, 3.0]).unwrap();
    assert_eq!((p.rmse, p.mae, p.delta1), (0.0, 0.0, 100.0));
}

/// Per-pixel loop with the textbook definitions.
fn naive_metrics(gt: &[f32], pred: &[f32]) -> [f64; 8] {
    let pairs: Vec<(f64, f64)> = gt
        .iter()
        .zip(pred)
        .filter(|(g, _)| **g > 0.0)
        .map(|(&g, &p)| (g as f64, (p as f64).max(1e-3)))
        .collect();
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(g, p)| f(g, p)).sum::<f64>() / n;
    let within = |t: i32| 100.0 * mean(&|g, p| if (p / g).max(g / p) < 1.25f64.powi(t) { 1.0 } else { 0.0 });
    [
        1000.0 * mean(&|g, p| (p - g) * (p - g)).sqrt(),
        1000.0 * mean(&|g, p| (p - g).abs()),
        1000.0 * mean(&|g, p| (1.0 / p - 1.0 / g).powi(2)).sqrt(),
        1000.0 * mean(&|g, p| (1.0 / p - 1.0 / g).abs()),
        mean(&|g, p| (p - g).abs() / g),
        within(1),
        within(2),
        within(3),
    ]
}

#[test]
fn metrics_match_per_pixel_oracle() {
    let mut r = rng(1);
    for _ in 0..20 {
        let g: Vec<f32> = (0..300)
            .map(|_| {
                if r.random_bool(0.6) {
                    r.random_range(1.0..40.0)
                } else {
                    0.0
                }
            })
            .collect();
        let p: Vec<f32> = g
            .iter()
            .map(|&v| v * r.random_range(0.6..1.5) + r.random_range(-0.5..0.5))
            .collect();
        let m = compute_metrics(&gt(&g), &p).unwrap();
        for (a, b) in m.values().iter().zip(naive_metrics(&g, &p)) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn merged_accumulators_equal_pooled_pixels() {
    let mut r = rng(2);
    let maps: Vec<(Vec<f32>, Vec<f32>)> = (0..4)
        .map(|_| {
            let g: Vec<f32> = (0..50).map(|_| r.random_range(1.0..10.0)).collect();
            let p = g.iter().map(|v| v + r.random_range(-1.0..1.0)).collect();
            (g, p)
        })
        .collect();
    let mut merged = MetricsAccumulator::default();
    for (g, p) in &maps {
        let mut a = MetricsAccumulator::default();
        a.add(&gt(g), p).unwrap();
        merged.merge(&a);
    }
    let all_g: Vec<f32> = maps.iter().flat_map(|m| m.0.clone()).collect();
    let all_p: Vec<f32> = maps.iter().flat_map(|m| m.1.clone()).collect();
    let pooled = compute_metrics(&gt(&all_g), &all_p).unwrap();
    let m = merged.finish().unwrap();
    assert!((m.rmse - pooled.rmse).abs() < 1e-9);
    assert_eq!(m.pixels, pooled.pixels);
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        channels: vec![4; 3],
        integration_channels: 4,
        nodes_per_level: vec![64, 32, 16],
        ..ModelConfig::default()
    }
}

#[test]
fn full_resolution_outputs_for_every_configuration() {
    let scene = generate_scene(64, 64, 3).unwrap();
    let sparse = sparsify(&scene.ground_truth(), SparsePattern::default(), 0.2, 3).unwrap();
    for fusion in [FusionStrategy::Df, FusionStrategy::Daf, FusionStrategy::Sg] {
        for integration in [Integration::End, Integration::Feature] {
            for placement in [Placement::None, Placement::Encoder, Placement::Decoder, Placement::Both] {
                let cfg = ModelConfig {
                    fusion,
                    integration,
                    propagation_placement: placement,
                    ..small_cfg()
                };
                let (model, store) = Acmnet::init(cfg).unwrap();
                let pyr = model.pyramid(&sparse, &scene.intrinsics, 1).unwrap();
                let mut tape = Tape::new(&store);
                let out = model.forward(&mut tape, &pyr, &scene.rgb).unwrap();
                for v in [out.y, out.y_s, out.y_i] {
                    assert_eq!(tape.shape(v), [1, 64, 64]);
                    assert!(tape.value(v).iter().all(|x| x.is_finite()));
                }
                if integration == Integration::End {
                    let (y, a, b) = (tape.value(out.y), tape.value(out.y_s), tape.value(out.y_i));
                    for p in 0..y.len() {
                        let (lo, hi) = (a[p].min(b[p]), a[p].max(b[p]));
                        assert!(lo - 1e-4 <= y[p] && y[p] <= hi + 1e-4);
                    }
                }
            }
        }
    }
}

#[test]
fn every_parameter_receives_a_gradient() {
    let scene = generate_scene(32, 32, 4).unwrap();
    let g = scene.ground_truth();
    let sparse = sparsify(&g, SparsePattern::default(), 0.5, 4).unwrap();
    for placement in [Placement::Encoder, Placement::Both] {
        let cfg = ModelConfig {
            propagation_placement: placement,
            nodes_per_level: vec![40, 20, 10],
            ..small_cfg()
        };
        let mut store = ParamStore::<f64>::new();
        let model = Acmnet::new(cfg, &mut store).unwrap();
        let pyr = model.pyramid(&sparse, &scene.intrinsics, 2).unwrap();
        let mut tape = Tape::new(&store);
        let out = model.forward(&mut tape, &pyr, &scene.rgb).unwrap();
        let l = loss_total(&mut tape, out.y, out.y_s, out.y_i, &g, &scene.rgb, 0.5, 0.01).unwrap();
        let grads = tape.backward(l.total).unwrap();
        for (id, p) in store.iter() {
            let gp = grads.param(id).unwrap_or_else(|| panic!("{} has no gradient", p.name));
            assert!(gp.iter().all(|v| v.is_finite()), "{}", p.name);
        }
    }
}
