mod common;

use acmnet::data::{
    base_cells, density, generate_scene, load_depth_png, nearest_fill, save_depth_png, sparsify, write_dataset,
    DatasetManifest, SparsePattern, Split, SyntheticSpec, DEPTH_PNG_SCALE, MAX_DEPTH, MIN_DEPTH, SWEEP_RATIOS,
};
use acmnet::graph::SparseDepthMap;
use acmnet::parallel::Exec;
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn quantised_map(seed: u64, w: usize, h: usize) -> SparseDepthMap {
    let mut r = rng(seed);
    let depth = (0..w * h)
        .map(|_| {
            if r.random_bool(0.5) {
                r.random_range(1..=65535u16) as f32 / DEPTH_PNG_SCALE as f32
            } else {
                0.0
            }
        })
        .collect();
    SparseDepthMap::from_depth(w, h, depth).unwrap()
}

#[test]
fn depth_png_round_trip_on_quantised_maps() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.png");
    for seed in 0..100 {
        let m = quantised_map(seed, 1 + seed as usize % 17, 1 + seed as usize % 11);
        save_depth_png(&m, &path).unwrap();
        assert_eq!(load_depth_png(&path).unwrap(), m, "seed {seed}");
    }
}

#[test]
fn scene_depth_edges_lie_on_colour_edges() {
    for seed in 0..20 {
        let s = generate_scene(64, 64, seed).unwrap();
        let (w, h) = (s.width, s.height);
        let rgb = s.rgb.data();
        let colour_step = |a: usize, b: usize| {
            (0..3)
                .map(|c| (rgb[c * w * h + a] - rgb[c * w * h + b]).abs())
                .sum::<f32>()
                / 3.0
        };
        let mut colour_edge = vec![false; w * h];
        let mut depth_edge = vec![false; w * h];
        for v in 0..h {
            for u in 0..w {
                let p = v * w + u;
                for q in [(u + 1 < w).then(|| p + 1), (v + 1 < h).then(|| p + w)]
                    .into_iter()
                    .flatten()
                {
                    let jump = (s.depth[p] - s.depth[q]).abs() > 0.05 * s.depth[p].min(s.depth[q]);
                    if s.surface[p] != s.surface[q] && jump {
                        depth_edge[p] = true;
                        depth_edge[q] = true;
                    }
                    if colour_step(p, q) > 0.03 {
                        colour_edge[p] = true;
                        colour_edge[q] = true;
                    }
                }
            }
        }
        assert!(depth_edge.iter().any(|&e| e), "seed {seed}: no depth edges");
        for v in 0..h {
            for u in 0..w {
                if !depth_edge[v * w + u] {
                    continue;
                }
                let near = (v.saturating_sub(1)..(v + 2).min(h))
                    .any(|y| (u.saturating_sub(1)..(u + 2).min(w)).any(|x| colour_edge[y * w + x]));
                assert!(near, "seed {seed}: depth edge at ({u},{v}) without a colour edge");
            }
        }
    }
}

#[test]
fn scene_depth_is_bounded_and_reproducible() {
    for seed in 0..10 {
        let a = generate_scene(64, 48, seed).unwrap();
        assert!(a.depth.iter().all(|&d| (MIN_DEPTH..=MAX_DEPTH).contains(&d)));
        assert_eq!(a, generate_scene(64, 48, seed).unwrap());
    }
}

#[test]
fn sweep_densities_scale_with_ratio() {
    let s = generate_scene(64, 64, 5).unwrap();
    let dense = s.ground_truth();
    let pattern = SparsePattern::default();
    let base = base_cells(&dense, pattern, 5).unwrap().len();
    let base_density = base as f64 / (64.0 * 64.0);
    let mut prev: Option<SparseDepthMap> = None;
    for &r in &SWEEP_RATIOS {
        let m = sparsify(&dense, pattern, r, 5).unwrap();
        assert_eq!(m.observed_count(), (r * base as f64).round() as usize);
        assert!((density(&m) - r * base_density).abs() <= 0.5 / (64.0 * 64.0));
        if let Some(p) = &prev {
            assert!(
                p.observed_cells().iter().all(|c| m.mask()[*c]),
                "ratio {r} is not nested"
            );
        }
        prev = Some(m);
    }
    assert_eq!(prev.unwrap().observed_cells(), base_cells(&dense, pattern, 5).unwrap());
}

/// Quadratic scan: closest observed pixel, lower raster index on ties.
fn naive_fill(m: &SparseDepthMap) -> Vec<f32> {
    let w = m.width();
    let obs = m.observed_cells();
    (0..m.depth().len())
        .map(|p| {
            let (pu, pv) = ((p % w) as i64, (p / w) as i64);
            let best = obs
                .iter()
                .min_by_key(|&&q| {
                    let (qu, qv) = ((q % w) as i64, (q / w) as i64);
                    ((pu - qu).pow(2) + (pv - qv).pow(2), q)
                })
                .unwrap();
            m.depth()[*best]
        })
        .collect()
}

#[test]
fn nearest_fill_matches_quadratic_scan() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let depth = (0..24 * 18)
            .map(|_| {
                if r.random_bool(0.05) {
                    r.random_range(1.0..40.0)
                } else {
                    0.0
                }
            })
            .collect();
        let m = SparseDepthMap::from_depth(24, 18, depth).unwrap();
        if m.observed_count() == 0 {
            continue;
        }
        assert_eq!(nearest_fill(&m).unwrap(), naive_fill(&m));
    }
    assert!(nearest_fill(&SparseDepthMap::empty(4, 4)).is_err());
}

#[test]
fn dataset_directory_reproduces_generated_samples() {
    let spec = SyntheticSpec {
        width: 16,
        height: 16,
        train_scenes: 3,
        eval_scenes: 2,
        ..SyntheticSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &spec, 0.5, Exec::Sequential).unwrap();
    let m = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    let read = m.read_samples(dir.path(), Some(Split::Eval), Exec::Parallel).unwrap();
    let made = spec.samples(Split::Eval, 0.5, Exec::Sequential).unwrap();
    assert_eq!(read.len(), 2);
    for (a, b) in read.iter().zip(&made) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.sparse.mask(), b.sparse.mask());
        for (x, y) in a.ground_truth.depth().iter().zip(b.ground_truth.depth()) {
            assert!((x - y).abs() <= 0.5 / DEPTH_PNG_SCALE as f32);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sparsified_points_carry_dense_values(seed in 0u64..1000, ratio in 0.01f64..=1.0) {
        let s = generate_scene(32, 32, seed).unwrap();
        let dense = s.ground_truth();
        let m = sparsify(&dense, SparsePattern::default(), ratio, seed).unwrap();
        for c in m.observed_cells() {
            prop_assert_eq!(m.depth()[c], dense.depth()[c]);
        }
    }
}
