use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape};
use crate::data::{generate_scene, sparsify, SparsePattern, SyntheticScene};
use crate::error::Result;
use crate::graph::{Pyramid, SparseDepthMap};
use crate::network::{loss_total, Acmnet, ModelConfig};

/// One probed parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub probes: Vec<GradProbe>,
    pub max_rel_err: f64,
}

/// Denominator floor of [`relative_error`]. Entries whose gradients are
/// smaller than this are compared on absolute error scaled by the floor.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

struct Problem {
    model: Acmnet,
    pyramid: Pyramid,
    scene: SyntheticScene,
    gt: SparseDepthMap,
}

impl Problem {
    fn loss(&self, store: &ParamStore<f64>) -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = self.model.forward(&mut tape, &self.pyramid, &self.scene.rgb)?;
        let c = &self.model.cfg;
        let l = loss_total(
            &mut tape,
            out.y,
            out.y_s,
            out.y_i,
            &self.gt,
            &self.scene.rgb,
            c.gamma1,
            c.gamma2,
        )?;
        Ok(tape.value(l.total)[0])
    }
}

/// Compare tape gradients of the total loss with central differences on
/// `probes` randomly chosen weights, in 64-bit precision. Each probe picks a
/// parameter tensor uniformly, then an entry uniformly.
pub fn gradcheck_network(
    cfg: &ModelConfig,
    width: usize,
    height: usize,
    probes: usize,
    seed: u64,
    step: f64,
) -> Result<GradcheckReport> {
    let mut store = ParamStore::<f64>::new();
    let model = Acmnet::new(cfg.clone(), &mut store)?;
    let scene = generate_scene(width, height, seed)?;
    let gt = scene.ground_truth();
    let sparse = sparsify(&gt, SparsePattern::default(), 0.5, seed)?;
    let pyramid = model.pyramid(&sparse, &scene.intrinsics, seed)?;
    let problem = Problem {
        model,
        pyramid,
        scene,
        gt,
    };

    let grads = {
        let mut tape = Tape::new(&store);
        let out = problem.model.forward(&mut tape, &problem.pyramid, &problem.scene.rgb)?;
        let l = loss_total(
            &mut tape,
            out.y,
            out.y_s,
            out.y_i,
            &problem.gt,
            &problem.scene.rgb,
            cfg.gamma1,
            cfg.gamma2,
        )?;
        tape.backward(l.total)?
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AD_C0DE);
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let id = ids[rng.random_range(0..ids.len())];
        let idx = rng.random_range(0..store.get(id).tensor.numel());
        let analytic = grads.param(id).map_or(0.0, |g| g[idx]);
        let orig = store.get(id).tensor.data()[idx];
        store.get_mut(id).tensor.data_mut()[idx] = orig + step;
        let up = problem.loss(&store)?;
        store.get_mut(id).tensor.data_mut()[idx] = orig - step;
        let down = problem.loss(&store)?;
        store.get_mut(id).tensor.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * step);
        out.push(GradProbe {
            param: store.get(id).name.clone(),
            index: idx,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let max_rel_err = out.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        probes: out,
        max_rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_network_gradients_match() {
        let cfg = ModelConfig {
            channels: vec![3; 3],
            integration_channels: 3,
            nodes_per_level: vec![20, 10, 5],
            ..ModelConfig::default()
        };
        let r = gradcheck_network(&cfg, 16, 16, 6, 1, 1e-5).unwrap();
        assert_eq!(r.probes.len(), 6);
        assert!(r.max_rel_err < 2e-3, "{:?}", r.probes);
    }
}
