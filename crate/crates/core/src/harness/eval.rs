use std::fs;
use std::path::Path;

use crate::autodiff::{load_checkpoint, ParamStore, Scalar, Tape};
use crate::data::{nearest_fill, save_gray_png, Sample};
use crate::error::Result;
use crate::io::atomic_write;
use crate::network::{write_metrics_csv, Acmnet, MetricsAccumulator, MetricsRecord, ModelConfig};
use crate::parallel::{self, Exec};
use crate::propagation::write_attention_csv;

/// Per-sample metrics and their pixel-pooled aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_sample: Vec<MetricsRecord>,
    pub aggregate: MetricsRecord,
}

impl EvalReport {
    /// Per-sample rows followed by the aggregate row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut rows = self.per_sample.clone();
        rows.push(self.aggregate);
        atomic_write(path, |w| write_metrics_csv(w, &rows))
    }
}

/// Score any per-sample predictor; the aggregate pools pixels over all
/// samples.
pub fn evaluate_with<F>(samples: &[Sample], exec: Exec, predict: F) -> Result<EvalReport>
where
    F: Fn(&Sample) -> Result<Vec<f32>> + Sync + Send,
{
    let accs = parallel::map(exec, samples, |_, s| {
        let pred = predict(s)?;
        let mut acc = MetricsAccumulator::default();
        acc.add(&s.ground_truth, &pred)?;
        Ok::<_, crate::error::Error>(acc)
    });
    let mut total = MetricsAccumulator::default();
    let mut per_sample = Vec::with_capacity(samples.len());
    for acc in accs {
        let acc: MetricsAccumulator = acc?;
        per_sample.push(acc.finish()?);
        total.merge(&acc);
    }
    Ok(EvalReport {
        per_sample,
        aggregate: total.finish()?,
    })
}

/// Model predictions; graphs are sampled with each sample's own seed.
pub fn evaluate(model: &Acmnet, store: &ParamStore<f32>, samples: &[Sample], exec: Exec) -> Result<EvalReport> {
    evaluate_with(samples, exec, |s| {
        let pyr = model.pyramid(&s.sparse, &s.intrinsics, s.seed)?;
        model.predict(store, &pyr, &s.rgb)
    })
}

/// Nearest-observed fill of each sparse input.
pub fn evaluate_baseline(samples: &[Sample], exec: Exec) -> Result<EvalReport> {
    evaluate_with(samples, exec, |s| nearest_fill(&s.sparse))
}

/// Build the model for `cfg` and load weights saved by a training run.
pub fn load_model(cfg: &ModelConfig, checkpoint: &Path) -> Result<(Acmnet, ParamStore<f32>)> {
    let (model, mut store) = Acmnet::init(cfg.clone())?;
    store.load_records(&load_checkpoint(checkpoint)?)?;
    Ok((model, store))
}

fn write_map<T: Scalar>(tape: &Tape<'_, T>, v: crate::autodiff::Var, w: usize, h: usize, path: &Path) -> Result<()> {
    let vals: Vec<f32> = tape.value(v).iter().map(|x| x.to_f32().unwrap_or(0.0)).collect();
    save_gray_png(&vals, w, h, path)
}

/// Write `attention_l{l}_{depth|image}.csv` for every encoder level of one
/// sample.
pub fn dump_attention(model: &Acmnet, store: &ParamStore<f32>, sample: &Sample, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let pyr = model.pyramid(&sample.sparse, &sample.intrinsics, sample.seed)?;
    let mut tape = Tape::new(store);
    let out = model.forward(&mut tape, &pyr, &sample.rgb)?;
    let mut written = 0;
    for att in &out.attention {
        let g = pyr.graph(att.level);
        for (stream, v) in [("depth", att.depth), ("image", att.image)] {
            if let Some((alpha, _)) = tape.attention_weights(v) {
                let path = dir.join(format!("{}_attention_l{}_{stream}.csv", sample.id, att.level));
                atomic_write(&path, |w| write_attention_csv(g, alpha, w))?;
                written += 1;
            }
        }
    }
    Ok(written)
}

/// Write confidence maps (end integration) or finest-level gates (gated
/// fusion, channel mean) as 8-bit PNGs.
pub fn dump_confidence(model: &Acmnet, store: &ParamStore<f32>, sample: &Sample, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let (w, h) = (sample.sparse.width(), sample.sparse.height());
    let pyr = model.pyramid(&sample.sparse, &sample.intrinsics, sample.seed)?;
    let mut tape = Tape::new(store);
    let out = model.forward(&mut tape, &pyr, &sample.rgb)?;
    let mut written = 0;
    if let Some((cs, ci)) = out.confidence {
        write_map(
            &tape,
            cs,
            w,
            h,
            &dir.join(format!("{}_confidence_depth.png", sample.id)),
        )?;
        write_map(
            &tape,
            ci,
            w,
            h,
            &dir.join(format!("{}_confidence_image.png", sample.id)),
        )?;
        written += 2;
    }
    if let Some((gs, gi)) = out.gates {
        for (name, g) in [("depth", gs), ("image", gi)] {
            let vals = tape.value(g);
            let c = vals.len() / (w * h);
            let mean: Vec<f32> = (0..w * h)
                .map(|p| (0..c).map(|ch| vals[ch * w * h + p]).sum::<f32>() / c as f32)
                .collect();
            save_gray_png(&mean, w, h, &dir.join(format!("{}_gate_{name}.png", sample.id)))?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, SyntheticSpec};

    fn samples() -> Vec<Sample> {
        let spec = SyntheticSpec {
            width: 16,
            height: 16,
            eval_scenes: 3,
            ..SyntheticSpec::default()
        };
        spec.samples(Split::Eval, 1.0, Exec::Sequential).unwrap()
    }

    #[test]
    fn ground_truth_scores_zero() {
        let s = samples();
        let r = evaluate_with(&s, Exec::Sequential, |x| Ok(x.ground_truth.depth().to_vec())).unwrap();
        assert_eq!(r.aggregate.rmse, 0.0);
        assert_eq!(r.per_sample.len(), 3);
    }

    #[test]
    fn aggregate_pools_pixels() {
        let s = samples();
        let r = evaluate_baseline(&s, Exec::Parallel).unwrap();
        let n: u64 = r.per_sample.iter().map(|m| m.pixels).sum();
        let pooled = (r
            .per_sample
            .iter()
            .map(|m| (m.rmse / 1000.0).powi(2) * m.pixels as f64)
            .sum::<f64>()
            / n as f64)
            .sqrt();
        assert!((r.aggregate.rmse / 1000.0 - pooled).abs() < 1e-9);
    }

    #[test]
    fn dumps_write_files() {
        let s = samples();
        let mut cfg = ModelConfig::desk();
        cfg.channels = vec![4; 3];
        cfg.integration_channels = 4;
        let (model, store) = Acmnet::init(cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(dump_attention(&model, &store, &s[0], dir.path()).unwrap(), 6);
        assert_eq!(dump_confidence(&model, &store, &s[0], dir.path()).unwrap(), 2);
    }
}
