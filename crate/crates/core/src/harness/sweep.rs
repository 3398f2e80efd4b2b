use std::path::Path;

use crate::autodiff::ParamStore;
use crate::data::{Split, SyntheticSpec};
use crate::error::Result;
use crate::harness::eval::evaluate;
use crate::io::atomic_write;
use crate::network::{Acmnet, MetricsRecord, METRICS_COLUMNS};
use crate::parallel::Exec;

/// Metrics of one sparsity ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    /// Observed fraction of input pixels, pooled over samples.
    pub density: f64,
    pub metrics: MetricsRecord,
}

/// Evaluate a trained model on the evaluation scenes of `spec`, sparsified
/// at each ratio in turn.
pub fn sweep(
    model: &Acmnet,
    store: &ParamStore<f32>,
    spec: &SyntheticSpec,
    ratios: &[f64],
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    ratios
        .iter()
        .map(|&ratio| {
            let samples = spec.samples(Split::Eval, ratio, exec)?;
            let observed: usize = samples.iter().map(|s| s.sparse.observed_count()).sum();
            let pixels: usize = samples.iter().map(|s| s.sparse.width() * s.sparse.height()).sum();
            let report = evaluate(model, store, &samples, exec)?;
            Ok(SweepRow {
                ratio,
                density: observed as f64 / pixels.max(1) as f64,
                metrics: report.aggregate,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(w, "ratio,density,{}", METRICS_COLUMNS.join(","))?;
        for r in rows {
            let m: Vec<String> = r.metrics.values().iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", r.ratio, r.density, m.join(","))?;
        }
        Ok(())
    })
}
