use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseDepthMap;

/// Predictions at or below zero are raised to this depth (meters) for the
/// inverse-depth metrics.
pub const MIN_INVERSE_DEPTH: f64 = 1e-3;

/// Header of metrics tables.
pub const METRICS_COLUMNS: [&str; 8] = [
    "rmse_mm",
    "mae_mm",
    "irmse_invkm",
    "imae_invkm",
    "rel",
    "d1",
    "d2",
    "d3",
];

/// Error statistics over labelled pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Millimeters.
    pub rmse: f64,
    pub mae: f64,
    /// Inverse kilometers.
    pub irmse: f64,
    pub imae: f64,
    pub rel: f64,
    /// Percentages of pixels with `max(p/g, g/p) < 1.25^t`.
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Labelled pixels evaluated.
    pub pixels: u64,
    /// Non-positive predictions clamped for the inverse metrics.
    pub clamped: u64,
}

impl MetricsRecord {
    pub fn values(&self) -> [f64; 8] {
        [
            self.rmse,
            self.mae,
            self.irmse,
            self.imae,
            self.rel,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }
}

/// Pixel-pooled sums; merging accumulators and finishing gives the same
/// result as accumulating all pixels at once.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsAccumulator {
    pixels: u64,
    clamped: u64,
    sq: f64,
    abs: f64,
    inv_sq: f64,
    inv_abs: f64,
    rel: f64,
    within: [u64; 3],
}

impl MetricsAccumulator {
    /// Add every labelled pixel of `gt`.
    pub fn add(&mut self, gt: &SparseDepthMap, pred: &[f32]) -> Result<()> {
        if pred.len() != gt.depth().len() {
            return Err(Error::Argument(format!(
                "{} predictions for {} ground-truth pixels",
                pred.len(),
                gt.depth().len()
            )));
        }
        for ((&g, &m), &p) in gt.depth().iter().zip(gt.mask()).zip(pred) {
            if !m {
                continue;
            }
            let (g, p) = (g as f64, p as f64);
            let err = p - g;
            self.pixels += 1;
            self.sq += err * err;
            self.abs += err.abs();
            self.rel += err.abs() / g;
            let pc = if p > 0.0 {
                p
            } else {
                self.clamped += 1;
                MIN_INVERSE_DEPTH
            };
            let ierr = 1.0 / pc - 1.0 / g;
            self.inv_sq += ierr * ierr;
            self.inv_abs += ierr.abs();
            let ratio = (pc / g).max(g / pc);
            for (t, slot) in self.within.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(t as i32 + 1) {
                    *slot += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &Self) {
        self.pixels += o.pixels;
        self.clamped += o.clamped;
        self.sq += o.sq;
        self.abs += o.abs;
        self.inv_sq += o.inv_sq;
        self.inv_abs += o.inv_abs;
        self.rel += o.rel;
        for t in 0..3 {
            self.within[t] += o.within[t];
        }
    }

    pub fn finish(&self) -> Result<MetricsRecord> {
        if self.pixels == 0 {
            return Err(Error::Argument("no labelled pixels to evaluate".into()));
        }
        let n = self.pixels as f64;
        let pct = |c: u64| 100.0 * c as f64 / n;
        Ok(MetricsRecord {
            rmse: 1000.0 * (self.sq / n).sqrt(),
            mae: 1000.0 * self.abs / n,
            irmse: 1000.0 * (self.inv_sq / n).sqrt(),
            imae: 1000.0 * self.inv_abs / n,
            rel: self.rel / n,
            delta1: pct(self.within[0]),
            delta2: pct(self.within[1]),
            delta3: pct(self.within[2]),
            pixels: self.pixels,
            clamped: self.clamped,
        })
    }
}

/// Metrics of one prediction against labelled ground truth.
pub fn compute_metrics(gt: &SparseDepthMap, pred: &[f32]) -> Result<MetricsRecord> {
    let mut acc = MetricsAccumulator::default();
    acc.add(gt, pred)?;
    acc.finish()
}

/// One row per record, in [`METRICS_COLUMNS`] order.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRecord]) -> Result<()> {
    writeln!(w, "{}", METRICS_COLUMNS.join(","))?;
    for r in rows {
        let cells: Vec<String> = r.values().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(v: Vec<f32>) -> SparseDepthMap {
        SparseDepthMap::from_depth(v.len(), 1, v).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = dense(vec![1.0, 2.0, 3.0]);
        let m = compute_metrics(&gt, gt.depth()).unwrap();
        assert_eq!((m.rmse, m.mae, m.rel), (0.0, 0.0, 0.0));
        assert_eq!(m.delta1, 100.0);
    }

    #[test]
    fn threshold_is_strict() {
        let gt = dense(vec![2.0; 4]);
        let m = compute_metrics(&gt, &[2.5; 4]).unwrap();
        assert_eq!(m.rel, 0.25);
        assert_eq!(m.delta1, 0.0);
        assert_eq!(m.delta2, 100.0);
        assert!((m.rmse - 500.0).abs() < 1e-9);
        assert!(m.rmse >= m.mae);
    }

    #[test]
    fn unlabelled_pixels_are_ignored_and_clamps_counted() {
        let gt = SparseDepthMap::from_depth(3, 1, vec![1.0, 0.0, 4.0]).unwrap();
        let m = compute_metrics(&gt, &[-1.0, 100.0, 4.0]).unwrap();
        assert_eq!(m.pixels, 2);
        assert_eq!(m.clamped, 1);
        assert!((m.mae - 1000.0).abs() < 1e-9);
        assert!(compute_metrics(&SparseDepthMap::empty(2, 1), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn csv_header_is_exact() {
        let gt = dense(vec![1.0]);
        let m = compute_metrics(&gt, &[1.0]).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[m, m]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "rmse_mm,mae_mm,irmse_invkm,imae_invkm,rel,d1,d2,d3"
        );
        assert_eq!(lines.count(), 2);
    }
}
