use crate::error::{Error, Result};
use crate::graph::SparseDepthMap;

/// Dense depth where every pixel takes the value of its nearest observed
/// pixel (Euclidean in pixels, lower raster index on ties).
pub fn nearest_fill(map: &SparseDepthMap) -> Result<Vec<f32>> {
    let w = map.width();
    let obs: Vec<(i64, i64, f32)> = map
        .observed_cells()
        .into_iter()
        .map(|c| ((c % w) as i64, (c / w) as i64, map.depth()[c]))
        .collect();
    if obs.is_empty() {
        return Err(Error::Argument("nearest fill needs at least one observed pixel".into()));
    }
    let mut out = Vec::with_capacity(w * map.height());
    for v in 0..map.height() as i64 {
        for u in 0..w as i64 {
            let mut best = (i64::MAX, 0.0f32);
            for &(x, y, d) in &obs {
                let d2 = (x - u) * (x - u) + (y - v) * (y - v);
                if d2 < best.0 {
                    best = (d2, d);
                }
            }
            out.push(best.1);
        }
    }
    Ok(out)
}
