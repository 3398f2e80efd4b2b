use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{downsample_sparse, knn_graph, sample_nodes, unproject, CameraIntrinsics, SparseDepthMap};
use crate::error::{Error, Result};
use crate::parallel::{self, Exec};

/// Coordinates used to measure node distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordSystem {
    /// `(u, v)` pixel coordinates at the level's resolution.
    #[serde(rename = "2d")]
    Pixel2d,
    /// `(x, y, z)` camera coordinates in meters.
    #[serde(rename = "3d")]
    Camera3d,
}

impl CoordSystem {
    pub fn dim(self) -> usize {
        match self {
            CoordSystem::Pixel2d => 2,
            CoordSystem::Camera3d => 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            CoordSystem::Pixel2d => "2D",
            CoordSystem::Camera3d => "3D",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub levels: usize,
    pub k: usize,
    pub nodes_per_level: Vec<usize>,
    pub coord_system: CoordSystem,
}

/// Graph over the sampled observed pixels of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLevel {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub coord_system: CoordSystem,
    pub node_pix: Vec<[usize; 2]>,
    pub node_xyz: Vec<[f64; 3]>,
    pub node_depth: Vec<f64>,
    /// Row-major `n × k`.
    pub neighbors: Vec<usize>,
    pub k: usize,
    /// Fewer than `k+1` nodes were available.
    pub degenerate: bool,
}

impl GraphLevel {
    pub fn len(&self) -> usize {
        self.node_pix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_pix.is_empty()
    }

    /// Propagation needs at least one edge per node.
    pub fn can_propagate(&self) -> bool {
        self.len() >= 2 && self.k >= 1
    }

    /// Flat `v·W + u` cell index of each node.
    pub fn cells(&self) -> Vec<usize> {
        self.node_pix.iter().map(|&[u, v]| v * self.width + u).collect()
    }

    pub fn position(&self, i: usize) -> Vec<f64> {
        match self.coord_system {
            CoordSystem::Pixel2d => vec![self.node_pix[i][0] as f64, self.node_pix[i][1] as f64],
            CoordSystem::Camera3d => self.node_xyz[i].to_vec(),
        }
    }

    /// `p_j - p_i` for every edge, row-major `(n·k) × dim`.
    pub fn edge_offsets(&self) -> Vec<f64> {
        let dim = self.coord_system.dim();
        let mut out = Vec::with_capacity(self.len() * self.k * dim);
        for i in 0..self.len() {
            let pi = self.position(i);
            for slot in 0..self.k {
                let pj = self.position(self.neighbors[i * self.k + slot]);
                out.extend(pj.iter().zip(&pi).map(|(a, b)| a - b));
            }
        }
        out
    }

    /// Node `i`'s neighbour list.
    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// Debug dump: `level,node,u,v,x,y,z,neighbor_0..neighbor_{k-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "level,node,u,v,x,y,z")?;
        for s in 0..self.k {
            write!(w, ",neighbor_{s}")?;
        }
        writeln!(w)?;
        for i in 0..self.len() {
            let [u, v] = self.node_pix[i];
            let [x, y, z] = self.node_xyz[i];
            write!(w, "{},{i},{u},{v},{x},{y},{z}", self.level)?;
            for &j in self.neighbors_of(i) {
                write!(w, ",{j}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Downsampled maps for levels `0..=L` and graphs for levels `1..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub maps: Vec<SparseDepthMap>,
    pub graphs: Vec<GraphLevel>,
}

impl Pyramid {
    /// Graph at `level` (1-based).
    pub fn graph(&self, level: usize) -> &GraphLevel {
        &self.graphs[level - 1]
    }

    /// True when some level had no observed pixels at all.
    pub fn has_empty_level(&self) -> bool {
        self.graphs.iter().any(|g| g.is_empty())
    }
}

fn level_seed(seed: u64, level: usize) -> u64 {
    seed ^ (level as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn build_level(
    map: &SparseDepthMap,
    level: usize,
    k_cam: &CameraIntrinsics,
    cfg: &GraphConfig,
    seed: u64,
) -> Result<GraphLevel> {
    let n_req = cfg.nodes_per_level[level - 1];
    let sample = sample_nodes(map, n_req, level_seed(seed, level))?;
    let k_l = k_cam.at_level(level);
    let mut node_xyz = Vec::with_capacity(sample.pixels.len());
    let mut node_depth = Vec::with_capacity(sample.pixels.len());
    for &[u, v] in &sample.pixels {
        let d = map.at(u, v) as f64;
        node_xyz.push(unproject(u as f64, v as f64, d, &k_l)?);
        node_depth.push(d);
    }
    let knn = match cfg.coord_system {
        CoordSystem::Pixel2d => {
            let pts: Vec<[f64; 2]> = sample.pixels.iter().map(|&[u, v]| [u as f64, v as f64]).collect();
            knn_graph(&pts, cfg.k)
        }
        CoordSystem::Camera3d => knn_graph(&node_xyz, cfg.k),
    };
    if knn.degenerate && !sample.empty {
        log::debug!("level {level}: only {} nodes for k={}", sample.pixels.len(), cfg.k);
    }
    Ok(GraphLevel {
        level,
        width: map.width(),
        height: map.height(),
        coord_system: cfg.coord_system,
        node_pix: sample.pixels,
        node_xyz,
        node_depth,
        neighbors: knn.neighbors,
        k: knn.k,
        degenerate: knn.degenerate,
    })
}

/// Max-pool the sparse map `L` times and build one kNN graph per level.
/// Level `l` uses intrinsics scaled by `2^-l`.
pub fn build_pyramid(map: &SparseDepthMap, k_cam: &CameraIntrinsics, cfg: &GraphConfig, seed: u64) -> Result<Pyramid> {
    build_pyramid_with(Exec::Parallel, map, k_cam, cfg, seed)
}

pub fn build_pyramid_with(
    exec: Exec,
    map: &SparseDepthMap,
    k_cam: &CameraIntrinsics,
    cfg: &GraphConfig,
    seed: u64,
) -> Result<Pyramid> {
    if cfg.nodes_per_level.len() != cfg.levels {
        return Err(Error::Config(format!(
            "{} node counts for {} levels",
            cfg.nodes_per_level.len(),
            cfg.levels
        )));
    }
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut maps = vec![map.clone()];
    for _ in 0..cfg.levels {
        let next = downsample_sparse(maps.last().unwrap())?;
        maps.push(next);
    }
    let graphs = parallel::map_range(exec, cfg.levels, |i| build_level(&maps[i + 1], i + 1, k_cam, cfg, seed))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Pyramid { maps, graphs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(coord: CoordSystem, nodes: Vec<usize>) -> GraphConfig {
        GraphConfig {
            levels: nodes.len(),
            k: 3,
            nodes_per_level: nodes,
            coord_system: coord,
        }
    }

    fn dense_map() -> SparseDepthMap {
        let depth = (0..256)
            .map(|i| if i % 5 == 0 { 2.0 + (i % 7) as f32 } else { 0.0 })
            .collect();
        SparseDepthMap::from_depth(16, 16, depth).unwrap()
    }

    #[test]
    fn levels_have_expected_sizes() {
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0).unwrap();
        let p = build_pyramid(&dense_map(), &k, &cfg(CoordSystem::Camera3d, vec![20, 10]), 1).unwrap();
        assert_eq!(p.maps.len(), 3);
        assert_eq!((p.maps[2].width(), p.maps[2].height()), (4, 4));
        assert_eq!(p.graph(1).len(), 20);
        assert_eq!(p.graph(2).len(), 10);
        for g in &p.graphs {
            assert_eq!(g.neighbors.len(), g.len() * g.k);
            for i in 0..g.len() {
                assert!(!g.neighbors_of(i).contains(&i));
            }
        }
    }

    #[test]
    fn same_seed_same_pyramid_in_both_modes() {
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0).unwrap();
        let c = cfg(CoordSystem::Pixel2d, vec![15, 8]);
        let a = build_pyramid_with(Exec::Parallel, &dense_map(), &k, &c, 4).unwrap();
        let b = build_pyramid_with(Exec::Sequential, &dense_map(), &k, &c, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_map_yields_empty_graphs() {
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0).unwrap();
        let p = build_pyramid(
            &SparseDepthMap::empty(8, 8),
            &k,
            &cfg(CoordSystem::Camera3d, vec![4]),
            0,
        )
        .unwrap();
        assert!(p.has_empty_level());
        assert!(!p.graph(1).can_propagate());
    }

    #[test]
    fn rejects_mismatched_config() {
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0).unwrap();
        let mut c = cfg(CoordSystem::Camera3d, vec![4]);
        c.levels = 2;
        assert!(build_pyramid(&dense_map(), &k, &c, 0).is_err());
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0).unwrap();
        let p = build_pyramid(&dense_map(), &k, &cfg(CoordSystem::Camera3d, vec![5]), 0).unwrap();
        let mut buf = Vec::new();
        p.graph(1).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "level,node,u,v,x,y,z,neighbor_0,neighbor_1,neighbor_2");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1].split(',').count(), 10);
    }

    #[test]
    fn offsets_point_to_neighbours() {
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0).unwrap();
        let p = build_pyramid(&dense_map(), &k, &cfg(CoordSystem::Pixel2d, vec![6]), 2).unwrap();
        let g = p.graph(1);
        let off = g.edge_offsets();
        let j = g.neighbors[0];
        assert_eq!(off[0], g.node_pix[j][0] as f64 - g.node_pix[0][0] as f64);
        assert_eq!(off[1], g.node_pix[j][1] as f64 - g.node_pix[0][1] as f64);
    }
}
