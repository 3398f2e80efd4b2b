use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::evaluate;
use super::train::{train, write_run, RunManifest};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::graph::CoordSystem;
use crate::io::atomic_write;
use crate::network::{MetricsRecord, Placement, METRICS_COLUMNS};
use crate::parallel::Exec;

/// Graph settings of one ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSetting {
    pub nodes_per_level: Vec<usize>,
    pub coord_system: CoordSystem,
    pub k: usize,
}

/// Cells are the product of fusions × placements × graphs × seeds; every
/// cell trains on the same data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationMatrix {
    pub base: RunConfig,
    pub fusions: Vec<FusionStrategy>,
    pub placements: Vec<Placement>,
    /// Empty means the base config's graph only.
    pub graphs: Vec<GraphSetting>,
    pub seeds: Vec<u64>,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        Self {
            base: RunConfig::default(),
            fusions: vec![FusionStrategy::Df, FusionStrategy::Daf, FusionStrategy::Sg],
            placements: vec![Placement::None, Placement::Encoder],
            graphs: Vec::new(),
            seeds: vec![0],
        }
    }
}

impl AblationMatrix {
    /// Config of every cell in row-major order (fusion slowest, seed
    /// fastest).
    pub fn cells(&self) -> Vec<RunConfig> {
        let graphs: Vec<Option<&GraphSetting>> = if self.graphs.is_empty() {
            vec![None]
        } else {
            self.graphs.iter().map(Some).collect()
        };
        let mut out = Vec::new();
        for &fusion in &self.fusions {
            for &placement in &self.placements {
                for g in &graphs {
                    for &seed in &self.seeds {
                        let mut cfg = self.base.clone().with_seed(seed);
                        cfg.model.fusion = fusion;
                        cfg.model.propagation_placement = placement;
                        if let Some(g) = g {
                            cfg.model.nodes_per_level = g.nodes_per_level.clone();
                            cfg.model.coord_system = g.coord_system;
                            cfg.model.k = g.k;
                        }
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

/// Variant label: the fusion tag plus `+GP` (encoder), `+GP/D` (decoder) or
/// `+GP/W` (whole network) when graph propagation is on.
pub fn variant_name(fusion: FusionStrategy, placement: Placement) -> String {
    let gp = match placement {
        Placement::None => "",
        Placement::Encoder => "+GP",
        Placement::Decoder => "+GP/D",
        Placement::Both => "+GP/W",
    };
    format!("{}{gp}", fusion.tag())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub fusion: FusionStrategy,
    pub placement: Placement,
    pub graph: String,
    pub seed: u64,
    pub data_seed: u64,
    pub final_loss: f64,
    pub metrics: MetricsRecord,
}

/// Train and evaluate every cell. With `out_dir`, each cell's run is saved
/// under `cell_{index}`.
pub fn run_ablation<F: FnMut(&AblationRow)>(
    matrix: &AblationMatrix,
    exec: Exec,
    out_dir: Option<&Path>,
    mut on_cell: F,
) -> Result<Vec<AblationRow>> {
    if matrix.fusions.is_empty() || matrix.placements.is_empty() || matrix.seeds.is_empty() {
        return Err(Error::Config("ablation matrix has an empty axis".into()));
    }
    let base = &matrix.base;
    base.validate()?;
    let train_set = base.data.samples(Split::Train, base.train.ratio, exec)?;
    let eval_set = base.data.samples(Split::Eval, base.eval_ratio, exec)?;
    let mut rows = Vec::new();
    for (i, cfg) in matrix.cells().into_iter().enumerate() {
        let trained = train(&cfg, &train_set, exec)?;
        let report = evaluate(&trained.model, &trained.store, &eval_set, exec)?;
        if let Some(dir) = out_dir {
            let manifest = RunManifest {
                config: cfg.clone(),
                seed: cfg.train.seed,
                losses: trained.losses.clone(),
                metrics: Some(report.aggregate),
                baseline: None,
                wall_clock_secs: trained.wall_clock_secs,
                param_count: trained.store.scalar_count(),
            };
            write_run(&dir.join(format!("cell_{i:03}")), &trained, &manifest)?;
        }
        let row = AblationRow {
            variant: variant_name(cfg.model.fusion, cfg.model.propagation_placement),
            fusion: cfg.model.fusion,
            placement: cfg.model.propagation_placement,
            graph: cfg.model.graph_tag(),
            seed: cfg.train.seed,
            data_seed: cfg.data.seed,
            final_loss: trained.losses.last().map_or(f64::NAN, |l| l.total),
            metrics: report.aggregate,
        };
        on_cell(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(
            w,
            "variant,fusion,placement,graph,seed,data_seed,final_loss,{}",
            METRICS_COLUMNS.join(",")
        )?;
        for r in rows {
            let m: Vec<String> = r.metrics.values().iter().map(|v| v.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.variant,
                r.fusion.tag(),
                r.placement.tag(),
                r.graph,
                r.seed,
                r.data_seed,
                r.final_loss,
                m.join(",")
            )?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matrix_is_six_cells_with_shared_data() {
        let m = AblationMatrix::default();
        let cells = m.cells();
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().all(|c| c.data == m.base.data));
        let names: Vec<String> = cells
            .iter()
            .map(|c| variant_name(c.model.fusion, c.model.propagation_placement))
            .collect();
        assert_eq!(names, ["DF", "DF+GP", "DAF", "DAF+GP", "SG", "SG+GP"]);
    }

    #[test]
    fn graph_axis_sets_tags() {
        let m = AblationMatrix {
            fusions: vec![FusionStrategy::Sg],
            placements: vec![Placement::Encoder],
            graphs: vec![
                GraphSetting {
                    nodes_per_level: vec![10_000, 5_000, 2_500],
                    coord_system: CoordSystem::Pixel2d,
                    k: 6,
                },
                GraphSetting {
                    nodes_per_level: vec![10_000, 5_000, 2_500],
                    coord_system: CoordSystem::Camera3d,
                    k: 6,
                },
            ],
            ..AblationMatrix::default()
        };
        let tags: Vec<String> = m.cells().iter().map(|c| c.model.graph_tag()).collect();
        assert_eq!(tags, ["10K_2D_6NN", "10K_3D_6NN"]);
    }
}
