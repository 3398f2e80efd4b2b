//! Model assembly, training losses and evaluation metrics.

mod config;
mod loss;
mod metrics;
mod model;

pub use config::{Integration, ModelConfig, Placement};
pub use loss::{loss_mse, loss_smooth, loss_total, LossTerms};
pub use metrics::{
    compute_metrics, write_metrics_csv, MetricsAccumulator, MetricsRecord, METRICS_COLUMNS, MIN_INVERSE_DEPTH,
};
pub use model::{Acmnet, ForwardOutput, LevelAttention};
