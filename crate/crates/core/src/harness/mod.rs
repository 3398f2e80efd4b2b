//! Training, evaluation, sparsity sweeps, ablation matrices and gradient
//! checks, as used by the command-line tool.

mod ablate;
mod config;
mod eval;
mod gradcheck;
mod sweep;
mod train;

pub use ablate::{run_ablation, variant_name, write_ablation_csv, AblationMatrix, AblationRow, GraphSetting};
pub use config::{RunConfig, TrainConfig};
pub use eval::{dump_attention, dump_confidence, evaluate, evaluate_baseline, evaluate_with, load_model, EvalReport};
pub use gradcheck::{gradcheck_network, relative_error, GradProbe, GradcheckReport, GRAD_FLOOR};
pub use sweep::{sweep, write_sweep_csv, SweepRow};
pub use train::{
    train, train_step, train_with, write_loss_log, write_run, RunManifest, StepLoss, Trained, CHECKPOINT_FILE,
    LOSS_LOG_FILE, RUN_MANIFEST_FILE,
};
