use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::autodiff::{save_checkpoint, Adam, Gradients, ParamStore, Tape};
use crate::data::{derive_seed, Sample};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::network::{loss_total, Acmnet, MetricsRecord};
use crate::parallel::{self, Exec};

const BATCH_STREAM: u64 = 3;
const GRAPH_STREAM: u64 = 4;

/// Batch-mean loss terms of one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub mse: f64,
    pub mse_s: f64,
    pub mse_i: f64,
    pub smooth: f64,
}

/// Summary of a run, written as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub losses: Vec<StepLoss>,
    pub metrics: Option<MetricsRecord>,
    pub baseline: Option<MetricsRecord>,
    pub wall_clock_secs: f64,
    pub param_count: usize,
}

/// A trained model with its weights and loss curve.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Acmnet,
    pub store: ParamStore<f32>,
    pub losses: Vec<StepLoss>,
    pub wall_clock_secs: f64,
}

struct SampleResult {
    grads: Gradients<f32>,
    terms: [f64; 5],
}

fn sample_step(model: &Acmnet, store: &ParamStore<f32>, s: &Sample, graph_seed: u64) -> Result<SampleResult> {
    let cfg = &model.cfg;
    let pyramid = model.pyramid(&s.sparse, &s.intrinsics, graph_seed)?;
    let mut tape = Tape::new(store);
    let out = model.forward(&mut tape, &pyramid, &s.rgb)?;
    let l = loss_total(
        &mut tape,
        out.y,
        out.y_s,
        out.y_i,
        &s.ground_truth,
        &s.rgb,
        cfg.gamma1,
        cfg.gamma2,
    )?;
    let v = |x| tape.value(x)[0] as f64;
    let terms = [v(l.total), v(l.mse), v(l.mse_s), v(l.mse_i), v(l.smooth)];
    let grads = tape.backward(l.total)?;
    Ok(SampleResult { grads, terms })
}

/// One optimiser step on the given samples; returns batch-mean loss terms.
pub fn train_step(
    model: &Acmnet,
    store: &mut ParamStore<f32>,
    adam: &Adam,
    batch: &[&Sample],
    graph_seeds: &[u64],
    exec: Exec,
) -> Result<[f64; 5]> {
    let results = {
        let store_ref: &ParamStore<f32> = store;
        parallel::map(exec, batch, |b, s| sample_step(model, store_ref, s, graph_seeds[b]))
    };
    let mut total: Option<Gradients<f32>> = None;
    let mut terms = [0.0; 5];
    for r in results {
        let r = r?;
        for (t, v) in terms.iter_mut().zip(r.terms) {
            *t += v;
        }
        match &mut total {
            Some(g) => g.accumulate(&r.grads),
            None => total = Some(r.grads),
        }
    }
    let n = batch.len() as f64;
    terms.iter_mut().for_each(|t| *t /= n);
    let mut grads = total.ok_or_else(|| Error::Argument("empty batch".into()))?;
    grads.scale(1.0 / n as f32);
    adam.step(store, grads)?;
    Ok(terms)
}

/// Train from scratch on `samples`. Each step draws a batch without
/// replacement and fresh graph node samples, both seeded by
/// `(cfg.train.seed, step)`.
pub fn train(cfg: &RunConfig, samples: &[Sample], exec: Exec) -> Result<Trained> {
    train_with(cfg, samples, exec, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with<F: FnMut(&StepLoss)>(
    cfg: &RunConfig,
    samples: &[Sample],
    exec: Exec,
    mut on_step: F,
) -> Result<Trained> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("no training samples".into()));
    }
    let start = Instant::now();
    let (model, mut store) = Acmnet::init(cfg.model.clone())?;
    let t = &cfg.train;
    let bs = t.batch_size.min(samples.len());
    let mut losses = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, BATCH_STREAM, step as u64));
        let picks = index::sample(&mut rng, samples.len(), bs).into_vec();
        let batch: Vec<&Sample> = picks.iter().map(|&i| &samples[i]).collect();
        let seeds: Vec<u64> = (0..bs)
            .map(|b| derive_seed(t.seed, GRAPH_STREAM, (step * bs + b) as u64))
            .collect();
        let lr = t.lr_at(step);
        let adam = Adam {
            lr,
            beta1: t.beta1,
            beta2: t.beta2,
            ..Adam::default()
        };
        let terms = train_step(&model, &mut store, &adam, &batch, &seeds, exec)?;
        if !terms[0].is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let rec = StepLoss {
            step,
            lr,
            total: terms[0],
            mse: terms[1],
            mse_s: terms[2],
            mse_i: terms[3],
            smooth: terms[4],
        };
        on_step(&rec);
        losses.push(rec);
    }
    Ok(Trained {
        model,
        store,
        losses,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// `step,lr,total,mse,mse_s,mse_i,smooth` rows.
pub fn write_loss_log<W: Write + ?Sized>(w: &mut W, losses: &[StepLoss]) -> Result<()> {
    writeln!(w, "step,lr,total,mse,mse_s,mse_i,smooth")?;
    for l in losses {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            l.step, l.lr, l.total, l.mse, l.mse_s, l.mse_i, l.smooth
        )?;
    }
    Ok(())
}

/// File names inside a run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.acmn";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const RUN_MANIFEST_FILE: &str = "run.json";

/// Write checkpoint, loss log and run manifest into `dir`.
pub fn write_run(dir: &Path, trained: &Trained, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&trained.store, &dir.join(CHECKPOINT_FILE))?;
    atomic_write(&dir.join(LOSS_LOG_FILE), |w| write_loss_log(w, &trained.losses))?;
    let json = serde_json::to_string_pretty(manifest)?;
    atomic_write(&dir.join(RUN_MANIFEST_FILE), |w| Ok(w.write_all(json.as_bytes())?))
}
