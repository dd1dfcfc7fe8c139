//! Shared epoch loop: shuffling, gradient accumulation, SGD with cosine
//! decay, JSON-lines logging, checkpoints and resume.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DistillConfig;
use crate::autodiff::{Graph, Var};
use crate::config::Provenance;
use crate::error::{Error, Result};
use crate::models::{component_rng, load_checkpoint, save_checkpoint, Network2D, Network3D};
use crate::optim::{cosine_lr, sgd_step, Parameter, Role};
use crate::tensor::Tensor;

/// Anything the epoch loop can optimise.
pub trait Trainable {
    fn params(&self) -> Vec<&Parameter<f32>>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<f32>>;
}

impl Trainable for Network2D<f32> {
    fn params(&self) -> Vec<&Parameter<f32>> {
        self.parameters()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<f32>> {
        self.parameters_mut()
    }
}

impl Trainable for Network3D<f32> {
    fn params(&self) -> Vec<&Parameter<f32>> {
        self.parameters()
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter<f32>> {
        self.parameters_mut()
    }
}

/// Where a trainer writes its artifacts and whether it picks up a previous run.
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Output directory for `train_log.jsonl`, `state.json` and `checkpoint/`.
    pub dir: Option<PathBuf>,
    pub resume: bool,
    pub provenance: Provenance,
    /// Stop after this many completed epochs (the schedule is unchanged).
    pub stop_after: Option<usize>,
}

impl RunOptions {
    pub fn in_memory(provenance: Provenance) -> Self {
        Self {
            dir: None,
            resume: false,
            provenance,
            stop_after: None,
        }
    }

    pub fn in_dir(dir: impl Into<PathBuf>, provenance: Provenance) -> Self {
        Self {
            dir: Some(dir.into()),
            resume: false,
            provenance,
            stop_after: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total loss over the items that produced a loss.
    pub loss: f64,
    /// Mean of each loss component.
    pub components: BTreeMap<String, f64>,
    pub items: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: String,
    pub steps: usize,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn final_component(&self, name: &str) -> Option<f64> {
        self.epochs.last().and_then(|e| e.components.get(name).copied())
    }
}

/// Loss of one item: the scalar to differentiate and named parts to log.
pub(crate) struct ItemLoss {
    pub total: Var,
    pub parts: Vec<(&'static str, f64)>,
}

pub(crate) struct Schedule<'a> {
    pub kind: &'static str,
    pub epochs: usize,
    pub batch: usize,
    pub cfg: &'a DistillConfig,
    pub lr: &'a dyn Fn(Role) -> f64,
}

#[derive(Serialize, Deserialize)]
struct RunState {
    kind: String,
    provenance: Provenance,
    report: TrainReport,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs `schedule.epochs` epochs over `n` items. `loss` builds the graph for
/// one item and returns `None` to skip it.
pub(crate) fn run_epochs<M: Trainable>(
    model: &mut M,
    n: usize,
    schedule: &Schedule<'_>,
    run: &RunOptions,
    mut loss: impl FnMut(&M, &Graph<f32>, usize, &mut ChaCha8Rng) -> Result<Option<ItemLoss>>,
) -> Result<TrainReport> {
    let cfg = schedule.cfg;
    crate::error::ensure!(n > 0, Argument, "nothing to train on");
    let per_epoch = n.div_ceil(schedule.batch);
    let total_steps = (per_epoch * schedule.epochs).max(1);
    let mut report = TrainReport {
        kind: schedule.kind.to_string(),
        steps: 0,
        epochs: Vec::new(),
    };
    let mut log = None;
    if let Some(dir) = &run.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let state_path = dir.join("state.json");
        if run.resume && state_path.exists() {
            let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
            let state: RunState = serde_json::from_str(&text)?;
            crate::error::ensure!(
                state.kind == schedule.kind,
                Config,
                "cannot resume a {} run as {}",
                state.kind,
                schedule.kind
            );
            crate::error::ensure!(
                state.provenance.config_hash == run.provenance.config_hash && state.provenance.seed == run.provenance.seed,
                Config,
                "resume requires the same configuration and seed"
            );
            let ckpt = load_checkpoint(&dir.join("checkpoint"))?;
            ckpt.assign(model.params_mut(), true)?;
            report = state.report;
        }
        let log_path = dir.join("train_log.jsonl");
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(run.resume)
            .write(true)
            .truncate(!run.resume)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        log = Some((log_path, std::io::BufWriter::new(file)));
    }

    let start = report.epochs.len();
    let stop = run.stop_after.map_or(schedule.epochs, |s| s.min(schedule.epochs));
    for epoch in start..stop {
        let mut rng = component_rng(cfg.seed, &format!("{}/epoch{}", schedule.kind, epoch));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let (mut used, mut skipped) = (0usize, 0usize);
        for batch in order.chunks(schedule.batch) {
            let step = report.steps;
            let mut grads: Vec<(String, Tensor<f32>)> = Vec::new();
            let mut step_parts: BTreeMap<String, f64> = BTreeMap::new();
            let mut step_loss = 0.0;
            let mut step_used = 0;
            let inv = 1.0 / batch.len() as f32;
            for &item in batch {
                let g = Graph::new();
                let Some(out) = loss(model, &g, item, &mut rng)? else {
                    skipped += 1;
                    continue;
                };
                let value = g.value(out.total).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{} loss is {} at epoch {}, step {}",
                        schedule.kind, value, epoch, step
                    )));
                }
                let scaled = g.scale(out.total, inv);
                let mut gr = g.backward(scaled)?;
                for (name, v) in g.bindings() {
                    if let Some(t) = gr.take(v) {
                        grads.push((name, t));
                    }
                }
                step_loss += value;
                for (k, v) in out.parts {
                    *step_parts.entry(k.to_string()).or_default() += v;
                }
                step_used += 1;
            }
            {
                let mut params = model.params_mut();
                let index: HashMap<String, usize> =
                    params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
                for (name, t) in grads {
                    if let Some(&i) = index.get(&name) {
                        params[i].grad.add_assign(&t);
                    }
                }
                for p in params.iter_mut() {
                    if !p.trainable {
                        continue;
                    }
                    let lr = cosine_lr(step, total_steps, (schedule.lr)(p.role))?;
                    sgd_step(std::iter::once(&mut **p), cfg.sgd(lr))?;
                    p.zero_grad();
                }
            }
            if let Some((path, w)) = &mut log {
                let mut line = serde_json::Map::new();
                line.insert("epoch".into(), epoch.into());
                line.insert("step".into(), step.into());
                line.insert("lr".into(), cosine_lr(step, total_steps, (schedule.lr)(Role::Extractor3d))?.into());
                line.insert("items".into(), step_used.into());
                if step_used > 0 {
                    line.insert("loss".into(), (step_loss / step_used as f64).into());
                    for (k, v) in &step_parts {
                        line.insert(k.clone(), (v / step_used as f64).into());
                    }
                }
                writeln!(w, "{}", serde_json::Value::Object(line)).map_err(|e| Error::io(path.as_path(), e))?;
            }
            loss_sum += step_loss;
            for (k, v) in step_parts {
                *sums.entry(k).or_default() += v;
            }
            used += step_used;
            report.steps += 1;
        }
        let denom = used.max(1) as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / denom,
            components: sums.into_iter().map(|(k, v)| (k, v / denom)).collect(),
            items: used,
            skipped,
        };
        log::info!("{} epoch {} loss {:.6} ({} skipped)", schedule.kind, epoch, stats.loss, skipped);
        if skipped > 0 {
            log::warn!("{} epoch {}: {} items skipped", schedule.kind, epoch, skipped);
        }
        report.epochs.push(stats);
        if let Some(dir) = &run.dir {
            if let Some((path, w)) = &mut log {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            save_checkpoint(&dir.join("checkpoint"), schedule.kind, &run.provenance, model.params(), true)?;
            write_json(
                &dir.join("state.json"),
                &RunState {
                    kind: schedule.kind.to_string(),
                    provenance: run.provenance.clone(),
                    report: report.clone(),
                },
            )?;
        }
    }
    Ok(report)
}
