//! Training loop: deterministic cyclic batching over the train split,
//! one tape per step, Adam over the trainable entries, a freeze audit
//! after every epoch, and a per-step loss log.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::Model;
use crate::param::{Adam, FreezeAudit};
use crate::tape::Tape;

/// Batch-mean loss terms for one optimizer step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub l1: f64,
    pub giou: f64,
    pub soft_token: f64,
    pub contrastive: f64,
}

impl StepRecord {
    fn from_reports(step: usize, reports: &[LossReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        StepRecord {
            step,
            total: mean(|r| r.total),
            l1: mean(|r| r.l1),
            giou: mean(|r| r.giou),
            soft_token: mean(|r| r.soft_token),
            contrastive: mean(|r| r.contrastive),
        }
    }
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    audit: FreezeAudit,
    curve: Vec<StepRecord>,
    steps_done: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let optimizer = Adam::new(
            model.cfg.optimizer.lr,
            (model.cfg.optimizer.beta1, model.cfg.optimizer.beta2),
            model.cfg.optimizer.eps,
        );
        let audit = FreezeAudit::capture(&model.registry);
        Ok(Trainer { model, optimizer, audit, curve: Vec::new(), steps_done: 0 })
    }

    /// Fresh trainer with parameters and optimizer state from a checkpoint.
    pub fn resume(cfg: RunConfig, path: &Path) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        let entries = checkpoint::load(path)?;
        let extras = checkpoint::apply_to_registry(&mut t.model.registry, &entries)?;
        t.optimizer.import_state(&extras)?;
        // The loaded weights are the new frozen baseline.
        t.audit = FreezeAudit::capture(&t.model.registry);
        Ok(t)
    }

    pub fn curve(&self) -> &[StepRecord] {
        &self.curve
    }

    /// Run the configured number of steps over the given scenes. Batches
    /// cycle through the slice in order; an epoch ends each full cycle and
    /// triggers the freeze audit.
    pub fn run(&mut self, scenes: &[Scene]) -> Result<()> {
        let steps = self.model.cfg.train.steps;
        self.run_steps(scenes, steps, |_| {})
    }

    pub fn run_steps(
        &mut self,
        scenes: &[Scene],
        steps: usize,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::Contract("no scenes to train on".into()));
        }
        let batch = self.model.cfg.train.batch_size;
        let steps_per_epoch = scenes.len().div_ceil(batch);
        let schedule_total = self.model.cfg.train.steps.max(self.steps_done + steps);
        for _ in 0..steps {
            let step = self.steps_done + 1;
            self.optimizer.lr = self.model.cfg.optimizer.lr_at(step, schedule_total);
            let mut tape = Tape::new();
            let mut reports = Vec::with_capacity(batch);
            let mut batch_ids = Vec::with_capacity(batch);
            let mut scene_totals = Vec::with_capacity(batch);
            for j in 0..batch {
                let scene = &scenes[((step - 1) * batch + j) % scenes.len()];
                batch_ids.push(scene.scene_id.clone());
                let out = self.model.scene_loss(&mut tape, scene).map_err(|e| {
                    Error::Domain(format!(
                        "step {step}: scene {} failed: {e}; batch {batch_ids:?}",
                        scene.scene_id
                    ))
                })?;
                reports.push(out.report);
                scene_totals.push(out.total);
            }
            let mut acc = scene_totals[0];
            for &t in &scene_totals[1..] {
                acc = tape.add(acc, t)?;
            }
            let batch_loss = tape.scale(acc, 1.0 / batch as f64);
            let record = StepRecord::from_reports(step, &reports);
            if !record.total.is_finite() {
                return Err(Error::Domain(format!(
                    "step {step}: non-finite batch loss {record:?}; batch {batch_ids:?}"
                )));
            }

            self.model.registry.zero_grads();
            tape.backward(batch_loss)?;
            tape.write_grads(&mut self.model.registry)?;
            self.optimizer.step(&mut self.model.registry)?;

            self.curve.push(record);
            on_step(&record);
            self.steps_done += 1;
            if self.steps_done % steps_per_epoch == 0 {
                self.audit.verify(&self.model.registry)?;
            }
        }
        self.audit.verify(&self.model.registry)?;
        Ok(())
    }

    /// Model parameters plus optimizer state.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model.registry, &self.optimizer.export_state())
    }

    pub fn verify_frozen(&self) -> Result<()> {
        self.audit.verify(&self.model.registry)
    }
}

/// Write the loss curve as CSV next to the checkpoint.
pub fn write_loss_curve(path: &Path, curve: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,total,l1,giou,soft_token,contrastive\n");
    for r in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.total, r.l1, r.giou, r.soft_token, r.contrastive
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Standard artifact paths inside a run directory.
pub fn run_paths(out_dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        out_dir.join("model.ckpt"),
        out_dir.join("loss_curve.csv"),
        out_dir.join("config.toml"),
    )
}
