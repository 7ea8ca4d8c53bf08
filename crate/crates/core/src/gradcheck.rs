//! Finite-difference verification of every trainable tensor through the
//! full training loss on a tiny configuration.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::Tape;

pub const DEFAULT_FAIL_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&GradCheckRow> {
        self.rows.iter().filter(|r| r.max_rel_err >= self.threshold).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn render_table(&self) -> String {
        let mut s = format!("{:<28} {:>10} {:>14} {:>6}\n", "tensor", "elements", "max rel err", "ok");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<28} {:>10} {:>14.3e} {:>6}\n",
                r.name,
                r.elements,
                r.max_rel_err,
                if r.max_rel_err < self.threshold { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}

fn batch_loss(model: &Model, scenes: &[Scene]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut totals = Vec::with_capacity(scenes.len());
    for s in scenes {
        totals.push(model.scene_loss(&mut tape, s)?.total);
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = tape.add(acc, t)?;
    }
    let mean = tape.scale(acc, 1.0 / scenes.len() as f64);
    tape.item(mean)
}

/// Central differences (step 1e-6) against the tape gradient for every
/// element of every trainable tensor. Frozen tensors do not appear.
pub fn gradcheck(cfg: &RunConfig, threshold: f64) -> Result<GradCheckReport> {
    if cfg.model.d_model > 16 {
        return Err(Error::Contract(format!(
            "gradcheck wants a tiny config (d_model <= 16), got {}",
            cfg.model.d_model
        )));
    }
    let mut model = Model::new(cfg.clone())?;
    let scenes: Vec<Scene> = (0..2.min(cfg.data.n_train as u64))
        .map(|i| cfg.data.generate(i))
        .collect::<Result<_>>()?;

    // Analytic gradients from one backward pass.
    {
        let mut tape = Tape::new();
        let mut totals = Vec::with_capacity(scenes.len());
        for s in &scenes {
            totals.push(model.scene_loss(&mut tape, s)?.total);
        }
        let mut acc = totals[0];
        for &t in &totals[1..] {
            acc = tape.add(acc, t)?;
        }
        let mean = tape.scale(acc, 1.0 / scenes.len() as f64);
        model.registry.zero_grads();
        tape.backward(mean)?;
        tape.write_grads(&mut model.registry)?;
    }
    let analytic: Vec<(String, Vec<f64>)> = model
        .registry
        .iter()
        .filter(|e| e.trainable)
        .map(|e| {
            let g = e
                .tensor
                .grad
                .clone()
                .unwrap_or_else(|| vec![0.0; e.tensor.numel()]);
            (e.name.clone(), g)
        })
        .collect();

    let h = 1e-6;
    let mut rows = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let n = grad.len();
        let mut max_rel = 0.0f64;
        for i in 0..n {
            let original = model.registry.tensor(&name).unwrap().data()[i];
            model.registry.entry_mut(&name).unwrap().tensor.data_mut()[i] = original + h;
            let up = batch_loss(&model, &scenes)?;
            model.registry.entry_mut(&name).unwrap().tensor.data_mut()[i] = original - h;
            let down = batch_loss(&model, &scenes)?;
            model.registry.entry_mut(&name).unwrap().tensor.data_mut()[i] = original;
            let fd = (up - down) / (2.0 * h);
            let a = grad[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        rows.push(GradCheckRow { name, elements: n, max_rel_err: max_rel });
    }
    Ok(GradCheckReport { rows, threshold })
}
