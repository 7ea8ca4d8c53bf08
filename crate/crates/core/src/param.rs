//! Named parameter registry and the Adam optimizer.
//!
//! The freezing contract lives here: an entry registered with
//! `trainable = false` is never mutated by an optimizer step, and
//! [`FreezeAudit`] can prove it bit-for-bit.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered map of named parameters with a per-entry trainable flag.
#[derive(Debug, Default, Clone)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, mut tensor: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        tensor.requires_grad = trainable;
        tensor.grad = None;
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), tensor, trainable });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entry(name).map(|e| &e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over all entries.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }
}

/// Adam with bias correction. Moment buffers persist across calls; frozen
/// entries are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam { lr, beta1: betas.0, beta2: betas.1, eps, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// One update over every trainable entry with a populated gradient.
    pub fn step(&mut self, reg: &mut ParamRegistry) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for e in reg.entries.iter_mut() {
            if !e.trainable {
                continue;
            }
            let Some(grad) = e.tensor.grad.clone() else { continue };
            if grad.len() != e.tensor.numel() {
                return Err(Error::Contract(format!(
                    "gradient length {} does not match parameter '{}' ({})",
                    grad.len(),
                    e.name,
                    e.tensor.numel()
                )));
            }
            let m = self
                .m
                .entry(e.name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(e.name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let data = e.tensor.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers flattened to named tensors, for checkpointing.
    pub fn export_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("optim.step".to_string(), Tensor::scalar(self.step as f64)));
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            out.push((format!("optim.m.{name}"), Tensor::vector(self.m[name].clone())));
            out.push((format!("optim.v.{name}"), Tensor::vector(self.v[name].clone())));
        }
        out
    }

    pub fn import_state(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in entries {
            if name == "optim.step" {
                self.step = t.item()? as u64;
            } else if let Some(p) = name.strip_prefix("optim.m.") {
                self.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                self.v.insert(p.to_string(), t.data().to_vec());
            }
        }
        Ok(())
    }
}

/// Byte-exact snapshot of every frozen entry, taken at init time.
#[derive(Debug, Clone)]
pub struct FreezeAudit {
    snapshots: Vec<(String, Vec<u64>)>,
}

impl FreezeAudit {
    pub fn capture(reg: &ParamRegistry) -> Self {
        let snapshots = reg
            .iter()
            .filter(|e| !e.trainable)
            .map(|e| {
                (
                    e.name.clone(),
                    e.tensor.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();
        FreezeAudit { snapshots }
    }

    /// Error on the first frozen tensor whose bits drifted.
    pub fn verify(&self, reg: &ParamRegistry) -> Result<()> {
        for (name, bits) in &self.snapshots {
            let entry = reg
                .entry(name)
                .ok_or_else(|| Error::Contract(format!("frozen entry '{name}' disappeared")))?;
            let same = entry.tensor.numel() == bits.len()
                && entry
                    .tensor
                    .data()
                    .iter()
                    .zip(bits)
                    .all(|(v, b)| v.to_bits() == *b);
            if !same {
                return Err(Error::Contract(format!(
                    "frozen parameter '{name}' was mutated"
                )));
            }
        }
        Ok(())
    }

    pub fn frozen_count(&self) -> usize {
        self.snapshots.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry_with(trainable: bool) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        reg.register("w", Tensor::vector(vec![1.0, -2.0, 3.0]), trainable)
            .unwrap();
        reg
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut reg = registry_with(true);
        assert!(reg.register("w", Tensor::scalar(0.0), true).is_err());
    }

    #[test]
    fn frozen_entry_ignores_incoming_gradient() {
        let mut reg = registry_with(false);
        reg.entry_mut("w").unwrap().tensor.grad = Some(vec![10.0, 10.0, 10.0]);
        let before = reg.tensor("w").unwrap().data().to_vec();
        let mut adam = Adam::new(0.1, (0.9, 0.999), 1e-8);
        adam.step(&mut reg).unwrap();
        assert_eq!(reg.tensor("w").unwrap().data(), before.as_slice());
    }

    #[test]
    fn first_adam_step_is_bias_corrected_lr() {
        // With g=1 at step 1: m̂ = 1, v̂ = 1, so Δ = lr / (1 + eps) ≈ lr.
        let mut reg = ParamRegistry::new();
        reg.register("s", Tensor::scalar(0.0), true).unwrap();
        reg.entry_mut("s").unwrap().tensor.grad = Some(vec![1.0]);
        let mut adam = Adam::new(0.1, (0.9, 0.999), 1e-8);
        adam.step(&mut reg).unwrap();
        let v = reg.tensor("s").unwrap().item().unwrap();
        assert!((v + 0.1).abs() < 1e-8, "moved by {v}, wanted ≈ -0.1");
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut reg = registry_with(true);
        reg.entry_mut("w").unwrap().tensor.grad = Some(vec![0.0; 3]);
        let before = reg.tensor("w").unwrap().data().to_vec();
        let mut adam = Adam::new(0.1, (0.9, 0.999), 1e-8);
        adam.step(&mut reg).unwrap();
        assert_eq!(reg.tensor("w").unwrap().data(), before.as_slice());
    }

    #[test]
    fn freeze_audit_detects_drift() {
        let mut reg = registry_with(false);
        let audit = FreezeAudit::capture(&reg);
        audit.verify(&reg).unwrap();
        let slot = &mut reg.entry_mut("w").unwrap().tensor.data_mut()[0];
        *slot = f64::from_bits(slot.to_bits() ^ 1); // one-ulp drift
        assert!(audit.verify(&reg).is_err());
    }

    #[test]
    fn adam_state_round_trips() {
        let mut reg = registry_with(true);
        reg.entry_mut("w").unwrap().tensor.grad = Some(vec![0.5, -0.5, 0.1]);
        let mut adam = Adam::new(0.01, (0.9, 0.999), 1e-8);
        adam.step(&mut reg).unwrap();
        let state = adam.export_state();
        let mut adam2 = Adam::new(0.01, (0.9, 0.999), 1e-8);
        adam2.import_state(&state).unwrap();
        assert_eq!(adam2.step_index(), 1);
        // A further identical step from either instance matches exactly.
        let mut reg2 = reg.clone();
        reg.entry_mut("w").unwrap().tensor.grad = Some(vec![0.2, 0.2, 0.2]);
        reg2.entry_mut("w").unwrap().tensor.grad = Some(vec![0.2, 0.2, 0.2]);
        adam.step(&mut reg).unwrap();
        adam2.step(&mut reg2).unwrap();
        assert_eq!(reg.tensor("w").unwrap().data(), reg2.tensor("w").unwrap().data());
    }
}
