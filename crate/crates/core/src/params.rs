//! Parameter accounting: per-entry counts grouped into frozen backbone,
//! trainable backbone, and head, for comparing variants at matched widths.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    FrozenBackbone,
    TrainableBackbone,
    Head,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntryReport {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub trainable: bool,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamReport {
    pub entries: Vec<ParamEntryReport>,
    pub frozen_backbone: usize,
    pub trainable_backbone: usize,
    pub head: usize,
    pub grand_total: usize,
}

/// Representation machinery counts as backbone: the frozen feature stubs
/// plus everything in the shared-encoder stack. Projections into the
/// shared space, queries, and the detection stack count as head.
fn is_backbone(name: &str) -> bool {
    name.starts_with("img_backbone.")
        || name.starts_with("txt_backbone.")
        || name.starts_with("up.")
        || name.starts_with("fusion.")
        || name.starts_with("cross.")
        || name.starts_with("p1.")
        || name.starts_with("p2.")
}

/// Shape enumeration only; no training state is touched.
pub fn count_params(cfg: &RunConfig) -> Result<ParamReport> {
    let model = Model::new(cfg.clone())?;
    Ok(report_for(&model))
}

pub fn report_for(model: &Model) -> ParamReport {
    let mut entries = Vec::new();
    let (mut frozen_b, mut train_b, mut head) = (0usize, 0usize, 0usize);
    for e in model.registry.iter() {
        let count = e.tensor.numel();
        let group = if is_backbone(&e.name) {
            if e.trainable {
                train_b += count;
                ParamGroup::TrainableBackbone
            } else {
                frozen_b += count;
                ParamGroup::FrozenBackbone
            }
        } else {
            head += count;
            ParamGroup::Head
        };
        entries.push(ParamEntryReport {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            count,
            trainable: e.trainable,
            group,
        });
    }
    ParamReport {
        entries,
        frozen_backbone: frozen_b,
        trainable_backbone: train_b,
        head,
        grand_total: frozen_b + train_b + head,
    }
}

impl ParamReport {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<28} {:>14} {:>10} {:>10}\n",
            "name", "shape", "count", "trainable"
        ));
        for e in &self.entries {
            s.push_str(&format!(
                "{:<28} {:>14} {:>10} {:>10}\n",
                e.name,
                format!("{:?}", e.shape),
                e.count,
                e.trainable
            ));
        }
        s.push_str(&format!(
            "\nfrozen backbone    {:>12}\ntrainable backbone {:>12}\nhead               {:>12}\ngrand total        {:>12}\n",
            self.frozen_backbone, self.trainable_backbone, self.head, self.grand_total
        ));
        if self.frozen_backbone + self.trainable_backbone > 0 {
            let frac = self.trainable_backbone as f64
                / (self.frozen_backbone + self.trainable_backbone) as f64;
            s.push_str(&format!("trainable backbone fraction {frac:.4}\n"));
        }
        s
    }
}
