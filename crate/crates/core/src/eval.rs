//! Grounding evaluation: per-phrase ranking of predicted boxes by span
//! score, Recall@k and precision@k at IoU ≥ 0.5, top-1 IoU statistics,
//! and the prediction dump format.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::detect::{box_confidence, phrase_score, Predictions};
use crate::error::Result;
use crate::losses::iou_value;
use crate::model::Model;

pub const IOU_THRESHOLD: f64 = 0.5;
pub const RANK_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_scenes: usize,
    pub n_phrases: usize,
    pub recall1: f64,
    pub recall5: f64,
    pub recall10: f64,
    pub precision1: f64,
    pub precision5: f64,
    pub precision10: f64,
    /// Mean IoU of the top-ranked box against its phrase's ground truth.
    pub mean_iou: f64,
    pub pr50: f64,
    pub pr70: f64,
    pub pr90: f64,
    /// Expected Recall@1 under uniformly random ranking of the same boxes.
    pub random_recall1: f64,
}

impl MetricsReport {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "phrases {} over {} scenes\n",
            self.n_phrases, self.n_scenes
        ));
        s.push_str(&format!(
            "recall@1 {:.4}  recall@5 {:.4}  recall@10 {:.4}\n",
            self.recall1, self.recall5, self.recall10
        ));
        s.push_str(&format!(
            "prec@1   {:.4}  prec@5   {:.4}  prec@10   {:.4}\n",
            self.precision1, self.precision5, self.precision10
        ));
        s.push_str(&format!(
            "mean IoU {:.4}  Pr@0.5 {:.4}  Pr@0.7 {:.4}  Pr@0.9 {:.4}\n",
            self.mean_iou, self.pr50, self.pr70, self.pr90
        ));
        s.push_str(&format!("random-ranking recall@1 {:.4}\n", self.random_recall1));
        s
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Drop boxes with `1 − P(∅)` below this before ranking.
    pub confidence_filter: Option<f64>,
}

#[derive(Default)]
struct Accumulator {
    n_scenes: usize,
    n_phrases: usize,
    recall_hits: [usize; 3],
    precision_sum: [f64; 3],
    iou_sum: f64,
    pr_hits: [usize; 3],
    random_sum: f64,
}

/// Evaluate a model over scenes, using ground truth from each scene.
pub fn evaluate(model: &Model, scenes: &[Scene], opts: EvalOptions) -> Result<MetricsReport> {
    let mut acc = Accumulator::default();
    for scene in scenes {
        let preds = model.predict(scene)?;
        score_scene(&preds, scene, opts, &mut acc)?;
    }
    Ok(finish(acc))
}

/// Evaluate externally supplied predictions (an oracle, a dump replay).
pub fn evaluate_predictions(
    pairs: &[(Predictions, &Scene)],
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let mut acc = Accumulator::default();
    for (preds, scene) in pairs {
        score_scene(preds, scene, opts, &mut acc)?;
    }
    Ok(finish(acc))
}

fn score_scene(
    preds: &Predictions,
    scene: &Scene,
    opts: EvalOptions,
    acc: &mut Accumulator,
) -> Result<()> {
    acc.n_scenes += 1;
    let q_total = preds.boxes.rows();
    let conf = box_confidence(preds);
    let candidates: Vec<usize> = match opts.confidence_filter {
        Some(t) => (0..q_total).filter(|&q| conf[q] >= t).collect(),
        None => (0..q_total).collect(),
    };
    for obj in &scene.objects {
        acc.n_phrases += 1;
        let scores = phrase_score(preds, obj.span)?;
        let mut ranked = candidates.clone();
        // Descending score, ties to the lower query index.
        ranked.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

        let ious: Vec<f64> = (0..q_total)
            .map(|q| {
                let b: [f64; 4] = preds.boxes.row(q).try_into().expect("four columns");
                iou_value(&b, &obj.box_cxcywh)
            })
            .collect();

        for (slot, &k) in RANK_KS.iter().enumerate() {
            let top = &ranked[..k.min(ranked.len())];
            if top.iter().any(|&q| ious[q] >= IOU_THRESHOLD) {
                acc.recall_hits[slot] += 1;
            }
            let denom = k.min(ranked.len()).max(1);
            let hits = top.iter().filter(|&&q| ious[q] >= IOU_THRESHOLD).count();
            acc.precision_sum[slot] += hits as f64 / denom as f64;
        }
        let top1_iou = ranked.first().map(|&q| ious[q]).unwrap_or(0.0);
        acc.iou_sum += top1_iou;
        for (slot, t) in [0.5, 0.7, 0.9].iter().enumerate() {
            if top1_iou >= *t {
                acc.pr_hits[slot] += 1;
            }
        }
        // Expectation of a hit when the ranking is uniformly random over
        // the same candidate boxes.
        let pool = if candidates.is_empty() { 1 } else { candidates.len() };
        let random_hits = candidates.iter().filter(|&&q| ious[q] >= IOU_THRESHOLD).count();
        acc.random_sum += random_hits as f64 / pool as f64;
    }
    Ok(())
}

fn finish(acc: Accumulator) -> MetricsReport {
    let n = acc.n_phrases.max(1) as f64;
    MetricsReport {
        n_scenes: acc.n_scenes,
        n_phrases: acc.n_phrases,
        recall1: acc.recall_hits[0] as f64 / n,
        recall5: acc.recall_hits[1] as f64 / n,
        recall10: acc.recall_hits[2] as f64 / n,
        precision1: acc.precision_sum[0] / n,
        precision5: acc.precision_sum[1] / n,
        precision10: acc.precision_sum[2] / n,
        mean_iou: acc.iou_sum / n,
        pr50: acc.pr_hits[0] as f64 / n,
        pr70: acc.pr_hits[1] as f64 / n,
        pr90: acc.pr_hits[2] as f64 / n,
        random_recall1: acc.random_sum / n,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: String,
    pub query_index: usize,
    pub box_cxcywh: [f64; 4],
    pub confidence: f64,
    pub token_distribution: Vec<f64>,
}

/// One JSON line per (scene, query): box, confidence, token distribution.
pub fn dump_predictions(model: &Model, scenes: &[Scene], out: &mut impl Write) -> Result<()> {
    for scene in scenes {
        let preds = model.predict(scene)?;
        let conf = box_confidence(&preds);
        for q in 0..preds.boxes.rows() {
            let logits = preds.token_logits.row(q);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            let record = PredictionRecord {
                scene_id: scene.scene_id.clone(),
                query_index: q,
                box_cxcywh: preds.boxes.row(q).try_into().expect("four columns"),
                confidence: conf[q],
                token_distribution: exp.into_iter().map(|v| v / z).collect(),
            };
            writeln!(
                out,
                "{}",
                serde_json::to_string(&record).map_err(|e| crate::error::Error::Format(e.to_string()))?
            )?;
        }
    }
    Ok(())
}
