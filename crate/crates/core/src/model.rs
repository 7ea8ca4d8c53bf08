//! Whole-model assembly: builds the parameter registry for a config's
//! variant and runs the scene-to-predictions forward pass.

use crate::config::{RunConfig, Variant};
use crate::data::Scene;
use crate::detect::{self, PredictionVars, Predictions};
use crate::encoders;
use crate::error::Result;
use crate::fusion;
use crate::losses::{self, GroundTruth, SceneLoss};
use crate::param::ParamRegistry;
use crate::tape::Tape;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: RunConfig,
    pub registry: ParamRegistry,
}

impl Model {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut reg = ParamRegistry::new();
        encoders::register_image_backbone(&mut reg, &cfg)?;
        encoders::register_text_backbone(&mut reg, &cfg)?;
        encoders::register_shared_projections(&mut reg, &cfg)?;
        match cfg.model.variant {
            Variant::Light => {
                fusion::register_modality_tokens(&mut reg, &cfg)?;
                fusion::register_up(&mut reg, &cfg)?;
            }
            Variant::Plus => {
                fusion::register_modality_tokens(&mut reg, &cfg)?;
                fusion::register_up(&mut reg, &cfg)?;
                fusion::register_cross_fusion(&mut reg, &cfg)?;
                fusion::register_plus_projections(&mut reg, &cfg)?;
            }
            Variant::FullTrain => {}
        }
        detect::register_detection_head(&mut reg, &cfg)?;
        Ok(Model { cfg, registry: reg })
    }

    /// Full forward pass for one scene on the given tape.
    pub fn forward(&self, tape: &mut Tape, scene: &Scene) -> Result<PredictionVars> {
        let img = encoders::encode_image_vars(tape, &self.registry, &self.cfg, scene)?;
        let txt =
            encoders::encode_text_vars(tape, &self.registry, &self.cfg, &scene.caption_tokens)?;
        let (o_up, t_up) = fusion::encode_both(tape, &self.registry, &self.cfg, &img, &txt)?;
        detect::detect(
            tape,
            &self.registry,
            &self.cfg,
            o_up,
            t_up,
            img.positions,
            txt.positions,
        )
    }

    /// Forward plus the full matched loss for one scene.
    pub fn scene_loss(&self, tape: &mut Tape, scene: &Scene) -> Result<SceneLoss> {
        let preds = self.forward(tape, scene)?;
        let gt = GroundTruth::from_scene(scene);
        losses::total_loss(tape, &preds, &gt, &self.cfg.loss)
    }

    /// Materialized predictions from a scratch tape.
    pub fn predict(&self, scene: &Scene) -> Result<Predictions> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, scene)?;
        Ok(vars.materialize(&tape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FusionKind;

    #[test]
    fn all_variant_and_fusion_combinations_run() {
        for variant in [Variant::Light, Variant::Plus, Variant::FullTrain] {
            for fusion in [
                FusionKind::Add,
                FusionKind::Mul,
                FusionKind::Concat,
                FusionKind::CrossAttention,
            ] {
                let mut cfg = RunConfig::tiny();
                cfg.model.variant = variant;
                cfg.model.fusion = fusion;
                let model = Model::new(cfg.clone()).unwrap();
                let scene = cfg.data.generate(0).unwrap();
                let mut tape = Tape::new();
                let out = model.scene_loss(&mut tape, &scene).unwrap();
                assert!(out.report.total.is_finite(), "{variant:?}/{fusion:?}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let cfg = RunConfig::tiny();
        let model = Model::new(cfg.clone()).unwrap();
        let scene = cfg.data.generate(1).unwrap();
        let a = model.predict(&scene).unwrap();
        let b = model.predict(&scene).unwrap();
        assert_eq!(a.boxes.data(), b.boxes.data());
        assert_eq!(a.token_logits.data(), b.token_logits.data());
    }
}
