//! Run configuration: model widths and variant, loss weights, optimizer
//! settings, training schedule, and the synthetic split. Parsed from TOML
//! with unknown keys rejected, and validated before anything is allocated.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Frozen backbones, shared projection encoder with modality tokens.
    Light,
    /// `Light` plus the cross-fusion exchange and projections ahead of it.
    Plus,
    /// Baseline with trainable backbones and no shared encoder.
    FullTrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Add,
    Mul,
    Concat,
    CrossAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Positions added to query/key inputs of every head attention layer.
    AttnInput,
    /// Positions added once to the head input sequence.
    InputOnce,
}

fn d_64() -> usize {
    64
}
fn d_32() -> usize {
    32
}
fn d_48() -> usize {
    48
}
fn d_256() -> usize {
    256
}
fn four() -> usize {
    4
}
fn two() -> usize {
    2
}
fn one() -> usize {
    1
}
fn sixteen() -> usize {
    16
}
fn thirty_two() -> usize {
    32
}
fn yes() -> bool {
    true
}
fn light() -> Variant {
    Variant::Light
}
fn add() -> FusionKind {
    FusionKind::Add
}
fn attn_input() -> PositionMode {
    PositionMode::AttnInput
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "light")]
    pub variant: Variant,
    #[serde(default = "add")]
    pub fusion: FusionKind,
    #[serde(default = "d_64")]
    pub d_model: usize,
    #[serde(default = "d_32")]
    pub d_backbone_img: usize,
    #[serde(default = "d_48")]
    pub d_backbone_txt: usize,
    #[serde(default = "d_256")]
    pub d_ffn: usize,
    #[serde(default = "four")]
    pub up_layers: usize,
    #[serde(default = "four")]
    pub up_heads: usize,
    #[serde(default = "two")]
    pub enc_layers: usize,
    #[serde(default = "two")]
    pub dec_layers: usize,
    #[serde(default = "four")]
    pub head_heads: usize,
    /// Contrastive embedding width; defaults to `d_model`.
    #[serde(default)]
    pub d_contrastive: Option<usize>,
    #[serde(default = "sixteen")]
    pub num_queries: usize,
    /// Maximum caption length L; the token head emits L+1 logits.
    #[serde(default = "thirty_two")]
    pub max_tokens: usize,
    #[serde(default = "one")]
    pub cross_fusion_heads: usize,
    #[serde(default = "yes")]
    pub train_shared_projections: bool,
    /// Reserved; per-decoder-layer auxiliary losses are not implemented.
    #[serde(default)]
    pub aux_loss: bool,
    #[serde(default = "attn_input")]
    pub position_mode: PositionMode,
    /// Raster patch edge; each patch becomes one image feature cell.
    #[serde(default = "four")]
    pub patch: usize,
    /// Hidden width of the image stub's first layer; defaults to
    /// `d_backbone_img`.
    #[serde(default)]
    pub img_stub_hidden: Option<usize>,
    #[serde(default = "four")]
    pub txt_stub_heads: usize,
    /// Feed-forward width of the text stub block; defaults to
    /// `4 * d_backbone_txt`.
    #[serde(default)]
    pub txt_stub_ffn: Option<usize>,
    /// Embedding table rows; defaults to the split vocabulary size. Larger
    /// values are useful for parameter accounting at realistic scales.
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are complete")
    }
}

impl ModelConfig {
    pub fn d_contrastive(&self) -> usize {
        self.d_contrastive.unwrap_or(self.d_model)
    }

    pub fn img_stub_hidden(&self) -> usize {
        self.img_stub_hidden.unwrap_or(self.d_backbone_img)
    }

    pub fn txt_stub_ffn(&self) -> usize {
        self.txt_stub_ffn.unwrap_or(4 * self.d_backbone_txt)
    }
}

fn w_l1() -> f64 {
    5.0
}
fn w_giou() -> f64 {
    2.0
}
fn w_one() -> f64 {
    1.0
}
fn temp() -> f64 {
    0.07
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "w_l1")]
    pub l1: f64,
    #[serde(default = "w_giou")]
    pub giou: f64,
    #[serde(default = "w_one")]
    pub soft_token: f64,
    #[serde(default = "w_one")]
    pub contrastive: f64,
    #[serde(default = "temp")]
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        toml::from_str("").expect("defaults are complete")
    }
}

fn lr_default() -> f64 {
    1e-4
}
fn beta1_default() -> f64 {
    0.9
}
fn beta2_default() -> f64 {
    0.999
}
fn eps_default() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the peak rate to zero after warmup.
    Cosine,
}

fn constant() -> LrSchedule {
    LrSchedule::Constant
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "lr_default")]
    pub lr: f64,
    #[serde(default = "beta1_default")]
    pub beta1: f64,
    #[serde(default = "beta2_default")]
    pub beta2: f64,
    #[serde(default = "eps_default")]
    pub eps: f64,
    /// Linear ramp from zero over this many steps.
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "constant")]
    pub schedule: LrSchedule,
}

impl OptimConfig {
    /// Learning rate for a 1-based step index out of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let done = (step - self.warmup_steps) as f64 / span;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * done.min(1.0)).cos())
            }
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are complete")
    }
}

fn steps_default() -> usize {
    2000
}
fn batch_default() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "steps_default")]
    pub steps: usize,
    #[serde(default = "batch_default")]
    pub batch_size: usize,
    /// Also write `checkpoint-<step>.ckpt` every N steps (0 = end only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are complete")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: SplitSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Vocabulary rows of the text embedding table.
    pub fn vocab_rows(&self) -> Result<usize> {
        let builtin = self.data.vocabulary()?.len();
        match self.model.vocab_size {
            Some(n) if n < builtin => Err(Error::Config(format!(
                "vocab_size {n} smaller than the split vocabulary ({builtin})"
            ))),
            Some(n) => Ok(n),
            None => Ok(builtin),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |msg: String| Err(Error::Config(msg));
        if m.d_model % m.up_heads != 0 || m.d_model % m.head_heads != 0 {
            return fail(format!(
                "d_model {} must divide by up_heads {} and head_heads {}",
                m.d_model, m.up_heads, m.head_heads
            ));
        }
        if m.d_model % m.cross_fusion_heads != 0 {
            return fail(format!(
                "d_model {} must divide by cross_fusion_heads {}",
                m.d_model, m.cross_fusion_heads
            ));
        }
        if m.d_model % 4 != 0 {
            return fail(format!("d_model {} must divide by 4 for 2-D positions", m.d_model));
        }
        if m.d_backbone_txt % m.txt_stub_heads != 0 {
            return fail(format!(
                "d_backbone_txt {} must divide by txt_stub_heads {}",
                m.d_backbone_txt, m.txt_stub_heads
            ));
        }
        if self.data.grid_rows % m.patch != 0 || self.data.grid_cols % m.patch != 0 {
            return fail(format!(
                "raster {}x{} not divisible into {} px patches",
                self.data.grid_rows, self.data.grid_cols, m.patch
            ));
        }
        if m.num_queries < self.data.max_objects {
            return fail(format!(
                "num_queries {} below max_objects {}",
                m.num_queries, self.data.max_objects
            ));
        }
        if self.data.max_caption_len() > m.max_tokens {
            return fail(format!(
                "captions can reach {} tokens, above max_tokens {}",
                self.data.max_caption_len(),
                m.max_tokens
            ));
        }
        if m.aux_loss {
            return fail("aux_loss is reserved and must remain off".into());
        }
        if m.up_layers == 0 && m.variant != Variant::FullTrain {
            return fail("up_layers must be positive".into());
        }
        if self.loss.temperature <= 0.0 {
            return fail(format!("temperature {} must be positive", self.loss.temperature));
        }
        if self.optimizer.lr <= 0.0 {
            return fail("learning rate must be positive".into());
        }
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return fail("steps and batch_size must be positive".into());
        }
        self.data.validate()?;
        self.vocab_rows()?;
        Ok(())
    }

    /// Tiny fixture for finite-difference checking: plus variant so every
    /// weight family is exercised, widths small enough to perturb every
    /// element.
    pub fn tiny() -> Self {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.model.variant = Variant::Plus;
        cfg.model.d_model = 8;
        cfg.model.d_ffn = 16;
        cfg.model.up_layers = 2;
        cfg.model.up_heads = 2;
        cfg.model.enc_layers = 1;
        cfg.model.dec_layers = 1;
        cfg.model.head_heads = 2;
        cfg.model.num_queries = 4;
        cfg.model.max_tokens = 16;
        cfg.model.d_backbone_img = 8;
        cfg.model.d_backbone_txt = 8;
        cfg.model.txt_stub_heads = 2;
        cfg.model.txt_stub_ffn = Some(16);
        cfg.model.img_stub_hidden = Some(8);
        cfg.model.patch = 4;
        cfg.data.grid_rows = 8;
        cfg.data.grid_cols = 8;
        cfg.data.max_objects = 2;
        cfg.data.min_obj_px = 3;
        cfg.data.max_obj_px = 4;
        cfg.data.n_train = 4;
        cfg.data.n_val = 2;
        cfg
    }

    /// Realistic widths for parameter accounting only: backbone stubs sized
    /// like large pretrained encoders, head at common detection scale.
    pub fn paper_scale() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.d_model = 256;
        cfg.model.d_ffn = 1024;
        cfg.model.d_backbone_img = 2048;
        cfg.model.d_backbone_txt = 768;
        cfg.model.img_stub_hidden = Some(2048);
        cfg.model.txt_stub_heads = 12;
        cfg.model.txt_stub_ffn = Some(3072);
        cfg.model.vocab_size = Some(50_265);
        cfg.model.enc_layers = 6;
        cfg.model.dec_layers = 6;
        cfg.model.head_heads = 8;
        cfg.model.num_queries = 100;
        cfg.model.max_tokens = 64;
        cfg
    }
}
