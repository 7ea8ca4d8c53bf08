//! Frozen stand-ins for large pretrained image and text encoders, plus the
//! trainable projections into the shared embedding space.
//!
//! The stubs are seeded random networks, registered frozen (except under
//! the full-train baseline): any fixed deterministic featurizer serves,
//! because everything of interest is trained downstream of the features.

use crate::config::{RunConfig, Variant};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::nn;
use crate::param::ParamRegistry;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Per-cell backbone features plus head positions for one image.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// `[N_img × d_backbone_img]`
    pub features: Tensor,
    /// Sinusoidal 2-D positions at head width, `[N_img × d_model]`.
    pub positions: Tensor,
    pub grid: (usize, usize),
}

/// Contextual backbone features plus head positions for one caption.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// `[L_tok × d_backbone_txt]`
    pub features: Tensor,
    pub token_ids: Vec<u32>,
    /// Sinusoidal positions at head width, `[L_tok × d_model]`.
    pub positions: Tensor,
}

/// Tape-resident variant of the feature bundles, used inside a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    pub features: Var,
    pub positions: Var,
}

fn backbone_trainable(cfg: &RunConfig) -> bool {
    cfg.model.variant == Variant::FullTrain
}

pub fn register_image_backbone(reg: &mut ParamRegistry, cfg: &RunConfig) -> Result<()> {
    let m = &cfg.model;
    let raw = m.patch * m.patch * cfg.data.channels;
    let trainable = backbone_trainable(cfg);
    nn::register_linear(reg, cfg.seed, "img_backbone.l1", raw, m.img_stub_hidden(), trainable)?;
    nn::register_linear(
        reg,
        cfg.seed,
        "img_backbone.l2",
        m.img_stub_hidden(),
        m.d_backbone_img,
        trainable,
    )
}

pub fn register_text_backbone(reg: &mut ParamRegistry, cfg: &RunConfig) -> Result<()> {
    let m = &cfg.model;
    let trainable = backbone_trainable(cfg);
    let embed = nn::seeded_normal(
        cfg.seed,
        "txt_backbone.embed",
        vec![cfg.vocab_rows()?, m.d_backbone_txt],
        0.5,
    );
    reg.register("txt_backbone.embed", embed, trainable)?;
    nn::register_block(
        reg,
        cfg.seed,
        "txt_backbone.attn",
        m.d_backbone_txt,
        m.txt_stub_ffn(),
        trainable,
    )
}

pub fn register_shared_projections(reg: &mut ParamRegistry, cfg: &RunConfig) -> Result<()> {
    let m = &cfg.model;
    let trainable = m.train_shared_projections || m.variant == Variant::FullTrain;
    nn::register_linear(reg, cfg.seed, "proj.image", m.d_backbone_img, m.d_model, trainable)?;
    nn::register_linear(reg, cfg.seed, "proj.text", m.d_backbone_txt, m.d_model, trainable)
}

/// Flatten the raster into one row of `patch·patch·channels` raw values per
/// grid cell, scaled to [0, 1].
fn patch_rows(scene: &Scene, cfg: &RunConfig) -> Result<Tensor> {
    let p = cfg.model.patch;
    let r = &scene.raster;
    if r.rows != cfg.data.grid_rows || r.cols != cfg.data.grid_cols || r.channels != cfg.data.channels
    {
        return Err(Error::Dimension(format!(
            "raster {}x{}x{} does not match configured {}x{}x{}",
            r.rows, r.cols, r.channels, cfg.data.grid_rows, cfg.data.grid_cols, cfg.data.channels
        )));
    }
    let (gr, gc) = (r.rows / p, r.cols / p);
    let raw = p * p * r.channels;
    let mut data = Vec::with_capacity(gr * gc * raw);
    for cell_r in 0..gr {
        for cell_c in 0..gc {
            for py in 0..p {
                for px in 0..p {
                    let pix = r.pixel(cell_r * p + py, cell_c * p + px);
                    data.extend(pix.iter().map(|&v| v as f64 / 255.0));
                }
            }
        }
    }
    Tensor::new(vec![gr * gc, raw], data)
}

/// Two seeded linear+relu layers over each cell's raw channel vector.
pub fn encode_image_vars(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &RunConfig,
    scene: &Scene,
) -> Result<FeatureVars> {
    let p = cfg.model.patch;
    let (gr, gc) = (cfg.data.grid_rows / p, cfg.data.grid_cols / p);
    let rows = patch_rows(scene, cfg)?;
    let x = tape.constant(&rows);
    let h = nn::linear(tape, reg, "img_backbone.l1", x)?;
    let h = tape.relu(h)?;
    let h = nn::linear(tape, reg, "img_backbone.l2", h)?;
    let features = tape.relu(h)?;
    let positions = tape.constant(&nn::sinusoidal_2d(gr, gc, cfg.model.d_model)?);
    Ok(FeatureVars { features, positions })
}

pub fn encode_image(scene: &Scene, cfg: &RunConfig, reg: &ParamRegistry) -> Result<ImageFeatures> {
    let mut tape = Tape::new();
    let vars = encode_image_vars(&mut tape, reg, cfg, scene)?;
    let p = cfg.model.patch;
    Ok(ImageFeatures {
        features: tape.value(vars.features),
        positions: tape.value(vars.positions),
        grid: (cfg.data.grid_rows / p, cfg.data.grid_cols / p),
    })
}

/// Frozen embedding lookup, sinusoidal positions at stub width, and one
/// self-attention block.
pub fn encode_text_vars(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &RunConfig,
    token_ids: &[u32],
) -> Result<FeatureVars> {
    let m = &cfg.model;
    if token_ids.is_empty() {
        return Err(Error::Input("empty caption".into()));
    }
    if token_ids.len() > m.max_tokens {
        return Err(Error::Input(format!(
            "caption of {} tokens exceeds maximum {}",
            token_ids.len(),
            m.max_tokens
        )));
    }
    let vocab_rows = cfg.vocab_rows()?;
    if let Some(bad) = token_ids.iter().find(|&&id| id as usize >= vocab_rows) {
        return Err(Error::Input(format!(
            "token id {bad} outside vocabulary of {vocab_rows}"
        )));
    }
    let table = tape.param(reg, "txt_backbone.embed")?;
    let idx: Vec<usize> = token_ids.iter().map(|&i| i as usize).collect();
    let embedded = tape.gather_rows(table, &idx)?;
    let stub_pos = tape.constant(&nn::sinusoidal_1d(token_ids.len(), m.d_backbone_txt));
    let x = tape.add(embedded, stub_pos)?;
    let features = nn::block(tape, reg, "txt_backbone.attn", x, m.txt_stub_heads, None)?;
    let positions = tape.constant(&nn::sinusoidal_1d(token_ids.len(), m.d_model));
    Ok(FeatureVars { features, positions })
}

pub fn encode_text(
    token_ids: &[u32],
    cfg: &RunConfig,
    reg: &ParamRegistry,
) -> Result<TextFeatures> {
    let mut tape = Tape::new();
    let vars = encode_text_vars(&mut tape, reg, cfg, token_ids)?;
    Ok(TextFeatures {
        features: tape.value(vars.features),
        token_ids: token_ids.to_vec(),
        positions: tape.value(vars.positions),
    })
}

/// Affine map from a backbone width into the shared `d_model` space.
pub fn project_to_shared(
    tape: &mut Tape,
    reg: &ParamRegistry,
    which: Modality,
    x: Var,
) -> Result<Var> {
    let name = match which {
        Modality::Image => "proj.image",
        Modality::Text => "proj.text",
    };
    nn::linear(tape, reg, name, x)
}
