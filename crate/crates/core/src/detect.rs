//! DETR-style grounding head: a transformer encoder over the concatenated
//! image/text sequence, a decoder driven by learned object queries, and
//! three output heads — box regression, token distribution over caption
//! positions plus the no-object slot, and contrastive embeddings.

use crate::config::{PositionMode, RunConfig};
use crate::data::Span;
use crate::error::{Error, Result};
use crate::nn;
use crate::param::ParamRegistry;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub fn register_detection_head(reg: &mut ParamRegistry, cfg: &RunConfig) -> Result<()> {
    let m = &cfg.model;
    let d = m.d_model;
    reg.register(
        "queries.embed",
        nn::seeded_normal(cfg.seed, "queries.embed", vec![m.num_queries, d], 0.02),
        true,
    )?;
    for layer in 0..m.enc_layers {
        nn::register_block(reg, cfg.seed, &format!("head.enc.l{layer}"), d, m.d_ffn, true)?;
    }
    nn::register_layernorm(reg, "head.enc.norm", d, true)?;
    for layer in 0..m.dec_layers {
        let base = format!("head.dec.l{layer}");
        nn::register_layernorm(reg, &format!("{base}.ln1"), d, true)?;
        nn::register_mha(reg, cfg.seed, &format!("{base}.self"), d, true)?;
        nn::register_layernorm(reg, &format!("{base}.ln2"), d, true)?;
        nn::register_mha(reg, cfg.seed, &format!("{base}.cross"), d, true)?;
        nn::register_layernorm(reg, &format!("{base}.ln3"), d, true)?;
        nn::register_linear(reg, cfg.seed, &format!("{base}.ffn1"), d, m.d_ffn, true)?;
        nn::register_linear(reg, cfg.seed, &format!("{base}.ffn2"), m.d_ffn, d, true)?;
    }
    nn::register_layernorm(reg, "head.dec.norm", d, true)?;
    nn::register_linear(reg, cfg.seed, "head.box.l1", d, d, true)?;
    nn::register_linear(reg, cfg.seed, "head.box.l2", d, d, true)?;
    nn::register_linear(reg, cfg.seed, "head.box.l3", d, 4, true)?;
    nn::register_linear(reg, cfg.seed, "head.token", d, m.max_tokens + 1, true)?;
    nn::register_linear(reg, cfg.seed, "head.contrast.obj", d, m.d_contrastive(), true)?;
    nn::register_linear(reg, cfg.seed, "head.contrast.txt", d, m.d_contrastive(), true)
}

/// Tape handles for one forward pass's outputs.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    /// `[Q × 4]` sigmoid-bounded (cx, cy, w, h).
    pub boxes: Var,
    /// `[Q × (L+1)]`; the last column is the no-object slot.
    pub token_logits: Var,
    /// `[Q × d_c]`, unit rows.
    pub obj_embed: Var,
    /// `[L_tok × d_c]`, unit rows.
    pub txt_embed: Var,
    pub n_img: usize,
    pub l_tok: usize,
}

/// Materialized predictions for ranking, metrics, and dumps.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub boxes: Tensor,
    pub token_logits: Tensor,
    pub obj_embed: Tensor,
    pub txt_embed: Tensor,
}

impl PredictionVars {
    pub fn materialize(&self, tape: &Tape) -> Predictions {
        Predictions {
            boxes: tape.value(self.boxes),
            token_logits: tape.value(self.token_logits),
            obj_embed: tape.value(self.obj_embed),
            txt_embed: tape.value(self.txt_embed),
        }
    }
}

/// Run the head over the shared-space sequences.
///
/// Query/key inputs of every attention receive positions when the config
/// says `attn_input`; otherwise positions are added once to the encoder
/// input and the decoder starts from the query embeddings directly.
pub fn detect(
    tape: &mut Tape,
    reg: &ParamRegistry,
    cfg: &RunConfig,
    o_up: Var,
    t_up: Var,
    img_pos: Var,
    txt_pos: Var,
) -> Result<PredictionVars> {
    let m = &cfg.model;
    let n_img = tape.shape(o_up)[0];
    let l_tok = tape.shape(t_up)[0];
    if l_tok > m.max_tokens {
        return Err(Error::Input(format!(
            "caption of {l_tok} tokens exceeds maximum {}",
            m.max_tokens
        )));
    }

    let mut memory = tape.concat_rows(&[o_up, t_up])?;
    let mem_pos = tape.concat_rows(&[img_pos, txt_pos])?;
    let at_attn = m.position_mode == PositionMode::AttnInput;
    if !at_attn {
        memory = tape.add(memory, mem_pos)?;
    }
    for layer in 0..m.enc_layers {
        let pos = at_attn.then_some(mem_pos);
        memory = nn::block(tape, reg, &format!("head.enc.l{layer}"), memory, m.head_heads, pos)?;
    }
    memory = nn::layernorm(tape, reg, "head.enc.norm", memory)?;

    let query_embed = tape.param(reg, "queries.embed")?;
    let mut x = if at_attn {
        // Queries act as positional encodings over a zero-initialized state.
        let zeros = Tensor::zeros(vec![m.num_queries, m.d_model]);
        tape.constant(&zeros)
    } else {
        query_embed
    };
    for layer in 0..m.dec_layers {
        let base = format!("head.dec.l{layer}");
        let qpos = at_attn.then_some(query_embed);
        let mpos = at_attn.then_some(mem_pos);
        let h = nn::layernorm(tape, reg, &format!("{base}.ln1"), x)?;
        let sa = nn::mha(tape, reg, &format!("{base}.self"), h, h, qpos, qpos, m.head_heads)?;
        x = tape.add(x, sa)?;
        let h = nn::layernorm(tape, reg, &format!("{base}.ln2"), x)?;
        let ca = nn::mha(tape, reg, &format!("{base}.cross"), h, memory, qpos, mpos, m.head_heads)?;
        x = tape.add(x, ca)?;
        let h = nn::layernorm(tape, reg, &format!("{base}.ln3"), x)?;
        let f = nn::linear(tape, reg, &format!("{base}.ffn1"), h)?;
        let f = tape.relu(f)?;
        let f = nn::linear(tape, reg, &format!("{base}.ffn2"), f)?;
        x = tape.add(x, f)?;
    }
    let decoded = nn::layernorm(tape, reg, "head.dec.norm", x)?;

    let b = nn::linear(tape, reg, "head.box.l1", decoded)?;
    let b = tape.relu(b)?;
    let b = nn::linear(tape, reg, "head.box.l2", b)?;
    let b = tape.relu(b)?;
    let b = nn::linear(tape, reg, "head.box.l3", b)?;
    let boxes = tape.sigmoid(b)?;

    let token_logits = nn::linear(tape, reg, "head.token", decoded)?;

    let o_c = nn::linear(tape, reg, "head.contrast.obj", decoded)?;
    let obj_embed = tape.l2_normalize_rows(o_c, 1e-12)?;
    // Text embeddings come from the encoder memory's text rows.
    let txt_rows: Vec<usize> = (n_img..n_img + l_tok).collect();
    let mem_txt = tape.gather_rows(memory, &txt_rows)?;
    let t_c = nn::linear(tape, reg, "head.contrast.txt", mem_txt)?;
    let txt_embed = tape.l2_normalize_rows(t_c, 1e-12)?;

    Ok(PredictionVars { boxes, token_logits, obj_embed, txt_embed, n_img, l_tok })
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / sum).collect()
}

/// Per query, `1 − P(∅)` from the token distribution.
pub fn box_confidence(p: &Predictions) -> Vec<f64> {
    let cols = p.token_logits.cols();
    (0..p.token_logits.rows())
        .map(|q| 1.0 - softmax_row(p.token_logits.row(q))[cols - 1])
        .collect()
}

/// Per query, total token-distribution mass on the span's positions.
/// Ranking boxes by this score grounds the phrase the span names.
pub fn phrase_score(p: &Predictions, span: Span) -> Result<Vec<f64>> {
    let cols = p.token_logits.cols();
    if span.is_empty() {
        return Err(Error::Input("empty span".into()));
    }
    if span.end >= cols {
        return Err(Error::Input(format!(
            "span {}..{} outside the {} token positions",
            span.start,
            span.end,
            cols - 1
        )));
    }
    Ok((0..p.token_logits.rows())
        .map(|q| {
            let probs = softmax_row(p.token_logits.row(q));
            span.positions().map(|j| probs[j]).sum()
        })
        .collect())
}
