//! Shared neural building blocks: seeded initializers, affine layers,
//! multi-head attention, pre-norm transformer blocks, and sinusoidal
//! positional encodings.
//!
//! Parameters are addressed by dotted names in a [`ParamRegistry`]; every
//! initializer derives its RNG stream from `(seed, name)` so the result is
//! independent of registration order.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::ParamRegistry;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// FNV-1a over the name, mixed with the run seed.
fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

pub fn xavier_uniform(seed: u64, name: &str, d_in: usize, d_out: usize) -> Tensor {
    let mut rng = rng_for(seed, name);
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_in * d_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![d_in, d_out], data).expect("static shape")
}

pub fn seeded_normal(seed: u64, name: &str, shape: Vec<usize>, sigma: f64) -> Tensor {
    let mut rng = rng_for(seed, name);
    let n: usize = shape.iter().product();
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).expect("static shape")
}

// ── Affine layer ────────────────────────────────────────────────────

pub fn register_linear(
    reg: &mut ParamRegistry,
    seed: u64,
    name: &str,
    d_in: usize,
    d_out: usize,
    trainable: bool,
) -> Result<()> {
    let w = format!("{name}.w");
    reg.register(&w, xavier_uniform(seed, &w, d_in, d_out), trainable)?;
    reg.register(&format!("{name}.b"), Tensor::zeros(vec![d_out]), trainable)
}

/// `x · W + b` with the bias broadcast over rows.
pub fn linear(tape: &mut Tape, reg: &ParamRegistry, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(reg, &format!("{name}.w"))?;
    let b = tape.param(reg, &format!("{name}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

// ── Layer norm ──────────────────────────────────────────────────────

pub fn register_layernorm(
    reg: &mut ParamRegistry,
    name: &str,
    d: usize,
    trainable: bool,
) -> Result<()> {
    reg.register(&format!("{name}.g"), Tensor::filled(vec![d], 1.0), trainable)?;
    reg.register(&format!("{name}.b"), Tensor::zeros(vec![d]), trainable)
}

pub fn layernorm(tape: &mut Tape, reg: &ParamRegistry, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(reg, &format!("{name}.g"))?;
    let b = tape.param(reg, &format!("{name}.b"))?;
    tape.layernorm(x, g, b, LAYERNORM_EPS)
}

// ── Multi-head attention ────────────────────────────────────────────

pub fn register_mha(
    reg: &mut ParamRegistry,
    seed: u64,
    name: &str,
    d_model: usize,
    trainable: bool,
) -> Result<()> {
    for part in ["q", "k", "v", "o"] {
        register_linear(reg, seed, &format!("{name}.{part}"), d_model, d_model, trainable)?;
    }
    Ok(())
}

/// Scaled dot-product attention with `heads` column blocks.
///
/// Positional encodings, when given, are added to the query/key inputs
/// before projection; values see the raw input.
pub fn mha(
    tape: &mut Tape,
    reg: &ParamRegistry,
    name: &str,
    q_input: Var,
    kv_input: Var,
    q_pos: Option<Var>,
    k_pos: Option<Var>,
    heads: usize,
) -> Result<Var> {
    let d = *tape
        .shape(q_input)
        .last()
        .ok_or_else(|| Error::Dimension("attention over a scalar".into()))?;
    if d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q_src = match q_pos {
        Some(p) => tape.add(q_input, p)?,
        None => q_input,
    };
    let k_src = match k_pos {
        Some(p) => tape.add(kv_input, p)?,
        None => kv_input,
    };
    let q = linear(tape, reg, &format!("{name}.q"), q_src)?;
    let k = linear(tape, reg, &format!("{name}.k"), k_src)?;
    let v = linear(tape, reg, &format!("{name}.v"), kv_input)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled, 1)?;
        ctx.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&ctx)?;
    linear(tape, reg, &format!("{name}.o"), merged)
}

// ── Pre-norm transformer encoder block ──────────────────────────────

pub fn register_block(
    reg: &mut ParamRegistry,
    seed: u64,
    name: &str,
    d_model: usize,
    d_ffn: usize,
    trainable: bool,
) -> Result<()> {
    register_layernorm(reg, &format!("{name}.ln1"), d_model, trainable)?;
    register_mha(reg, seed, &format!("{name}.attn"), d_model, trainable)?;
    register_layernorm(reg, &format!("{name}.ln2"), d_model, trainable)?;
    register_linear(reg, seed, &format!("{name}.ffn1"), d_model, d_ffn, trainable)?;
    register_linear(reg, seed, &format!("{name}.ffn2"), d_ffn, d_model, trainable)
}

/// `x + attn(ln(x)); then + ffn(ln(.))`. Self-attention over rows; no
/// positional encoding unless the caller passes one.
pub fn block(
    tape: &mut Tape,
    reg: &ParamRegistry,
    name: &str,
    x: Var,
    heads: usize,
    pos: Option<Var>,
) -> Result<Var> {
    let h = layernorm(tape, reg, &format!("{name}.ln1"), x)?;
    let attn = mha(tape, reg, &format!("{name}.attn"), h, h, pos, pos, heads)?;
    let x = tape.add(x, attn)?;
    let h = layernorm(tape, reg, &format!("{name}.ln2"), x)?;
    let f = linear(tape, reg, &format!("{name}.ffn1"), h)?;
    let f = tape.relu(f)?;
    let f = linear(tape, reg, &format!("{name}.ffn2"), f)?;
    tape.add(x, f)
}

// ── Sinusoidal positions ────────────────────────────────────────────

/// Standard interleaved sin/cos table, one row per position.
pub fn sinusoidal_1d(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = (pos as f64 * freq).sin();
            data[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Tensor::new(vec![n, d], data).expect("static shape")
}

/// 2-D grid positions: first half of the width encodes the row index,
/// second half the column index. Requires `d % 4 == 0`.
pub fn sinusoidal_2d(rows: usize, cols: usize, d: usize) -> Result<Tensor> {
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "2-D positional encoding needs width divisible by 4, got {d}"
        )));
    }
    let half = d / 2;
    let row_table = sinusoidal_1d(rows, half);
    let col_table = sinusoidal_1d(cols, half);
    let mut data = vec![0.0; rows * cols * d];
    for r in 0..rows {
        for c in 0..cols {
            let base = (r * cols + c) * d;
            data[base..base + half].copy_from_slice(row_table.row(r));
            data[base + half..base + d].copy_from_slice(col_table.row(c));
        }
    }
    Tensor::new(vec![rows * cols, d], data)
}
