use rand::RngCore;

use super::config::{
    ffn_hidden, slide_windows, AttentionConfig, ModelConfig, Seq2OneConfig, Seq2SeqConfig,
    WindowSpec,
};
use super::params::{ModelParams, ParamVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

const LN_EPS: f64 = 1e-5;

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Fixed sinusoidal position code, `[len, d]` row-major.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Handles produced by one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOut {
    /// `[n, rows, d]`
    pub out: Var,
    /// Attention weights before dropout, `[n * heads, rows, W]`.
    pub attention: Var,
}

/// Settings shared by every encoder layer of a model.
#[derive(Debug, Clone, Copy)]
pub struct EncoderSpec<'a> {
    pub attention: &'a AttentionConfig,
    pub ffn: bool,
    pub positional: bool,
}

fn split_heads<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    n: usize,
    rows: usize,
    heads: usize,
    hd: usize,
) -> Result<Var> {
    let x = tape.reshape(x, &[n, rows, heads, hd])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[n * heads, rows, hd])
}

fn linear_named<T: Real>(tape: &mut Tape<T>, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    tape.linear(x, w, b)
}

fn norm_named<T: Real>(tape: &mut Tape<T>, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gain"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, T::lit(LN_EPS))
}

/// Pre-norm encoder layer on a batch of windows `x: [n, W, d]`.
///
/// The positional code enters the attention sublayer's input only, so the
/// residual stream carries `x` unchanged. With `query_row` set, only that
/// in-window position is computed and the output is `[n, 1, d]`.
pub fn encoder_layer<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    prefix: &str,
    spec: EncoderSpec<'_>,
    x: Var,
    query_row: Option<usize>,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<EncoderOut> {
    let att = spec.attention;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != att.model_dim || query_row.is_some_and(|r| r >= shape[1]) {
        return Err(Error::Shape {
            op: "encoder_layer",
            lhs: shape,
            rhs: vec![att.model_dim],
        });
    }
    let (n, w, d) = (shape[0], shape[1], shape[2]);
    let (heads, hd) = (att.n_heads, att.head_dim);

    let attn_in = if spec.positional {
        let pe = sinusoidal_encoding(w, d).into_iter().map(T::lit).collect();
        let pe = tape.constant(vec![w, d], pe)?;
        tape.add(x, pe)?
    } else {
        x
    };
    let h = norm_named(tape, p, &format!("{prefix}.ln1"), attn_in)?;
    let (hq, resid, rows) = match query_row {
        Some(r) => (tape.narrow(h, 1, r, 1)?, tape.narrow(x, 1, r, 1)?, 1),
        None => (h, x, w),
    };
    let q = linear_named(tape, p, &format!("{prefix}.attn.q"), hq)?;
    let k = linear_named(tape, p, &format!("{prefix}.attn.k"), h)?;
    let v = linear_named(tape, p, &format!("{prefix}.attn.v"), h)?;
    let q = split_heads(tape, q, n, rows, heads, hd)?;
    let k = split_heads(tape, k, n, w, heads, hd)?;
    let v = split_heads(tape, v, n, w, heads, hd)?;

    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, T::lit(1.0 / (hd as f64).sqrt()));
    let attention = tape.softmax(scores, 2)?;
    let a = tape.dropout(attention, att.dropout, reborrow(&mut rng))?;
    let ctx = tape.matmul(a, v)?;
    let ctx = tape.reshape(ctx, &[n, heads, rows, hd])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, rows, heads * hd])?;
    let o = linear_named(tape, p, &format!("{prefix}.attn.o"), ctx)?;
    let mut out = tape.add(resid, o)?;

    if spec.ffn {
        let h2 = norm_named(tape, p, &format!("{prefix}.ln2"), out)?;
        let f = linear_named(tape, p, &format!("{prefix}.ffn.fc1"), h2)?;
        let f = tape.relu(f);
        let f = linear_named(tape, p, &format!("{prefix}.ffn.fc2"), f)?;
        let f = tape.dropout(f, att.dropout, reborrow(&mut rng))?;
        out = tape.add(out, f)?;
    }
    Ok(EncoderOut { out, attention })
}

fn check_roi<T: Real>(
    tape: &Tape<T>,
    roi: Var,
    n_roi: usize,
    min_len: usize,
    op: &'static str,
) -> Result<usize> {
    let s = tape.shape(roi);
    if s.len() != 2 || s[1] != n_roi {
        return Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![n_roi],
        });
    }
    if s[0] < min_len {
        return Err(Error::invalid(format!(
            "{op}: input has {} time points, needs at least {min_len}",
            s[0]
        )));
    }
    Ok(s[0])
}

/// `roi: [T, R]` to `[T - W + 1, n_outputs]`; row `k` predicts time `k + W/2`.
pub fn seq2one_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    cfg: &Seq2OneConfig,
    roi: Var,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let len = check_roi(tape, roi, cfg.n_roi, cfg.window, "seq2one_forward")?;
    let spec = EncoderSpec {
        attention: &cfg.attention,
        ffn: ffn_hidden(cfg.ffn_expansion, cfg.attention.model_dim)? > 0,
        positional: cfg.positional_encoding,
    };
    // Embedding is per time point, so embed once and gather windows after.
    let e = linear_named(tape, p, "embed", roi)?;
    let starts = slide_windows(len, &WindowSpec::new(cfg.window, 1)?)?;
    let mut x = tape.windows(e, &starts, cfg.window)?;
    for l in 0..cfg.n_layers {
        let last = l + 1 == cfg.n_layers;
        let row = last.then_some(cfg.window / 2);
        x = encoder_layer(
            tape,
            p,
            &format!("layer{l}"),
            spec,
            x,
            row,
            reborrow(&mut rng),
        )?
        .out;
    }
    let y = tape.reshape(x, &[starts.len(), cfg.attention.model_dim])?;
    linear_named(tape, p, "head", y)
}

/// One fused-window block: quarter-step windows, shared encoder layer,
/// overlap averaging back to `[T, d]`.
pub fn seq2seq_block<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    prefix: &str,
    spec: EncoderSpec<'_>,
    window: usize,
    x: Var,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let len = tape.shape(x)[0];
    let starts = slide_windows(len, &WindowSpec::quarter(window)?)?;
    let xw = tape.windows(x, &starts, window)?;
    let y = encoder_layer(tape, p, prefix, spec, xw, None, rng)?.out;
    tape.overlap_mean(y, &starts, len)
}

/// `roi: [T, R]` to `[T, n_outputs]`.
pub fn seq2seq_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &ParamVars,
    cfg: &Seq2SeqConfig,
    roi: Var,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let min_len = cfg.block_windows.iter().copied().max().unwrap_or(1);
    check_roi(tape, roi, cfg.n_roi, min_len, "seq2seq_forward")?;
    let spec = EncoderSpec {
        attention: &cfg.attention,
        ffn: ffn_hidden(cfg.ffn_expansion, cfg.feature_dim)? > 0,
        positional: cfg.positional_encoding,
    };
    let mut x = linear_named(tape, p, "embed", roi)?;
    for (b, &w) in cfg.block_windows.iter().enumerate() {
        x = seq2seq_block(
            tape,
            p,
            &format!("block{b}"),
            spec,
            w,
            x,
            reborrow(&mut rng),
        )?;
    }
    linear_named(tape, p, "head", x)
}

pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &ParamVars,
    roi: Var,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    match cfg {
        ModelConfig::Seq2one(c) => seq2one_forward(tape, p, c, roi, rng),
        ModelConfig::Seq2seq(c) => seq2seq_forward(tape, p, c, roi, rng),
    }
}

/// Inference pass (dropout off) on a row-major `[len, n_roi]` matrix.
/// Returns `[out_len, n_outputs]` row-major.
pub fn predict<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    roi: &[T],
    len: usize,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.constant(vec![len, cfg.n_roi()], roi.to_vec())?;
    let y = forward(&mut tape, cfg, &p, x, None)?;
    let out = tape.value(y);
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("model output element {i}")));
    }
    Ok(out.to_vec())
}
