//! BEV-region / text fusion: a Max-Sigmoid gate primes the BEV features with
//! text awareness, then N blocks of windowed BEV self-attention, text
//! self-attention, cross-attention both ways and per-stream FFNs update both
//! streams. Residual connections wrap every sublayer; no positional
//! encodings, so the text stream is set-equivariant.

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{AttnVars, FfnVars, FusionBlockVars};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    /// Number of fusion blocks (N).
    pub blocks: usize,
    /// BEV self-attention tile side; edge tiles shrink when it does not
    /// divide the grid.
    pub window: usize,
    /// FFN hidden width.
    pub ffn_hidden: usize,
    /// Standardize sublayer inputs (LayerNorm-style, no affine) before each
    /// sublayer; residuals always bypass it.
    pub pre_norm: bool,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(Error::Config("fusion needs at least one block".into()));
        }
        if self.window < 1 {
            return Err(Error::Config("fusion window must be >= 1".into()));
        }
        if self.ffn_hidden < 1 {
            return Err(Error::Config("fusion ffn width must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct FusedVars {
    pub bev: Var,
    pub text: Var,
}

/// Scale each BEV row by the sigmoid of its maximum dot product with any
/// text row: `out_i = bf_i * sigmoid(max_t(bf_i . text_t))`.
pub fn max_sigmoid_gate(g: &mut Graph, bev_flat: Var, texts: Var) -> Result<Var> {
    if g.value(bev_flat).cols() != g.value(texts).cols() {
        return Err(Error::ShapeMismatch {
            op: "max_sigmoid_gate",
            details: format!(
                "bev dim {} vs text dim {}",
                g.value(bev_flat).cols(),
                g.value(texts).cols()
            ),
        });
    }
    let tt = g.transpose(texts)?;
    let dots = g.matmul(bev_flat, tt)?;
    let row_max = g.reduce_max_rows(dots)?;
    let gate = g.sigmoid(row_max)?;
    g.row_scale(bev_flat, gate)
}

/// Single-head scaled dot-product attention core (no residual):
/// `softmax(Q Kᵀ / sqrt(d)) V Wo`.
fn attention_core(g: &mut Graph, queries: Var, keys_values: Var, w: &AttnVars) -> Result<Var> {
    let d = g.value(queries).cols();
    let q = g.matmul(queries, w.wq)?;
    let k = g.matmul(keys_values, w.wk)?;
    let v = g.matmul(keys_values, w.wv)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax_rows(scaled)?;
    let ctx = g.matmul(attn, v)?;
    g.matmul(ctx, w.wo)
}

/// Residual sublayer: `x + rs * f(maybe_norm(x))`.
fn sublayer(
    g: &mut Graph,
    x: Var,
    rs: Var,
    pre_norm: bool,
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let inp = if pre_norm { g.layernorm_rows(x, 1e-5)? } else { x };
    let out = f(g, inp)?;
    let scaled = g.mul_scalar_var(out, rs)?;
    g.add(x, scaled)
}

/// Row indices of each window tile over an `h×w` BEV grid (flat index
/// `x_bin * w + y_bin`); edge tiles are smaller when `win` does not divide.
fn window_tiles(h: usize, w: usize, win: usize) -> Vec<Vec<usize>> {
    let mut tiles = Vec::new();
    let mut tx = 0;
    while tx < h {
        let x_end = (tx + win).min(h);
        let mut ty = 0;
        while ty < w {
            let y_end = (ty + win).min(w);
            let mut rows = Vec::with_capacity((x_end - tx) * (y_end - ty));
            for x in tx..x_end {
                for y in ty..y_end {
                    rows.push(x * w + y);
                }
            }
            tiles.push(rows);
            ty = y_end;
        }
        tx = x_end;
    }
    tiles
}

/// Windowed BEV self-attention: dense attention inside non-overlapping
/// window×window tiles, residual add.
pub fn windowed_bev_self_attention(
    g: &mut Graph,
    bev: Var,
    w: &AttnVars,
    window: usize,
    rs: Var,
    pre_norm: bool,
    hw: (usize, usize),
) -> Result<Var> {
    let (h, ww) = hw;
    let n = g.value(bev).rows();
    if n != h * ww {
        return Err(Error::ShapeMismatch {
            op: "windowed_bev_self_attention",
            details: format!("{} rows vs {}×{} grid", n, h, ww),
        });
    }
    sublayer(g, bev, rs, pre_norm, |g, inp| {
        let tiles = window_tiles(h, ww, window);
        let mut parts = Vec::with_capacity(tiles.len());
        for rows in &tiles {
            let tile = g.gather_rows(inp, rows)?;
            parts.push(attention_core(g, tile, tile, w)?);
        }
        g.assemble_rows(&parts, &tiles, n)
    })
}

/// Full self-attention over text rows, residual add; no positional encoding.
pub fn text_self_attention(
    g: &mut Graph,
    text: Var,
    w: &AttnVars,
    rs: Var,
    pre_norm: bool,
) -> Result<Var> {
    sublayer(g, text, rs, pre_norm, |g, inp| attention_core(g, inp, inp, w))
}

/// Queries attend over `keys_values` (the other stream), residual on the
/// query side.
pub fn cross_attention(
    g: &mut Graph,
    queries: Var,
    keys_values: Var,
    w: &AttnVars,
    rs: Var,
    pre_norm: bool,
) -> Result<Var> {
    if g.value(keys_values).rows() == 0 {
        return Err(Error::EmptyContext);
    }
    sublayer(g, queries, rs, pre_norm, |g, inp| attention_core(g, inp, keys_values, w))
}

/// Two-layer FFN with ReLU, residual add.
pub fn ffn(g: &mut Graph, x: Var, w: &FfnVars, rs: Var, pre_norm: bool) -> Result<Var> {
    sublayer(g, x, rs, pre_norm, |g, inp| {
        let h = g.matmul(inp, w.w1)?;
        let h = g.add_row_bias(h, w.b1)?;
        let h = g.relu(h)?;
        let out = g.matmul(h, w.w2)?;
        g.add_row_bias(out, w.b2)
    })
}

/// The fusion stack: gate the BEV stream first (callers usually pass an
/// already gated input; the gate itself lives in [`max_sigmoid_gate`]), then
/// N blocks of [bev self-attn, text self-attn, text->bev cross, bev->text
/// cross, FFN per stream].
pub fn fuse(
    g: &mut Graph,
    bev_flat: Var,
    texts: Var,
    blocks: &[FusionBlockVars],
    cfg: &FusionConfig,
    hw: (usize, usize),
) -> Result<FusedVars> {
    cfg.validate()?;
    if blocks.len() != cfg.blocks {
        return Err(Error::Config(format!(
            "{} fusion blocks configured but {} weight sets supplied",
            cfg.blocks,
            blocks.len()
        )));
    }
    let mut bev = bev_flat;
    let mut text = texts;
    for blk in blocks {
        bev = windowed_bev_self_attention(
            g,
            bev,
            &blk.bev_self,
            cfg.window,
            blk.res.bev_self,
            cfg.pre_norm,
            hw,
        )?;
        text = text_self_attention(g, text, &blk.text_self, blk.res.text_self, cfg.pre_norm)?;
        bev = cross_attention(g, bev, text, &blk.text_to_bev, blk.res.text_to_bev, cfg.pre_norm)?;
        text = cross_attention(g, text, bev, &blk.bev_to_text, blk.res.bev_to_text, cfg.pre_norm)?;
        bev = ffn(g, bev, &blk.ffn_bev, blk.res.ffn_bev, cfg.pre_norm)?;
        text = ffn(g, text, &blk.ffn_text, blk.res.ffn_text, cfg.pre_norm)?;
    }
    Ok(FusedVars { bev, text })
}
