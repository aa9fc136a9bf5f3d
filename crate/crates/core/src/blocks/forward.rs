use crate::attention::{multi_head, multi_head_lsh, Mask};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

use super::reversible;
use super::weights::{Embeddings, EncoderLayer, FeedForward, LayerNorm};
use super::{ModelConfig, LAYER_NORM_EPS};

/// Word (projected to `H` when factored) + position + segment embeddings.
pub fn embed(g: &mut Graph<'_>, ids: &[usize], segments: &[usize], tables: &Embeddings<Var>) -> Result<Var> {
    if ids.len() != segments.len() {
        return Err(Error::Input(format!("{} token ids but {} segment ids", ids.len(), segments.len())));
    }
    if ids.is_empty() {
        return Err(Error::Input("cannot embed an empty sequence".into()));
    }
    let max_len = g.dims(tables.position).0;
    if ids.len() > max_len {
        return Err(Error::Input(format!("sequence of {} tokens exceeds max_len {max_len}", ids.len())));
    }
    let vocab = g.dims(tables.word).0;
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {vocab}")));
    }
    let n_seg = g.dims(tables.segment).0;
    if let Some(&bad) = segments.iter().find(|&&s| s >= n_seg) {
        return Err(Error::Input(format!("segment id {bad} out of range for {n_seg} segments")));
    }
    let mut word = g.gather_rows(tables.word, ids)?;
    if let Some(p) = tables.projection {
        word = g.matmul(word, p)?;
    }
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.gather_rows(tables.position, &positions)?;
    let seg = g.gather_rows(tables.segment, segments)?;
    let sum = g.add(word, pos)?;
    g.add(sum, seg)
}

pub fn feed_forward(g: &mut Graph<'_>, x: Var, ff: &FeedForward<Var>) -> Result<Var> {
    let h = g.matmul(x, ff.w1)?;
    let h = g.add_row(h, ff.b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, ff.w2)?;
    g.add_row(o, ff.b2)
}

pub fn norm(g: &mut Graph<'_>, x: Var, n: &LayerNorm<Var>) -> Result<Var> {
    g.layer_norm(x, n.gain, n.bias, LAYER_NORM_EPS)
}

/// The attention sublayer, dispatching to LSH attention when configured.
pub fn self_attention(
    g: &mut Graph<'_>,
    x: Var,
    layer: &EncoderLayer<Var>,
    cfg: &ModelConfig,
    mask: Option<&Mask>,
) -> Result<Var> {
    match &cfg.lsh {
        Some(lsh) => multi_head_lsh(g, x, &layer.attention, lsh, &cfg.attention()),
        None => multi_head(g, x, &layer.attention, &cfg.attention(), mask),
    }
}

/// One post-norm transformer unit: `norm(x + attn(x))`, then
/// `norm(h + ff(h))`. A bottleneck projects the input down before the unit
/// and back up after it, so the unit itself runs at the narrow width.
pub fn encoder_layer(
    g: &mut Graph<'_>,
    x: Var,
    layer: &EncoderLayer<Var>,
    cfg: &ModelConfig,
    mask: Option<&Mask>,
) -> Result<Var> {
    let inner = match &layer.bottleneck {
        Some(b) => g.matmul(x, b.down)?,
        None => x,
    };
    let a = self_attention(g, inner, layer, cfg, mask)?;
    let r = g.add(inner, a)?;
    let h = norm(g, r, &layer.norm1)?;
    let f = feed_forward(g, h, &layer.ff)?;
    let r2 = g.add(h, f)?;
    let out = norm(g, r2, &layer.norm2)?;
    match &layer.bottleneck {
        Some(b) => g.matmul(out, b.up),
        None => Ok(out),
    }
}

/// Weights applied at depth `i`.
pub fn layer_at<'l, T>(layers: &'l [EncoderLayer<T>], cfg: &ModelConfig, i: usize) -> &'l EncoderLayer<T> {
    if cfg.share_layers {
        &layers[0]
    } else {
        &layers[i]
    }
}

/// Runs all `num_layers` layers on the tape. Reversible configurations are
/// wired as two-stream layers here too; the memory-saving training path
/// lives in [`reversible::ReversibleStack`].
pub fn encoder_forward(
    g: &mut Graph<'_>,
    x: Var,
    layers: &[EncoderLayer<Var>],
    cfg: &ModelConfig,
    mask: Option<&Mask>,
) -> Result<Var> {
    if cfg.num_layers > 0 && layers.len() != cfg.stored_layers() {
        return Err(Error::Shape(format!("{} stored layers for config expecting {}", layers.len(), cfg.stored_layers())));
    }
    if cfg.reversible {
        let (mut x1, mut x2) = reversible::split_halves(g, x)?;
        for i in 0..cfg.num_layers {
            let (y1, y2) = reversible::reversible_forward(g, x1, x2, layer_at(layers, cfg, i), cfg, mask)?;
            x1 = y1;
            x2 = y2;
        }
        return reversible::merge_halves(g, x1, x2);
    }
    let mut h = x;
    for i in 0..cfg.num_layers {
        h = encoder_layer(g, h, layer_at(layers, cfg, i), cfg, mask)?;
    }
    Ok(h)
}
