use super::ModelConfig;

/// Exact number of trainable scalars in an encoder built from `cfg`
/// (embeddings and encoder layers; scoring head excluded).
pub fn count_parameters(cfg: &ModelConfig) -> u64 {
    let c = |x: usize| x as u64;
    let (v, e, h, l, s) = (c(cfg.vocab_size), c(cfg.embed_dim), c(cfg.hidden_dim), c(cfg.max_len), c(cfg.num_segments));
    let projection = if cfg.factored() { e * h } else { 0 };
    let embeddings = v * e + projection + l * h + s * h;

    let u = c(cfg.unit_width());
    let f = c(cfg.ff_dim);
    // Per-head projections together span the unit width: heads * d_k == u.
    let qkv = if cfg.shared_qk() { 2 } else { 3 };
    let attention = qkv * u * u + u * u;
    let ff = u * f + f + f * u + u;
    let norms = 4 * u;
    let bottleneck = if cfg.bottleneck_dim > 0 { 2 * h * c(cfg.bottleneck_dim) } else { 0 };
    let layer = attention + ff + norms + bottleneck;

    embeddings + c(cfg.stored_layers()) * layer
}
