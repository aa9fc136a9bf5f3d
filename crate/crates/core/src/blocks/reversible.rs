//! Two-stream reversible residual layers.
//!
//! The `H`-wide stream is split into even and odd feature columns. A layer
//! maps `(x1, x2)` to `y1 = x1 + attn(x2)`, `y2 = x2 + ff(y1)`, and the
//! inputs can be recovered exactly from the outputs by running the two
//! updates backwards. [`ReversibleStack`] uses that to train an `N`-layer
//! stack while holding only the current pair of activations: the backward
//! pass rebuilds each layer's inputs on demand instead of reading them from
//! storage.

use crate::attention::Mask;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

use super::forward::{feed_forward, layer_at, norm, self_attention};
use super::weights::{EncoderLayer, Params};
use super::ModelConfig;

pub fn split_halves(g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
    let h = g.dims(x).1;
    if !h.is_multiple_of(2) {
        return Err(Error::Shape(format!("cannot split odd width {h} into two streams")));
    }
    let even: Vec<usize> = (0..h).step_by(2).collect();
    let odd: Vec<usize> = (1..h).step_by(2).collect();
    Ok((g.gather_cols(x, &even)?, g.gather_cols(x, &odd)?))
}

/// Inverse of [`split_halves`]: interleaves the two streams again.
pub fn merge_halves(g: &mut Graph<'_>, y1: Var, y2: Var) -> Result<Var> {
    let half = g.dims(y1).1;
    let cat = g.concat_cols(&[y1, y2])?;
    let order: Vec<usize> = (0..2 * half).map(|j| if j % 2 == 0 { j / 2 } else { half + j / 2 }).collect();
    g.gather_cols(cat, &order)
}

/// `attn(norm1(x))`
pub fn attn_branch(g: &mut Graph<'_>, x: Var, layer: &EncoderLayer<Var>, cfg: &ModelConfig, mask: Option<&Mask>) -> Result<Var> {
    let n = norm(g, x, &layer.norm1)?;
    self_attention(g, n, layer, cfg, mask)
}

/// `ff(norm2(x))`
pub fn ff_branch(g: &mut Graph<'_>, x: Var, layer: &EncoderLayer<Var>) -> Result<Var> {
    let n = norm(g, x, &layer.norm2)?;
    feed_forward(g, n, &layer.ff)
}

pub fn reversible_forward(
    g: &mut Graph<'_>,
    x1: Var,
    x2: Var,
    layer: &EncoderLayer<Var>,
    cfg: &ModelConfig,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let a = attn_branch(g, x2, layer, cfg, mask)?;
    let y1 = g.add(x1, a)?;
    let f = ff_branch(g, y1, layer)?;
    let y2 = g.add(x2, f)?;
    Ok((y1, y2))
}

/// Forward step on plain tensors.
pub fn forward_values(
    x1: &Tensor,
    x2: &Tensor,
    layer: &EncoderLayer<Tensor>,
    cfg: &ModelConfig,
    mask: Option<&Mask>,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let w = layer.map(&mut |t| g.leaf(t));
    let (a, b) = (g.constant(x1.clone()), g.constant(x2.clone()));
    let (y1, y2) = reversible_forward(&mut g, a, b, &w, cfg, mask)?;
    Ok((g.tensor(y1), g.tensor(y2)))
}

/// Recovers the layer inputs from its outputs:
/// `x2 = y2 - ff(y1)`, then `x1 = y1 - attn(x2)`.
pub fn inverse_values(
    y1: &Tensor,
    y2: &Tensor,
    layer: &EncoderLayer<Tensor>,
    cfg: &ModelConfig,
    mask: Option<&Mask>,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let w = layer.map(&mut |t| g.leaf(t));
    let (a, b) = (g.constant(y1.clone()), g.constant(y2.clone()));
    let f = ff_branch(&mut g, a, &w)?;
    let x2 = g.sub(b, f)?;
    let att = attn_branch(&mut g, x2, &w, cfg, mask)?;
    let x1 = g.sub(a, att)?;
    Ok((g.tensor(x1), g.tensor(x2)))
}

/// Counts activation tensors held by a stack between layer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActivationTracker {
    live: usize,
    peak: usize,
}

impl ActivationTracker {
    fn hold(&mut self, n: usize) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    fn release(&mut self, n: usize) {
        self.live -= n;
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn live(&self) -> usize {
        self.live
    }
}

/// Gradients produced by [`ReversibleStack::backward`].
#[derive(Clone, Debug)]
pub struct StackGrads {
    pub dx1: Tensor,
    pub dx2: Tensor,
    /// One entry per stored layer, flat in [`Params`] order.
    pub layers: Vec<Vec<Vec<f64>>>,
}

/// Memory-lean training path over a reversible stack.
pub struct ReversibleStack<'m> {
    pub layers: &'m [EncoderLayer<Tensor>],
    pub cfg: &'m ModelConfig,
    pub tracker: ActivationTracker,
}

impl<'m> ReversibleStack<'m> {
    pub fn new(layers: &'m [EncoderLayer<Tensor>], cfg: &'m ModelConfig) -> Self {
        ReversibleStack { layers, cfg, tracker: ActivationTracker::default() }
    }

    /// Runs every layer, keeping only the running pair.
    pub fn forward(&mut self, x1: Tensor, x2: Tensor, mask: Option<&Mask>) -> Result<(Tensor, Tensor)> {
        self.tracker.hold(2);
        let (mut a, mut b) = (x1, x2);
        for i in 0..self.cfg.num_layers {
            let (y1, y2) = forward_values(&a, &b, layer_at(self.layers, self.cfg, i), self.cfg, mask)?;
            self.tracker.hold(2);
            self.tracker.release(2);
            a = y1;
            b = y2;
        }
        self.tracker.release(2);
        Ok((a, b))
    }

    /// Back-propagates `(dy1, dy2)` from the stack outputs `(y1, y2)`,
    /// reconstructing each layer's inputs as it goes.
    pub fn backward(&mut self, y1: Tensor, y2: Tensor, dy1: Tensor, dy2: Tensor, mask: Option<&Mask>) -> Result<StackGrads> {
        let cfg = self.cfg;
        let mut layer_grads: Vec<Vec<Vec<f64>>> =
            self.layers.iter().map(|l| l.slots().iter().map(|t| vec![0.0; t.len()]).collect()).collect();
        self.tracker.hold(4);
        let (mut y1, mut y2, mut dy1, mut dy2) = (y1, y2, dy1, dy2);
        for i in (0..cfg.num_layers).rev() {
            let stored = if cfg.share_layers { 0 } else { i };
            let layer = &self.layers[stored];
            let (x1, x2) = inverse_values(&y1, &y2, layer, cfg, mask)?;
            self.tracker.hold(2);

            let mut g = Graph::new();
            let w = layer.map(&mut |t| g.leaf(t));
            let (a, b) = (g.input(x1.clone()), g.input(x2.clone()));
            let (o1, o2) = reversible_forward(&mut g, a, b, &w, cfg, mask)?;
            g.backward_seeded(&[(o1, dy1.values().to_vec()), (o2, dy2.values().to_vec())])?;
            for (acc, v) in layer_grads[stored].iter_mut().zip(w.slots()) {
                if let Some(gr) = g.grad(*v) {
                    acc.iter_mut().zip(gr).for_each(|(s, d)| *s += d);
                }
            }
            let (dx1, dx2) = (g.grad_tensor(a), g.grad_tensor(b));
            self.tracker.hold(2);
            self.tracker.release(4);
            y1 = x1;
            y2 = x2;
            dy1 = dx1;
            dy2 = dx2;
        }
        self.tracker.release(4);
        Ok(StackGrads { dx1: dy1, dx2: dy2, layers: layer_grads })
    }
}
