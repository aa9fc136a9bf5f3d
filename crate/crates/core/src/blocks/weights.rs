//! Parameter containers, generic over the slot type.
//!
//! The same structs hold [`ParamSpec`] layouts, materialised [`Tensor`]s,
//! graph [`Var`](crate::numerics::Var) bindings and flat gradient buffers.
//! Every container visits its slots in one fixed order, which the
//! optimizer, the persistence layer and the parameter counter rely on.

use crate::attention::{AttentionHead, MultiHead};
use crate::numerics::{Rng, Tensor};

use super::ModelConfig;

/// How a slot is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Glorot,
    Ones,
    Zeros,
}

/// Shape-only description of one trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn matrix(rows: usize, cols: usize) -> Self {
        ParamSpec { shape: vec![rows, cols], init: Init::Glorot }
    }

    pub fn ones(n: usize) -> Self {
        ParamSpec { shape: vec![n], init: Init::Ones }
    }

    pub fn zeros(n: usize) -> Self {
        ParamSpec { shape: vec![n], init: Init::Zeros }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize(&self, rng: &mut Rng) -> Tensor {
        match self.init {
            Init::Glorot => rng.glorot(self.shape[0], self.shape[1]),
            Init::Ones => Tensor::filled(&self.shape, 1.0),
            Init::Zeros => Tensor::zeros(&self.shape),
        }
    }
}

/// Uniform traversal over the slots of a parameter container.
pub trait Params<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s T));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T));

    fn slots(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t));
        out
    }

    fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck<T> {
    pub down: T,
    pub up: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub attention: MultiHead<T>,
    pub norm1: LayerNorm<T>,
    pub ff: FeedForward<T>,
    pub norm2: LayerNorm<T>,
    pub bottleneck: Option<Bottleneck<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings<T> {
    pub word: T,
    /// Present iff the embedding is factored (`E ≠ H`).
    pub projection: Option<T>,
    pub position: T,
    pub segment: T,
}

/// Embedding tables plus the stored layer weights. With layer sharing a
/// single entry in `layers` serves every depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub embeddings: Embeddings<T>,
    pub layers: Vec<EncoderLayer<T>>,
}

impl<T> LayerNorm<T> {
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> LayerNorm<U> {
        LayerNorm { gain: f(&self.gain), bias: f(&self.bias) }
    }
}

impl<T> Params<T> for LayerNorm<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s T)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

impl<T> FeedForward<T> {
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> FeedForward<U> {
        FeedForward { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }
}

impl<T> Params<T> for FeedForward<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s T)) {
        f(join(prefix, "w1"), &self.w1);
        f(join(prefix, "b1"), &self.b1);
        f(join(prefix, "w2"), &self.w2);
        f(join(prefix, "b2"), &self.b2);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

impl<T> Bottleneck<T> {
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Bottleneck<U> {
        Bottleneck { down: f(&self.down), up: f(&self.up) }
    }
}

impl<T> Params<T> for Bottleneck<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s T)) {
        f(join(prefix, "down"), &self.down);
        f(join(prefix, "up"), &self.up);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.down);
        f(&mut self.up);
    }
}

pub fn map_multi_head<'s, T, U>(m: &'s MultiHead<T>, f: &mut impl FnMut(&'s T) -> U) -> MultiHead<U> {
    MultiHead {
        heads: m
            .heads
            .iter()
            .map(|h| AttentionHead { query: f(&h.query), key: h.key.as_ref().map(&mut *f), value: f(&h.value) })
            .collect(),
        output: f(&m.output),
    }
}

impl<T> Params<T> for MultiHead<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s T)) {
        for (i, h) in self.heads.iter().enumerate() {
            let p = join(prefix, &format!("heads.{i}"));
            f(join(&p, "query"), &h.query);
            if let Some(k) = &h.key {
                f(join(&p, "key"), k);
            }
            f(join(&p, "value"), &h.value);
        }
        f(join(prefix, "output"), &self.output);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for h in &mut self.heads {
            f(&mut h.query);
            if let Some(k) = &mut h.key {
                f(k);
            }
            f(&mut h.value);
        }
        f(&mut self.output);
    }
}

impl<T> EncoderLayer<T> {
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> EncoderLayer<U> {
        EncoderLayer {
            attention: map_multi_head(&self.attention, f),
            norm1: self.norm1.map(f),
            ff: self.ff.map(f),
            norm2: self.norm2.map(f),
            bottleneck: self.bottleneck.as_ref().map(|b| b.map(f)),
        }
    }
}

impl<T> Params<T> for EncoderLayer<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s T)) {
        self.attention.visit(&join(prefix, "attention"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ff.visit(&join(prefix, "ff"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        if let Some(b) = &self.bottleneck {
            b.visit(&join(prefix, "bottleneck"), f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.attention.visit_mut(f);
        self.norm1.visit_mut(f);
        self.ff.visit_mut(f);
        self.norm2.visit_mut(f);
        if let Some(b) = &mut self.bottleneck {
            b.visit_mut(f);
        }
    }
}

impl<T> Embeddings<T> {
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Embeddings<U> {
        Embeddings {
            word: f(&self.word),
            projection: self.projection.as_ref().map(&mut *f),
            position: f(&self.position),
            segment: f(&self.segment),
        }
    }
}

impl<T> Params<T> for Embeddings<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s T)) {
        f(join(prefix, "word"), &self.word);
        if let Some(p) = &self.projection {
            f(join(prefix, "projection"), p);
        }
        f(join(prefix, "position"), &self.position);
        f(join(prefix, "segment"), &self.segment);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.word);
        if let Some(p) = &mut self.projection {
            f(p);
        }
        f(&mut self.position);
        f(&mut self.segment);
    }
}

impl<T> Encoder<T> {
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Encoder<U> {
        Encoder { embeddings: self.embeddings.map(f), layers: self.layers.iter().map(|l| l.map(f)).collect() }
    }
}

impl<T> Params<T> for Encoder<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s T)) {
        self.embeddings.visit(&join(prefix, "embeddings"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.embeddings.visit_mut(f);
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

impl Encoder<ParamSpec> {
    /// Every trainable tensor the configuration allocates, by shape.
    pub fn layout(cfg: &ModelConfig) -> Self {
        let (v, e, h, l) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim, cfg.max_len);
        let embeddings = Embeddings {
            word: ParamSpec::matrix(v, e),
            projection: cfg.factored().then(|| ParamSpec::matrix(e, h)),
            position: ParamSpec::matrix(l, h),
            segment: ParamSpec::matrix(cfg.num_segments, h),
        };
        let layers = (0..cfg.stored_layers()).map(|_| layer_layout(cfg)).collect();
        Encoder { embeddings, layers }
    }

    pub fn numel(&self) -> usize {
        self.slots().iter().map(|s| s.numel()).sum()
    }

    pub fn materialize(&self, rng: &mut Rng) -> Encoder<Tensor> {
        self.map(&mut |s: &ParamSpec| s.materialize(rng))
    }
}

fn layer_layout(cfg: &ModelConfig) -> EncoderLayer<ParamSpec> {
    let u = cfg.unit_width();
    let dk = u / cfg.num_heads.max(1);
    let f = cfg.ff_dim;
    let shared = cfg.shared_qk();
    EncoderLayer {
        attention: MultiHead {
            heads: (0..cfg.num_heads)
                .map(|_| AttentionHead {
                    query: ParamSpec::matrix(u, dk),
                    key: (!shared).then(|| ParamSpec::matrix(u, dk)),
                    value: ParamSpec::matrix(u, dk),
                })
                .collect(),
            output: ParamSpec::matrix(u, u),
        },
        norm1: LayerNorm { gain: ParamSpec::ones(u), bias: ParamSpec::zeros(u) },
        ff: FeedForward {
            w1: ParamSpec::matrix(u, f),
            b1: ParamSpec::zeros(f),
            w2: ParamSpec::matrix(f, u),
            b2: ParamSpec::zeros(u),
        },
        norm2: LayerNorm { gain: ParamSpec::ones(u), bias: ParamSpec::zeros(u) },
        bottleneck: (cfg.bottleneck_dim > 0).then(|| Bottleneck {
            down: ParamSpec::matrix(cfg.hidden_dim, cfg.bottleneck_dim),
            up: ParamSpec::matrix(cfg.bottleneck_dim, cfg.hidden_dim),
        }),
    }
}

impl Encoder<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> crate::Result<Self> {
        cfg.validate()?;
        Ok(Encoder::layout(cfg).materialize(rng))
    }
}
