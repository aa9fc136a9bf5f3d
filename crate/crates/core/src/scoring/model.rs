use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::container::Container;
use crate::blocks::reversible::{merge_halves, split_halves, ReversibleStack};
use crate::blocks::{embed, encoder_forward, Embeddings, Encoder, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{Graph, Rng, Tensor, Var};

use super::{Prediction, ScoreScale};

/// Linear unit over the pooled feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringHead<T> {
    /// `H x 1`
    pub weight: T,
    /// `[1]`
    pub bias: T,
}

impl<T> ScoringHead<T> {
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> ScoringHead<U> {
        ScoringHead { weight: f(&self.weight), bias: f(&self.bias) }
    }
}

impl<T> Params<T> for ScoringHead<T> {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s T)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Serialize, Deserialize)]
struct SavedHeader {
    model: ModelConfig,
    scale: ScoreScale,
}

/// Encoder plus scoring head for one score scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Scorer {
    pub config: ModelConfig,
    pub scale: ScoreScale,
    pub encoder: Encoder<Tensor>,
    pub head: ScoringHead<Tensor>,
}

impl Params<Tensor> for Scorer {
    fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(String, &'s Tensor)) {
        let p = |name: &str| if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
        self.encoder.visit(&p("encoder"), f);
        self.head.visit(&p("head"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Parameters mapped onto a graph, in the same order as the scorer's slots.
struct Bound {
    encoder: Encoder<Var>,
    head: ScoringHead<Var>,
}

fn head_on_graph(g: &mut Graph<'_>, encoded: Var, head: &ScoringHead<Var>) -> Result<Var> {
    let first = g.gather_rows(encoded, &[0])?;
    let z = g.matmul(first, head.weight)?;
    let z = g.add_row(z, head.bias)?;
    Ok(g.sigmoid(z))
}

fn grads_of(g: &Graph<'_>, vars: &[&Var], slots: &[&Tensor]) -> Vec<Vec<f64>> {
    vars.iter().zip(slots).map(|(v, t)| g.grad(**v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])).collect()
}

impl Scorer {
    pub fn init(config: ModelConfig, scale: ScoreScale, rng: &mut Rng) -> Result<Self> {
        let encoder = Encoder::init(&config, rng)?;
        let head = ScoringHead { weight: rng.glorot(config.hidden_dim, 1), bias: Tensor::zeros(&[1]) };
        Ok(Scorer { config, scale, encoder, head })
    }

    fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Bound {
        Bound { encoder: self.encoder.map(&mut |t| g.leaf(t)), head: self.head.map(&mut |t| g.leaf(t)) }
    }

    fn check_len(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("cannot score an empty token sequence".into()));
        }
        Ok(())
    }

    /// Raw output in `(0, 1)` for one token sequence.
    pub fn raw(&self, ids: &[usize]) -> Result<f64> {
        self.check_len(ids)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = embed(&mut g, ids, &vec![0; ids.len()], &b.encoder.embeddings)?;
        let h = encoder_forward(&mut g, x, &b.encoder.layers, &self.config, None)?;
        let y = head_on_graph(&mut g, h, &b.head)?;
        Ok(g.scalar(y))
    }

    pub fn predict(&self, essays: &[(i64, Vec<usize>)], exec: Exec) -> Result<Vec<Prediction>> {
        exec.map(essays, |(id, ids)| Prediction::new(*id, self.raw(ids)?, &self.scale)).into_iter().collect()
    }

    /// Squared error against `target` and its gradient for every slot.
    pub fn loss_and_grads(&self, ids: &[usize], target: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_len(ids)?;
        if self.config.reversible {
            return self.loss_and_grads_reversible(ids, target);
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g);
        let x = embed(&mut g, ids, &vec![0; ids.len()], &b.encoder.embeddings)?;
        let h = encoder_forward(&mut g, x, &b.encoder.layers, &self.config, None)?;
        let y = head_on_graph(&mut g, h, &b.head)?;
        let t = g.constant(Tensor::filled(&[1, 1], target));
        let loss = g.mse(y, t)?;
        g.backward(loss)?;
        let vars: Vec<&Var> = b.encoder.slots().into_iter().chain(b.head.slots()).collect();
        Ok((g.scalar(loss), grads_of(&g, &vars, &self.slots())))
    }

    /// Same result as the taped path, but the encoder stack runs through
    /// [`ReversibleStack`], which keeps no per-layer activations.
    fn loss_and_grads_reversible(&self, ids: &[usize], target: f64) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g1 = Graph::new();
        let emb: Embeddings<Var> = self.encoder.embeddings.map(&mut |t| g1.leaf(t));
        let x = embed(&mut g1, ids, &vec![0; ids.len()], &emb)?;
        let (a, b) = split_halves(&mut g1, x)?;

        let mut stack = ReversibleStack::new(&self.encoder.layers, &self.config);
        let (y1, y2) = stack.forward(g1.tensor(a), g1.tensor(b), None)?;

        let mut g2 = Graph::new();
        let head = self.head.map(&mut |t| g2.leaf(t));
        let (o1, o2) = (g2.input(y1.clone()), g2.input(y2.clone()));
        let h = merge_halves(&mut g2, o1, o2)?;
        let y = head_on_graph(&mut g2, h, &head)?;
        let t = g2.constant(Tensor::filled(&[1, 1], target));
        let loss = g2.mse(y, t)?;
        g2.backward(loss)?;

        let back = stack.backward(y1, y2, g2.grad_tensor(o1), g2.grad_tensor(o2), None)?;
        g1.backward_seeded(&[(a, back.dx1.into_values()), (b, back.dx2.into_values())])?;

        let emb_slots = self.encoder.embeddings.slots();
        let mut grads = grads_of(&g1, &emb.slots(), &emb_slots);
        grads.extend(back.layers.into_iter().flatten());
        grads.extend(grads_of(&g2, &head.slots(), &self.head.slots()));
        Ok((g2.scalar(loss), grads))
    }

    fn header(&self) -> String {
        serde_json::to_string(&SavedHeader { model: self.config.clone(), scale: self.scale }).expect("config serializes")
    }

    pub fn to_container(&self) -> Container {
        Container { config: self.header(), arrays: self.named().into_iter().map(|(n, t)| (n, t.clone())).collect() }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let header: SavedHeader =
            serde_json::from_str(&c.config).map_err(|e| Error::Format(format!("model config block: {e}")))?;
        let mut rng = Rng::new(0);
        let mut scorer = Scorer::init(header.model, header.scale, &mut rng)?;
        let expected: Vec<(String, Vec<usize>)> = scorer.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != c.arrays.len() {
            return Err(Error::Format(format!("model file holds {} arrays, config expects {}", c.arrays.len(), expected.len())));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&c.arrays) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "model array {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = c.arrays.iter();
        scorer.visit_mut(&mut |slot| *slot = it.next().expect("counted").1.clone());
        Ok(scorer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Scorer::from_container(&Container::load(path)?)
    }
}
