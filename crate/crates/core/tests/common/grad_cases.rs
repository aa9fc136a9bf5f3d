//! Finite-difference gradient checks, one per building block. Each returns
//! the worst relative error it saw.

use essay_core::attention::{self, LshConfig, Mask, MultiHead};
use essay_core::blocks::{self, reversible, Embeddings, Encoder, EncoderLayer, ModelConfig, Params};
use essay_core::numerics::{Graph, Rng, Tensor, Var};
use essay_core::scoring::{ScoreScale, Scorer};

use super::{gradcheck, project};

pub const TOL: f64 = 1e-4;

fn jitter<P: Params<Tensor>>(p: &mut P, seed: u64) {
    let mut rng = Rng::new(seed);
    p.visit_mut(&mut |t| t.values_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal()));
}

fn flat<P: Params<Tensor>>(p: &P) -> Vec<Tensor> {
    p.slots().into_iter().cloned().collect()
}

fn small_cfg(hidden: usize, heads: usize) -> ModelConfig {
    ModelConfig { ff_dim: 6, ..ModelConfig::base(20, hidden, 1, heads, 16) }
}

fn layer_for(cfg: &ModelConfig, seed: u64) -> EncoderLayer<Tensor> {
    let mut layer = Encoder::init(cfg, &mut Rng::new(seed)).unwrap().layers.remove(0);
    jitter(&mut layer, seed + 1);
    layer
}

pub fn scaled_dot_product_attention() -> f64 {
    let mut rng = Rng::new(1);
    let params = vec![rng.normal_tensor(&[5, 3]), rng.normal_tensor(&[5, 3]), rng.normal_tensor(&[5, 2])];
    let masked = Mask::no_self(5);
    let mut worst: f64 = 0.0;
    for mask in [None, Some(&masked)] {
        worst = worst.max(gradcheck(&params, &|g: &mut Graph<'_>, v: &[Var]| {
            let out = attention::attention(g, v[0], v[1], v[2], mask).unwrap();
            project(g, out, 7)
        }));
    }
    worst
}

pub fn multi_head_attention() -> f64 {
    let cfg = small_cfg(6, 2);
    let mut rng = Rng::new(2);
    let weights = MultiHead::init(6, &cfg.attention(), false, &mut rng).unwrap();
    let mut params = vec![rng.normal_tensor(&[4, 6])];
    params.extend(weights.heads.iter().flat_map(|h| [h.query.clone(), h.key.clone().unwrap(), h.value.clone()]));
    params.push(weights.output.clone());
    let err = gradcheck(&params, &|g: &mut Graph<'_>, v: &[Var]| {
        let mut it = v[1..].iter().copied();
        let w = blocks::map_multi_head(&weights, &mut |_| it.next().unwrap());
        let out = attention::multi_head(g, v[0], &w, &cfg.attention(), None).unwrap();
        project(g, out, 8)
    });
    err
}

pub fn lsh_attention_gradient() -> f64 {
    let lsh = LshConfig { num_hashes: 2, num_buckets: 4, chunk_size: 2, seed: 3 };
    let att = attention::AttentionConfig { num_heads: 1, max_len: 16 };
    let mut rng = Rng::new(3);
    let params = vec![rng.normal_tensor(&[8, 4]), rng.normal_tensor(&[4, 3]), rng.normal_tensor(&[4, 3])];

    gradcheck(&params, &|g: &mut Graph<'_>, v: &[Var]| {
        let out = attention::lsh_attention(g, v[0], v[1], v[2], &lsh, &att).unwrap();
        project(g, out, 9)
    })
}

pub fn layer_norm_gradient() -> f64 {
    let mut rng = Rng::new(4);
    let params = vec![rng.normal_tensor(&[3, 5]), rng.normal_tensor(&[5]), rng.normal_tensor(&[5])];

    gradcheck(&params, &|g: &mut Graph<'_>, v: &[Var]| {
        let out = g.layer_norm(v[0], v[1], v[2], blocks::LAYER_NORM_EPS).unwrap();
        project(g, out, 10)
    })
}

pub fn feed_forward_gradient() -> f64 {
    let cfg = small_cfg(4, 1);
    let layer = layer_for(&cfg, 5);
    let mut params = vec![Rng::new(5).normal_tensor(&[3, 4])];
    params.extend(flat(&layer.ff));
    let err = gradcheck(&params, &|g: &mut Graph<'_>, v: &[Var]| {
        let mut it = v[1..].iter().copied();
        let ff = layer.ff.map(&mut |_| it.next().unwrap());
        let out = blocks::feed_forward(g, v[0], &ff).unwrap();
        project(g, out, 11)
    });
    err
}

fn layer_check(cfg: &ModelConfig, seed: u64) -> f64 {
    let layer = layer_for(cfg, seed);
    let mut params = vec![Rng::new(seed).normal_tensor(&[5, cfg.hidden_dim])];
    params.extend(flat(&layer));
    gradcheck(&params, &|g: &mut Graph<'_>, v: &[Var]| {
        let mut it = v[1..].iter().copied();
        let w = layer.map(&mut |_| it.next().unwrap());
        let out = blocks::encoder_layer(g, v[0], &w, cfg, None).unwrap();
        project(g, out, seed)
    })
}

pub fn encoder_layer_gradient() -> f64 {
    layer_check(&small_cfg(6, 2), 6)
}

pub fn bottleneck_layer_gradient() -> f64 {
    let cfg = ModelConfig { bottleneck_dim: 4, ..small_cfg(8, 2) };

    layer_check(&cfg, 7)
}

fn reversible_cfg() -> ModelConfig {
    ModelConfig { reversible: true, ..small_cfg(8, 2) }
}

pub fn reversible_pair_gradient() -> f64 {
    let cfg = reversible_cfg();
    let layer = layer_for(&cfg, 8);
    let mut rng = Rng::new(8);
    let mut params = vec![rng.normal_tensor(&[5, 4]), rng.normal_tensor(&[5, 4])];
    params.extend(flat(&layer));
    let err = gradcheck(&params, &|g: &mut Graph<'_>, v: &[Var]| {
        let mut it = v[2..].iter().copied();
        let w = layer.map(&mut |_| it.next().unwrap());
        let (y1, y2) = reversible::reversible_forward(g, v[0], v[1], &w, &cfg, None).unwrap();
        let a = project(g, y1, 12);
        let b = project(g, y2, 13);
        g.add(a, b).unwrap()
    });
    err
}

/// The recompute-on-backward stack against differences of its own forward.
pub fn reversible_stack_gradient() -> f64 {
    let cfg = ModelConfig { num_layers: 3, ..reversible_cfg() };
    let mut layers = Encoder::init(&cfg, &mut Rng::new(9)).unwrap().layers;
    for (i, l) in layers.iter_mut().enumerate() {
        jitter(l, 90 + i as u64);
    }
    let mut rng = Rng::new(10);
    let (x1, x2) = (rng.normal_tensor(&[4, 4]), rng.normal_tensor(&[4, 4]));
    let (r1, r2) = (rng.normal_tensor(&[4, 4]), rng.normal_tensor(&[4, 4]));
    let loss = |layers: &[EncoderLayer<Tensor>], x1: &Tensor, x2: &Tensor| {
        let mut stack = reversible::ReversibleStack::new(layers, &cfg);
        let (y1, y2) = stack.forward(x1.clone(), x2.clone(), None).unwrap();
        let dot = |a: &Tensor, b: &Tensor| a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum::<f64>();
        dot(&y1, &r1) + dot(&y2, &r2)
    };
    let mut stack = reversible::ReversibleStack::new(&layers, &cfg);
    let (y1, y2) = stack.forward(x1.clone(), x2.clone(), None).unwrap();
    let grads = stack.backward(y1, y2, r1.clone(), r2.clone(), None).unwrap();

    let h = super::FD_STEP;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(super::FD_FLOOR);
    let mut worst: f64 = 0.0;
    for (which, analytic) in [(0, &grads.dx1), (1, &grads.dx2)] {
        for i in 0..16 {
            let mut xs = [x1.clone(), x2.clone()];
            xs[which].values_mut()[i] += h;
            let up = loss(&layers, &xs[0], &xs[1]);
            xs[which].values_mut()[i] -= 2.0 * h;
            let down = loss(&layers, &xs[0], &xs[1]);
            worst = worst.max(rel(analytic.values()[i], (up - down) / (2.0 * h)));
        }
    }
    for l in 0..layers.len() {
        let n_slots = layers[l].slots().len();
        for s in (0..n_slots).step_by(3) {
            let len = layers[l].slots()[s].len();
            for i in (0..len).step_by(len.div_ceil(6)) {
                let mut nudged = layers.clone();
                let bump = |delta: f64, ls: &mut Vec<EncoderLayer<Tensor>>| {
                    let mut k = 0;
                    ls[l].visit_mut(&mut |t| {
                        if k == s {
                            t.values_mut()[i] += delta;
                        }
                        k += 1;
                    });
                };
                bump(h, &mut nudged);
                let up = loss(&nudged, &x1, &x2);
                bump(-2.0 * h, &mut nudged);
                let down = loss(&nudged, &x1, &x2);
                worst = worst.max(rel(grads.layers[l][s][i], (up - down) / (2.0 * h)));
            }
        }
    }
    worst
}

pub fn factored_embedding_gradient() -> f64 {
    let cfg = ModelConfig { embed_dim: 3, ..small_cfg(6, 2) };
    let emb = Encoder::init(&cfg, &mut Rng::new(11)).unwrap().embeddings;
    assert!(emb.projection.is_some(), "embedding must be factored");
    let params = flat(&emb);
    let ids = [2, 7, 2, 19];
    let segments = [0, 0, 1, 1];
    let err = gradcheck(&params, &|g: &mut Graph<'_>, v: &[Var]| {
        let mut it = v.iter().copied();
        let t: Embeddings<Var> = emb.map(&mut |_| it.next().unwrap());
        let out = blocks::embed(g, &ids, &segments, &t).unwrap();
        project(g, out, 14)
    });
    err
}

pub fn sigmoid_head_gradient() -> f64 {
    let mut rng = Rng::new(12);
    let params = vec![rng.normal_tensor(&[4, 5]), rng.normal_tensor(&[5, 1]), rng.normal_tensor(&[1])];

    gradcheck(&params, &|g: &mut Graph<'_>, v: &[Var]| {
        let first = g.gather_rows(v[0], &[0]).unwrap();
        let z = g.matmul(first, v[1]).unwrap();
        let z = g.add_row(z, v[2]).unwrap();
        let y = g.sigmoid(z);
        let t = g.constant(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
        g.mse(y, t).unwrap()
    })
}

pub fn mse_gradient() -> f64 {
    let mut rng = Rng::new(15);
    let params = vec![rng.normal_tensor(&[6]), rng.normal_tensor(&[6])];
    gradcheck(&params, &|g: &mut Graph<'_>, v: &[Var]| g.mse(v[0], v[1]).unwrap())
}

/// Whole-model loss gradients, including the reversible training path.
pub fn scorer_loss_gradient() -> f64 {
    let base = ModelConfig { num_layers: 2, ..small_cfg(8, 2) };
    let lsh = ModelConfig {
        reversible: true,
        lsh: Some(LshConfig { num_hashes: 2, num_buckets: 4, chunk_size: 2, seed: 1 }),
        ..base.clone()
    };
    let shared = ModelConfig { share_layers: true, embed_dim: 4, ..base.clone() };
    let ids = [2, 5, 9, 11, 4, 17];
    let mut overall: f64 = 0.0;
    for cfg in [base, lsh, shared] {
        let scale = ScoreScale::new(0, 3).unwrap();
        let mut scorer = Scorer::init(cfg.clone(), scale, &mut Rng::new(13)).unwrap();
        jitter(&mut scorer, 14);
        let (_, grads) = scorer.loss_and_grads(&ids, 0.8).unwrap();
        let h = super::FD_STEP;
        let mut worst: f64 = 0.0;
        let shapes: Vec<usize> = scorer.slots().iter().map(|t| t.len()).collect();
        for (s, &len) in shapes.iter().enumerate() {
            for i in (0..len).step_by(len.div_ceil(4)) {
                let at = |delta: f64| {
                    let mut m = scorer.clone();
                    let mut k = 0;
                    m.visit_mut(&mut |t| {
                        if k == s {
                            t.values_mut()[i] += delta;
                        }
                        k += 1;
                    });
                    m.loss_and_grads(&ids, 0.8).unwrap().0
                };
                let numeric = (at(h) - at(-h)) / (2.0 * h);
                let a = grads[s][i];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(super::FD_FLOOR));
            }
        }
        overall = overall.max(worst);
    }
    overall
}

/// Every case with a short label.
pub fn all() -> Vec<(&'static str, fn() -> f64)> {
    vec![
        ("attention", scaled_dot_product_attention),
        ("multi-head attention", multi_head_attention),
        ("LSH attention", lsh_attention_gradient),
        ("layer norm", layer_norm_gradient),
        ("feed-forward", feed_forward_gradient),
        ("encoder layer", encoder_layer_gradient),
        ("bottleneck layer", bottleneck_layer_gradient),
        ("reversible pair", reversible_pair_gradient),
        ("reversible stack", reversible_stack_gradient),
        ("factored embedding", factored_embedding_gradient),
        ("sigmoid head", sigmoid_head_gradient),
        ("MSE loss", mse_gradient),
        ("full scorer loss", scorer_loss_gradient),
    ]
}
