//! Reference implementations shared by the integration and acceptance
//! tests. Nothing here calls the library code it is used to check.

#![allow(dead_code)]

pub mod grad_cases;

use std::collections::BTreeSet;

use essay_core::numerics::{Graph, Rng, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-5;
const MAX_COORDS_PER_TENSOR: usize = 48;

/// Builds a scalar loss from leaf handles, one per input tensor.
pub type Build<'f> = dyn for<'a> Fn(&mut Graph<'a>, &[Var]) -> Var + 'f;

fn loss_value(params: &[Tensor], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &vars);
    g.scalar(loss)
}

/// Largest relative error between taped gradients and central differences
/// over (a strided sample of) every coordinate of every tensor.
pub fn gradcheck(params: &[Tensor], build: &Build<'_>) -> f64 {
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss).expect("scalar loss");
        vars.iter().zip(params).map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])).collect()
    };
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        let n = params[p].len();
        let stride = n.div_ceil(MAX_COORDS_PER_TENSOR).max(1);
        for i in (0..n).step_by(stride) {
            let orig = work[p].values()[i];
            work[p].values_mut()[i] = orig + FD_STEP;
            let up = loss_value(&work, build);
            work[p].values_mut()[i] = orig - FD_STEP;
            let down = loss_value(&work, build);
            work[p].values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[p][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// `sum(out * r)` for a fixed random `r`, so every output coordinate gets a
/// distinct upstream gradient.
pub fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let r = g.constant(Rng::new(seed).normal_tensor(&shape));
    let prod = g.mul(out, r).expect("same shape");
    g.sum(prod)
}

/// Quadratic weighted kappa written as `1 - sum(w' O) / sum(w' E)` with
/// disagreement weights `(i - j)^2` and raw counts.
pub fn brute_qwk(a: &[i64], b: &[i64], min: i64, max: i64) -> f64 {
    let k = (max - min + 1) as usize;
    let n = a.len() as f64;
    let mut o = vec![vec![0.0f64; k]; k];
    let mut ha = vec![0.0f64; k];
    let mut hb = vec![0.0f64; k];
    for t in 0..a.len() {
        let i = (a[t] - min) as usize;
        let j = (b[t] - min) as usize;
        o[i][j] += 1.0;
        ha[i] += 1.0;
        hb[j] += 1.0;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64) - (j as f64)).powi(2);
            num += w * o[i][j];
            den += w * ha[i] * hb[j] / n;
        }
    }
    1.0 - num / den
}

fn mat_row_dot(a: &Tensor, i: usize, b: &Tensor, j: usize) -> f64 {
    (0..a.cols()).map(|c| a.get(i, c) * b.get(j, c)).sum()
}

/// Attention computed one query at a time over an explicit key set.
pub fn restricted_attention(q: &Tensor, k: &Tensor, v: &Tensor, sets: &[Vec<usize>]) -> Tensor {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut rows = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        let scores: Vec<f64> = set.iter().map(|&j| mat_row_dot(q, i, k, j) * scale).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = vec![0.0; v.cols()];
        for (w, &j) in e.iter().zip(set) {
            for c in 0..v.cols() {
                out[c] += w / z * v.get(j, c);
            }
        }
        rows.push(out);
    }
    Tensor::from_rows(&rows).unwrap()
}

/// Key sets of shared-QK LSH attention: bucket = argmax over `[qR, -qR]`,
/// positions ordered by (bucket, index), each query sees its own and the
/// previous chunk; rounds are united and the self pair is removed unless
/// it is the only candidate.
pub fn lsh_sets(q: &Tensor, rotations: &[Tensor], chunk: usize) -> Vec<Vec<usize>> {
    let l = q.rows();
    let mut sets = vec![BTreeSet::new(); l];
    for r in rotations {
        let half = r.cols();
        let bucket: Vec<usize> = (0..l)
            .map(|i| {
                let proj: Vec<f64> = (0..half).map(|c| (0..q.cols()).map(|d| q.get(i, d) * r.get(d, c)).sum()).collect();
                let mut best = (f64::NEG_INFINITY, 0);
                for (b, val) in proj.iter().copied().chain(proj.iter().map(|x| -x)).enumerate() {
                    if val > best.0 {
                        best = (val, b);
                    }
                }
                best.1
            })
            .collect();
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&x, &y| (bucket[x], x).cmp(&(bucket[y], y)));
        for (rank, &i) in order.iter().enumerate() {
            let c = rank / chunk;
            let lo = c.saturating_sub(1) * chunk;
            let hi = ((c + 1) * chunk).min(l);
            for &j in &order[lo..hi] {
                sets[i].insert(j);
            }
        }
    }
    sets.into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            if s.len() > 1 {
                s.remove(&i);
            }
            s.into_iter().collect()
        })
        .collect()
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}
