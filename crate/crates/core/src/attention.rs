//! Scaled dot-product attention, the multi-head wrapper and shared-QK LSH
//! attention.
//!
//! LSH attention hashes every position with angular LSH (argmax over the
//! projections onto random rotations and their negations), sorts positions
//! by `(bucket, position)`, cuts the order into chunks and lets each
//! position attend to its own chunk and the chunk before it. Several
//! hashing rounds are merged by taking the union of the attended key sets
//! and renormalising once over that union. Because queries and keys share
//! one projection, a position's dot product with itself dominates; the
//! self pair is dropped whenever any other key is available.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub max_len: usize,
}

impl AttentionConfig {
    /// Per-head key width for a stream of width `hidden`.
    pub fn head_dim(&self, hidden: usize) -> Result<usize> {
        if self.num_heads == 0 || !hidden.is_multiple_of(self.num_heads) {
            return Err(Error::Input(format!("width {hidden} is not divisible by {} heads", self.num_heads)));
        }
        Ok(hidden / self.num_heads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LshConfig {
    pub num_hashes: usize,
    pub num_buckets: usize,
    pub chunk_size: usize,
    pub seed: u64,
}

impl LshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_hashes == 0 {
            return Err(Error::Input("num_hashes must be positive".into()));
        }
        if self.num_buckets < 2 || !self.num_buckets.is_multiple_of(2) {
            return Err(Error::Input(format!("num_buckets must be even and >= 2, got {}", self.num_buckets)));
        }
        if self.chunk_size == 0 {
            return Err(Error::Input("chunk_size must be positive".into()));
        }
        Ok(())
    }
}

/// Projections for one head. `key == None` means queries and keys share
/// the `query` projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead<T> {
    pub query: T,
    pub key: Option<T>,
    pub value: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHead<T> {
    pub heads: Vec<AttentionHead<T>>,
    pub output: T,
}

impl MultiHead<Tensor> {
    /// Glorot-initialised weights for a stream of width `hidden`.
    pub fn init(hidden: usize, cfg: &AttentionConfig, shared_qk: bool, rng: &mut Rng) -> Result<Self> {
        let dk = cfg.head_dim(hidden)?;
        let heads = (0..cfg.num_heads)
            .map(|_| AttentionHead {
                query: rng.glorot(hidden, dk),
                key: (!shared_qk).then(|| rng.glorot(hidden, dk)),
                value: rng.glorot(hidden, dk),
            })
            .collect();
        Ok(MultiHead { heads, output: rng.glorot(hidden, hidden) })
    }
}

/// Boolean `L×L` attend mask, `true` meaning the pair is admissible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    len: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(len: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != len * len {
            return Err(Error::Shape(format!("mask for length {len} needs {} entries", len * len)));
        }
        Ok(Mask { len, allow })
    }

    pub fn all(len: usize) -> Self {
        Mask { len, allow: vec![true; len * len] }
    }

    /// Everything except the diagonal; a length-one sequence keeps its
    /// only pair.
    pub fn no_self(len: usize) -> Self {
        let mut m = Mask::all(len);
        if len > 1 {
            for i in 0..len {
                m.allow[i * len + i] = false;
            }
        }
        m
    }

    /// Admissible key sets, one per query.
    pub fn from_sets(len: usize, sets: &[Vec<usize>]) -> Self {
        let mut m = Mask { len, allow: vec![false; len * len] };
        for (i, s) in sets.iter().enumerate() {
            for &j in s {
                m.allow[i * len + j] = true;
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.len + j]
    }
}

/// `softmax(Q·Kᵀ/√d_k + mask_bias)·V`. A row with no admissible key is a
/// contract violation.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, mask: Option<&Mask>) -> Result<Var> {
    let (lq, dk) = g.dims(q);
    let (lk, dk2) = g.dims(k);
    let lv = g.dims(v).0;
    if dk != dk2 || lk != lv {
        return Err(Error::Shape(format!("attention: Q {:?}, K {:?}, V {:?}", g.shape(q), g.shape(k), g.shape(v))));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    match mask {
        None => {
            let scores = g.matmul_bt(q, k)?;
            let scaled = g.scale(scores, scale);
            let weights = g.softmax_rows(scaled);
            g.matmul(weights, v)
        }
        Some(m) => {
            if m.len() != lq || lq != lk {
                return Err(Error::Shape(format!("mask of length {} for {lq}x{lk} scores", m.len())));
            }
            if let Some(i) = (0..lq).find(|&i| !(0..lk).any(|j| m.allows(i, j))) {
                return Err(Error::Contract(format!("attention row {i} is fully masked")));
            }
            let scores = g.matmul_bt(q, k)?;
            let scaled = g.scale(scores, scale);
            let weights = g.masked_softmax_rows(scaled, &m.allow)?;
            g.matmul(weights, v)
        }
    }
}

/// Multi-head self-attention over `x` (L×H). Shared-QK heads reuse the
/// query projection as key projection.
pub fn multi_head(
    g: &mut Graph<'_>,
    x: Var,
    weights: &MultiHead<Var>,
    cfg: &AttentionConfig,
    mask: Option<&Mask>,
) -> Result<Var> {
    let (l, h) = g.dims(x);
    if l > cfg.max_len {
        return Err(Error::Input(format!("sequence length {l} exceeds max_len {}", cfg.max_len)));
    }
    cfg.head_dim(h)?;
    if weights.heads.len() != cfg.num_heads {
        return Err(Error::Shape(format!("{} head weight sets for {} heads", weights.heads.len(), cfg.num_heads)));
    }
    let mut outs = Vec::with_capacity(weights.heads.len());
    for head in &weights.heads {
        let q = g.matmul(x, head.query)?;
        let k = match head.key {
            Some(wk) => g.matmul(x, wk)?,
            None => q,
        };
        let v = g.matmul(x, head.value)?;
        outs.push(attention(g, q, k, v, mask)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(cat, weights.output)
}

/// One random rotation (`d_k × num_buckets/2`) per hashing round.
pub fn lsh_rotations(cfg: &LshConfig, dk: usize, head: usize) -> Vec<Tensor> {
    let seed = cfg.seed ^ (head as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    (0..cfg.num_hashes).map(|round| Rng::stream(seed, round as u64).normal_tensor(&[dk, cfg.num_buckets / 2])).collect()
}

/// Angular LSH bucket of every row of `q` under `rotation`.
pub fn lsh_buckets(q: &Tensor, rotation: &Tensor) -> Vec<usize> {
    let proj = q.matmul(rotation).expect("rotation width matches head width");
    let half = rotation.cols();
    (0..q.rows())
        .map(|i| {
            let row = proj.row(i);
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for b in 0..2 * half {
                let v = if b < half { row[b] } else { -row[b - half] };
                if v > best_val {
                    best_val = v;
                    best = b;
                }
            }
            best
        })
        .collect()
}

/// Key sets attended by each query position after hashing `q` with each
/// rotation: own chunk plus the preceding chunk in `(bucket, position)`
/// order, united over rounds, self pair dropped when anything else is left.
pub fn lsh_key_sets(q: &Tensor, rotations: &[Tensor], chunk_size: usize) -> Vec<Vec<usize>> {
    let l = q.rows();
    let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); l];
    for rot in rotations {
        let buckets = lsh_buckets(q, rot);
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by_key(|&i| (buckets[i], i));
        let chunks: Vec<&[usize]> = order.chunks(chunk_size).collect();
        for (c, chunk) in chunks.iter().enumerate() {
            let prev: &[usize] = if c > 0 { chunks[c - 1] } else { &[] };
            for &i in chunk.iter() {
                sets[i].extend(chunk.iter().chain(prev));
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

/// Shared-QK LSH attention for one head: `Q = K = x·W_QK`, `V = x·W_V`.
pub fn lsh_attention(g: &mut Graph<'_>, x: Var, w_qk: Var, w_v: Var, lsh: &LshConfig, att: &AttentionConfig) -> Result<Var> {
    lsh_attention_head(g, x, w_qk, w_v, lsh, att, 0)
}

fn lsh_attention_head(
    g: &mut Graph<'_>,
    x: Var,
    w_qk: Var,
    w_v: Var,
    lsh: &LshConfig,
    att: &AttentionConfig,
    head: usize,
) -> Result<Var> {
    lsh.validate()?;
    let l = g.dims(x).0;
    if l > att.max_len {
        return Err(Error::Input(format!("sequence length {l} exceeds max_len {}", att.max_len)));
    }
    let dk = g.dims(w_qk).1;
    let rotations = lsh_rotations(lsh, dk, head);
    lsh_attention_rotated(g, x, w_qk, w_v, &rotations, lsh.chunk_size)
}

/// Shared-QK LSH attention with explicitly supplied rotations, one per
/// hashing round.
pub fn lsh_attention_rotated(
    g: &mut Graph<'_>,
    x: Var,
    w_qk: Var,
    w_v: Var,
    rotations: &[Tensor],
    chunk_size: usize,
) -> Result<Var> {
    if rotations.is_empty() || chunk_size == 0 {
        return Err(Error::Input("LSH attention needs at least one rotation and a positive chunk size".into()));
    }
    let q = g.matmul(x, w_qk)?;
    let v = g.matmul(x, w_v)?;
    let dk = g.dims(q).1;
    if rotations.iter().any(|r| r.rows() != dk) {
        return Err(Error::Shape(format!("rotations must have {dk} rows")));
    }
    let sets = lsh_key_sets(&g.tensor(q), rotations, chunk_size);
    g.sparse_attention(q, q, v, sets, 1.0 / (dk as f64).sqrt())
}

/// Multi-head LSH self-attention; each head must be shared-QK.
pub fn multi_head_lsh(
    g: &mut Graph<'_>,
    x: Var,
    weights: &MultiHead<Var>,
    lsh: &LshConfig,
    att: &AttentionConfig,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(weights.heads.len());
    for (h, head) in weights.heads.iter().enumerate() {
        if head.key.is_some() {
            return Err(Error::Input("LSH attention requires shared query/key projections".into()));
        }
        outs.push(lsh_attention_head(g, x, head.query, head.value, lsh, att, h)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(cat, weights.output)
}

/// Full shared-QK attention with the same self-exclusion rule as the LSH
/// path; the reference that LSH attention approximates.
pub fn shared_qk_attention(g: &mut Graph<'_>, x: Var, w_qk: Var, w_v: Var) -> Result<Var> {
    let q = g.matmul(x, w_qk)?;
    let v = g.matmul(x, w_v)?;
    let l = g.dims(x).0;
    attention(g, q, q, v, Some(&Mask::no_self(l)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(q: Tensor, k: Tensor, v: Tensor, mask: Option<&Mask>) -> Result<Tensor> {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
        let out = attention(&mut g, q, k, v, mask)?;
        Ok(g.tensor(out))
    }

    #[test]
    fn single_position_returns_value_row() {
        let v = Tensor::from_rows(&[vec![0.3, -1.2, 5.0]]).unwrap();
        let out =
            run(Tensor::from_rows(&[vec![2.0]]).unwrap(), Tensor::from_rows(&[vec![-7.0]]).unwrap(), v.clone(), None).unwrap();
        assert_eq!(out.values(), v.values());
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = Rng::new(3);
        let k = rng.normal_tensor(&[5, 4]);
        let v = rng.normal_tensor(&[5, 2]);
        let out = run(Tensor::zeros(&[5, 4]), k, v.clone(), None).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..5).map(|r| v.get(r, c)).sum::<f64>() / 5.0;
            for r in 0..5 {
                assert!((out.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_closed_form() {
        // d_k = 1, q = [0, ln 3], k = [1, 0]: scores [[0,0],[ln3,0]],
        // weights [[1/2,1/2],[3/4,1/4]].
        let q = Tensor::from_rows(&[vec![0.0], vec![3f64.ln()]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = run(q, k, v, None).unwrap();
        let expected = [0.5, 0.5, 0.75, 0.25];
        for (a, b) in out.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn fully_masked_row_is_contract_error() {
        let mask = Mask::new(2, vec![true, true, false, false]).unwrap();
        let t = Tensor::zeros(&[2, 2]);
        let err = run(t.clone(), t.clone(), t, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn masked_entries_get_no_weight() {
        let mut rng = Rng::new(5);
        let q = rng.normal_tensor(&[3, 2]);
        let k = rng.normal_tensor(&[3, 2]);
        let v = Tensor::from_rows(&[vec![1.0], vec![10.0], vec![100.0]]).unwrap();
        let mask = Mask::from_sets(3, &[vec![0], vec![1], vec![2]]);
        let out = run(q, k, v, Some(&mask)).unwrap();
        assert_eq!(out.values(), &[1.0, 10.0, 100.0]);
    }

    #[test]
    fn lsh_sets_respect_chunk_bound() {
        let mut rng = Rng::new(9);
        let q = rng.normal_tensor(&[32, 8]);
        let cfg = LshConfig { num_hashes: 3, num_buckets: 4, chunk_size: 4, seed: 1 };
        let sets = lsh_key_sets(&q, &lsh_rotations(&cfg, 8, 0), cfg.chunk_size);
        assert!(sets.iter().all(|s| !s.is_empty() && s.len() <= 3 * 2 * 4));
        assert!(sets.iter().enumerate().all(|(i, s)| !s.contains(&i)));
    }

    #[test]
    fn lsh_config_validation() {
        let ok = LshConfig { num_hashes: 1, num_buckets: 2, chunk_size: 1, seed: 0 };
        assert!(ok.validate().is_ok());
        assert!(LshConfig { num_buckets: 3, ..ok }.validate().is_err());
        assert!(LshConfig { chunk_size: 0, ..ok }.validate().is_err());
        assert!(LshConfig { num_hashes: 0, ..ok }.validate().is_err());
    }
}
