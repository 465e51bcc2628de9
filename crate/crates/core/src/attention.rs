//! Sliding-window masks and grouped-query scaled dot-product attention.
//!
//! A query at absolute position `i` may attend keys in `[i - W + 1, i]`:
//! exactly `W` keys counting itself, so a `W`-slot rolling cache can serve
//! every decode step.

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

/// Which (query, key) pairs may interact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub query_positions: Vec<usize>,
    pub key_positions: Vec<usize>,
    /// Row-major `[n_queries × n_keys]`.
    admissible: Vec<bool>,
}

impl AttentionMask {
    pub fn n_queries(&self) -> usize {
        self.query_positions.len()
    }

    pub fn n_keys(&self) -> usize {
        self.key_positions.len()
    }

    pub fn is_admissible(&self, q: usize, k: usize) -> bool {
        self.admissible[q * self.n_keys() + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        let n = self.n_keys();
        &self.admissible[q * n..(q + 1) * n]
    }

    /// Number of admissible pairs.
    pub fn pair_count(&self) -> u64 {
        self.admissible.iter().filter(|&&a| a).count() as u64
    }

    /// Absolute key positions admitted for query row `q`.
    pub fn admitted_positions(&self, q: usize) -> Vec<usize> {
        self.row(q)
            .iter()
            .zip(&self.key_positions)
            .filter(|(&a, _)| a)
            .map(|(_, &p)| p)
            .collect()
    }
}

/// `admissible[q][k] ⇔ 0 <= query_pos[q] - key_pos[k] <= window - 1`.
pub fn build_swa_mask(query_positions: &[usize], key_positions: &[usize], window: usize) -> AttentionMask {
    assert!(window >= 1, "window must be at least 1");
    let admissible = query_positions
        .iter()
        .flat_map(|&q| {
            key_positions
                .iter()
                .map(move |&k| k <= q && q - k < window)
        })
        .collect();
    AttentionMask {
        query_positions: query_positions.to_vec(),
        key_positions: key_positions.to_vec(),
        admissible,
    }
}

/// Mask for one pre-fill chunk `[chunk_start, chunk_start + chunk_len)`
/// attending over the cached positions followed by the chunk itself.
///
/// The chunk block is causal, the cache block is windowed, and anything
/// older than the window is excluded; all three fall out of the single
/// sliding-window predicate over the concatenated key list.
pub fn build_prefill_mask(
    chunk_start: usize,
    chunk_len: usize,
    cache_positions: &[usize],
    window: usize,
) -> Result<AttentionMask> {
    assert!(chunk_len >= 1, "chunk_len must be at least 1");
    if let Some(&bad) = cache_positions.iter().find(|&&p| p >= chunk_start) {
        return Err(Error::CacheAfterChunk {
            cache_position: bad,
            chunk_start,
        });
    }
    let queries: Vec<usize> = (chunk_start..chunk_start + chunk_len).collect();
    let keys: Vec<usize> = cache_positions.iter().copied().chain(queries.iter().copied()).collect();
    Ok(build_swa_mask(&queries, &keys, window))
}

/// Maps query heads onto the key/value head they share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadGrouping {
    n_heads: usize,
    n_kv_heads: usize,
}

impl HeadGrouping {
    pub fn new(n_heads: usize, n_kv_heads: usize) -> Result<Self> {
        if n_kv_heads == 0 || n_heads == 0 || !n_heads.is_multiple_of(n_kv_heads) {
            return Err(Error::InvalidShape {
                shape: vec![n_heads, n_kv_heads],
                reason: "n_heads must be a positive multiple of n_kv_heads".into(),
            });
        }
        Ok(Self { n_heads, n_kv_heads })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn kv_head(&self, query_head: usize) -> usize {
        query_head / self.group_size()
    }
}

/// Grouped-query attention.
///
/// `q` is `[n_heads × n_q × head_dim]`, `k` and `v` are
/// `[n_kv_heads × n_k × head_dim]`. Keys must be laid out in ascending
/// absolute position; masked pairs never enter the max, the normalizer or
/// the weighted sum.
pub fn gqa_attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    grouping: &HeadGrouping,
) -> Result<Tensor> {
    let [n_heads, n_q, head_dim] = dims3(q, "gqa_attend q")?;
    let [n_kv, n_k, k_dim] = dims3(k, "gqa_attend k")?;
    if k.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "gqa_attend k/v",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    if n_heads != grouping.n_heads() || n_kv != grouping.n_kv_heads() || k_dim != head_dim {
        return Err(Error::ShapeMismatch {
            op: "gqa_attend heads",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if mask.n_queries() != n_q || mask.n_keys() != n_k {
        return Err(Error::ShapeMismatch {
            op: "gqa_attend mask",
            lhs: vec![n_q, n_k],
            rhs: vec![mask.n_queries(), mask.n_keys()],
        });
    }

    let scale = 1.0 / (head_dim as f32).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0f32; n_heads * n_q * head_dim];
    let mut scores = vec![0.0f32; n_k];

    for h in 0..n_heads {
        let g = grouping.kv_head(h);
        let k_head = &kd[g * n_k * head_dim..(g + 1) * n_k * head_dim];
        let v_head = &vd[g * n_k * head_dim..(g + 1) * n_k * head_dim];
        for i in 0..n_q {
            let q_row = &qd[(h * n_q + i) * head_dim..(h * n_q + i + 1) * head_dim];
            let allowed = mask.row(i);
            for (j, s) in scores.iter_mut().enumerate() {
                *s = if allowed[j] {
                    let k_row = &k_head[j * head_dim..(j + 1) * head_dim];
                    dot(q_row, k_row) * scale
                } else {
                    0.0
                };
            }
            softmax_in_place(&mut scores, Some(allowed))?;

            let o = &mut out[(h * n_q + i) * head_dim..(h * n_q + i + 1) * head_dim];
            for (j, &w) in scores.iter().enumerate() {
                if !allowed[j] {
                    continue;
                }
                let v_row = &v_head[j * head_dim..(j + 1) * head_dim];
                for (acc, &x) in o.iter_mut().zip(v_row) {
                    *acc += w * x;
                }
            }
        }
    }
    Tensor::new(vec![n_heads, n_q, head_dim], out)
}

fn dims3(t: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match *t.shape() {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects rank 3"),
        }),
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Admissible (query, key) pairs under causal sliding-window attention over
/// `seq_len` positions: `Σ_i min(i + 1, W)`.
pub fn score_pair_count(seq_len: u64, window: u64) -> u64 {
    assert!(seq_len >= 1 && window >= 1);
    if seq_len <= window {
        full_pair_count(seq_len)
    } else {
        window * (window + 1) / 2 + (seq_len - window) * window
    }
}

/// Admissible pairs under plain causal attention: `L(L+1)/2`.
pub fn full_pair_count(seq_len: u64) -> u64 {
    seq_len * (seq_len + 1) / 2
}
