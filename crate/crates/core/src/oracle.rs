//! Slow full-history baselines.
//!
//! These recompute every position from scratch with unbounded key/value
//! storage and an explicit mask over the whole history. They share only the
//! tensor kernels and mask construction with the engine; the layer loop,
//! head bookkeeping and attention arithmetic are written out separately and
//! nothing here touches the rolling cache.

use std::sync::Arc;

use crate::attention::build_swa_mask;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Decoder, DecoderWeights};
use crate::tensor::{matmul, rms_norm, rope_apply, silu_gate, softmax_stable, Tensor, NORM_EPS, ROPE_THETA};

/// Maximum `len × dim` history the oracle will take on.
pub const HISTORY_LIMIT: usize = 1 << 20;

/// Logit difference above which an output position counts as affected.
pub const REACH_THRESHOLD: f32 = 1e-7;

/// Which keys a query may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMask {
    /// Sliding window of the configured width.
    SlidingWindow,
    /// Plain causal attention over everything before.
    Causal,
}

/// Every layer's key/value rows for every position seen; grows by one row
/// per layer per position.
#[derive(Debug, Clone, Default)]
pub struct FullHistoryState {
    /// Per layer, `[len × n_kv_heads·head_dim]` (keys already rotated).
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl FullHistoryState {
    pub fn entries_per_layer(&self) -> usize {
        self.keys.first().map_or(0, |t| t.shape()[0])
    }

    pub fn allocated_floats(&self) -> usize {
        self.keys.iter().chain(&self.values).map(Tensor::len).sum()
    }
}

fn check_len(config: &ModelConfig, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::EmptyPrompt);
    }
    if len > config.context_len {
        return Err(Error::ContextOverflow {
            position: len,
            context_len: config.context_len,
        });
    }
    if len * config.dim > HISTORY_LIMIT {
        return Err(Error::OracleTooLarge {
            len,
            dim: config.dim,
            limit: HISTORY_LIMIT,
        });
    }
    Ok(())
}

fn embed(weights: &DecoderWeights, tokens: &[usize]) -> Result<Tensor> {
    let vocab_size = weights.config.vocab_size;
    let mut data = Vec::with_capacity(tokens.len() * weights.config.dim);
    for &t in tokens {
        if t >= vocab_size {
            return Err(Error::InvalidToken { token: t, vocab_size });
        }
        data.extend_from_slice(weights.token_embedding.row(t));
    }
    Tensor::new(vec![tokens.len(), weights.config.dim], data)
}

/// Logits `[len × vocab_size]` under sliding window attention.
pub fn oracle_forward_swa(weights: &DecoderWeights, tokens: &[usize]) -> Result<Tensor> {
    Ok(forward_with_history(weights, tokens, OracleMask::SlidingWindow)?.0)
}

/// Logits `[len × vocab_size]` under vanilla causal attention.
pub fn oracle_forward_causal(weights: &DecoderWeights, tokens: &[usize]) -> Result<Tensor> {
    Ok(forward_with_history(weights, tokens, OracleMask::Causal)?.0)
}

pub fn forward_with_history(
    weights: &DecoderWeights,
    tokens: &[usize],
    mask: OracleMask,
) -> Result<(Tensor, FullHistoryState)> {
    check_len(&weights.config, tokens.len())?;
    forward_embeddings(weights, embed(weights, tokens)?, mask)
}

/// Runs the stack on explicit input embeddings `[len × dim]`.
pub fn forward_embeddings(
    weights: &DecoderWeights,
    embeddings: Tensor,
    mask_kind: OracleMask,
) -> Result<(Tensor, FullHistoryState)> {
    let c = weights.config;
    let len = embeddings.shape()[0];
    check_len(&c, len)?;

    let positions: Vec<usize> = (0..len).collect();
    let window = match mask_kind {
        OracleMask::SlidingWindow => c.window_size,
        OracleMask::Causal => len,
    };
    let mask = build_swa_mask(&positions, &positions, window);
    let group = c.n_heads / c.n_kv_heads;
    let scale = 1.0 / (c.head_dim as f32).sqrt();
    let hd = c.head_dim;

    let mut history = FullHistoryState::default();
    let mut h = embeddings;
    for layer in &weights.layers {
        let xn = rms_norm(&h, &layer.attn_norm_gain, NORM_EPS)?;
        let q = rotate_rows(&matmul(&xn, &layer.wq)?, c.n_heads, hd)?;
        let k = rotate_rows(&matmul(&xn, &layer.wk)?, c.n_kv_heads, hd)?;
        let v = matmul(&xn, &layer.wv)?;

        let mut attn = vec![0.0f32; len * c.n_heads * hd];
        for i in 0..len {
            let visible: Vec<usize> = (0..len).filter(|&j| mask.is_admissible(i, j)).collect();
            for head in 0..c.n_heads {
                let kv = head / group;
                let q_vec = &q.row(i)[head * hd..(head + 1) * hd];
                let scores: Vec<f32> = visible
                    .iter()
                    .map(|&j| {
                        let k_vec = &k.row(j)[kv * hd..(kv + 1) * hd];
                        let mut s = 0.0f32;
                        for d in 0..hd {
                            s += q_vec[d] * k_vec[d];
                        }
                        s * scale
                    })
                    .collect();
                let probs = softmax_stable(&Tensor::vector(scores)?, None)?;
                let out = &mut attn[(i * c.n_heads + head) * hd..(i * c.n_heads + head + 1) * hd];
                for (&j, &p) in visible.iter().zip(probs.data()) {
                    let v_vec = &v.row(j)[kv * hd..(kv + 1) * hd];
                    for d in 0..hd {
                        out[d] += p * v_vec[d];
                    }
                }
            }
        }
        let attn = Tensor::new(vec![len, c.n_heads * hd], attn)?;
        h = add(&h, &matmul(&attn, &layer.wo)?)?;

        let xn = rms_norm(&h, &layer.ffn_norm_gain, NORM_EPS)?;
        let ffn = matmul(
            &silu_gate(&matmul(&xn, &layer.w1)?, &matmul(&xn, &layer.w3)?)?,
            &layer.w2,
        )?;
        h = add(&h, &ffn)?;

        history.keys.push(k);
        history.values.push(v);
    }
    let normed = rms_norm(&h, &weights.final_norm_gain, NORM_EPS)?;
    Ok((matmul(&normed, &weights.output_proj)?, history))
}

/// Applies rotary embedding to each row `[len × heads·hd]`, row `i` at position `i`.
fn rotate_rows(x: &Tensor, heads: usize, hd: usize) -> Result<Tensor> {
    let len = x.shape()[0];
    let mut out = Vec::with_capacity(x.len());
    for i in 0..len {
        let row = Tensor::new(vec![heads, hd], x.row(i).to_vec())?;
        out.extend(rope_apply(&row, i, ROPE_THETA)?.into_data());
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

/// Output positions whose logits move by more than [`REACH_THRESHOLD`]
/// when the input embedding at `perturb_position` is shifted by `epsilon`
/// in its first coordinate.
pub fn reach_probe(
    weights: &DecoderWeights,
    tokens: &[usize],
    perturb_position: usize,
    epsilon: f32,
) -> Result<Vec<usize>> {
    assert!(perturb_position < tokens.len() && epsilon > 0.0);
    let base = embed(weights, tokens)?;
    let mut shifted = base.clone().into_data();
    shifted[perturb_position * weights.config.dim] += epsilon;
    let shifted = Tensor::new(base.shape().to_vec(), shifted)?;

    let (a, _) = forward_embeddings(weights, base, OracleMask::SlidingWindow)?;
    let (b, _) = forward_embeddings(weights, shifted, OracleMask::SlidingWindow)?;
    Ok((0..tokens.len())
        .filter(|&i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .any(|(x, y)| (x - y).abs() > REACH_THRESHOLD)
        })
        .collect())
}

/// Generation driver over the oracle: every call recomputes the whole
/// history and returns the last row.
#[derive(Debug, Clone)]
pub struct OracleSession {
    weights: Arc<DecoderWeights>,
    mask: OracleMask,
    tokens: Vec<usize>,
}

impl OracleSession {
    pub fn new(weights: Arc<DecoderWeights>, mask: OracleMask) -> Self {
        Self {
            weights,
            mask,
            tokens: Vec::new(),
        }
    }

    fn last_logits(&self) -> Result<Tensor> {
        let (logits, _) = forward_with_history(&self.weights, &self.tokens, self.mask)?;
        Tensor::vector(logits.row(self.tokens.len() - 1).to_vec())
    }
}

impl Decoder for OracleSession {
    fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    fn next_position(&self) -> usize {
        self.tokens.len()
    }

    fn prefill(&mut self, prompt: &[usize]) -> Result<Tensor> {
        if !self.tokens.is_empty() {
            return Err(Error::SessionNotFresh(self.tokens.len()));
        }
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        self.tokens = prompt.to_vec();
        self.last_logits().inspect_err(|_| self.tokens.clear())
    }

    fn forward_decode(&mut self, token: usize) -> Result<Tensor> {
        self.tokens.push(token);
        self.last_logits().inspect_err(|_| {
            self.tokens.pop();
        })
    }
}
