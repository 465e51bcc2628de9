//! The decoder stack: weights, per-sequence generation sessions over
//! rolling caches, chunked pre-fill and the autoregressive loop.
//!
//! Layer layout follows the Llama baseline: pre-norm RMS normalization,
//! rotary embeddings on queries and keys, grouped-query attention and a
//! gated SiLU feed-forward block, each added back onto the residual stream.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attention::{
    build_prefill_mask, build_swa_mask, full_pair_count, gqa_attend, score_pair_count, HeadGrouping,
};
use crate::cache::RollingKvCache;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::sampling::{Sampler, SamplerSpec};
use crate::tensor::{matmul, rms_norm, rope_in_place, silu_gate, Tensor, NORM_EPS, ROPE_THETA};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_gain: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm_gain: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.attn_norm_gain,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm_gain,
            &self.w1,
            &self.w2,
            &self.w3,
        ]
    }
}

/// Immutable weight set bound to one [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Tensor,
    pub output_proj: Tensor,
}

/// Tensor shapes in serialization order, with a flag marking norm gains.
pub(crate) fn tensor_layout(config: &ModelConfig) -> Vec<(Vec<usize>, bool)> {
    let c = config;
    let q_width = c.n_heads * c.head_dim;
    let kv_width = c.n_kv_heads * c.head_dim;
    let mut shapes = vec![(vec![c.vocab_size, c.dim], false)];
    for _ in 0..c.n_layers {
        shapes.extend([
            (vec![c.dim], true),
            (vec![c.dim, q_width], false),
            (vec![c.dim, kv_width], false),
            (vec![c.dim, kv_width], false),
            (vec![q_width, c.dim], false),
            (vec![c.dim], true),
            (vec![c.dim, c.hidden_dim], false),
            (vec![c.hidden_dim, c.dim], false),
            (vec![c.dim, c.hidden_dim], false),
        ]);
    }
    shapes.push((vec![c.dim], true));
    shapes.push((vec![c.dim, c.vocab_size], false));
    shapes
}

impl DecoderWeights {
    /// Seeded random weights: projections drawn from `N(0, 1)` scaled by
    /// `0.02 / sqrt(n_layers)`, norm gains set to 1.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self> {
        let config = config.validated()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.02 / (config.n_layers as f32).sqrt();
        let tensors = tensor_layout(&config)
            .into_iter()
            .map(|(shape, is_gain)| {
                let n: usize = shape.iter().product();
                let data = if is_gain {
                    vec![1.0; n]
                } else {
                    (0..n)
                        .map(|_| {
                            let z: f32 = StandardNormal.sample(&mut rng);
                            z * scale
                        })
                        .collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config, tensors)
    }

    /// Assembles weights from tensors given in serialization order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let layout = tensor_layout(&config);
        if tensors.len() != layout.len() {
            return Err(Error::WeightFile(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (t, (shape, _)) in tensors.iter().zip(&layout) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "decoder weights",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let token_embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm_gain: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm_gain: next(),
                w1: next(),
                w2: next(),
                w3: next(),
            })
            .collect();
        let final_norm_gain = next();
        let output_proj = next();
        Ok(Self {
            config,
            token_embedding,
            layers,
            final_norm_gain,
            output_proj,
        })
    }

    /// All tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.final_norm_gain);
        out.push(&self.output_proj);
        out
    }

    pub fn element_count(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }

    pub fn embedding_row(&self, token: usize) -> &[f32] {
        self.token_embedding.row(token)
    }
}

/// One sequence's decode state over shared weights.
#[derive(Debug, Clone)]
pub struct GenerationSession {
    weights: Arc<DecoderWeights>,
    caches: Vec<RollingKvCache>,
    next_position: usize,
    grouping: HeadGrouping,
    attention_window: usize,
    peak_score_entries: usize,
}

/// Shared surface of the rolling-cache engine and the full-history oracle
/// sessions so one generation loop can drive either.
pub trait Decoder {
    fn config(&self) -> &ModelConfig;
    fn next_position(&self) -> usize;
    /// Consumes the whole prompt; returns logits for its last position.
    fn prefill(&mut self, prompt: &[usize]) -> Result<Tensor>;
    /// Consumes one token at `next_position`; returns its logits.
    fn forward_decode(&mut self, token: usize) -> Result<Tensor>;
}

impl GenerationSession {
    pub fn new(weights: Arc<DecoderWeights>) -> Self {
        let config = weights.config;
        Self {
            caches: (0..config.n_layers).map(|_| RollingKvCache::new(&config)).collect(),
            next_position: 0,
            grouping: HeadGrouping::new(config.n_heads, config.n_kv_heads)
                .expect("weights carry a validated config"),
            attention_window: config.window_size,
            peak_score_entries: 0,
            weights,
        }
    }

    /// Fault injection for verification tooling: attends with a window
    /// other than the configured one while the cache keeps `window_size`
    /// slots. Only windows up to `window_size` can be served.
    #[doc(hidden)]
    pub fn with_attention_window(mut self, window: usize) -> Self {
        assert!((1..=self.weights.config.window_size).contains(&window));
        self.attention_window = window;
        self
    }

    pub fn weights(&self) -> &Arc<DecoderWeights> {
        &self.weights
    }

    pub fn caches(&self) -> &[RollingKvCache] {
        &self.caches
    }

    pub fn total_cache_bytes(&self) -> usize {
        self.caches.iter().map(RollingKvCache::allocated_bytes).sum()
    }

    /// Largest per-head score matrix (`n_queries × n_keys`) built so far.
    pub fn peak_score_entries(&self) -> usize {
        self.peak_score_entries
    }

    fn check_token(&self, token: usize) -> Result<()> {
        let vocab_size = self.weights.config.vocab_size;
        if token >= vocab_size {
            return Err(Error::InvalidToken { token, vocab_size });
        }
        Ok(())
    }

    /// Runs positions `[start, start + tokens.len())` through the stack.
    /// Returns the final hidden row of the block, un-normalized.
    fn run_block(&mut self, start: usize, tokens: &[usize]) -> Result<Vec<f32>> {
        let weights = Arc::clone(&self.weights);
        let c = weights.config;
        let n = tokens.len();
        let (hd, n_heads, n_kv) = (c.head_dim, c.n_heads, c.n_kv_heads);

        let embed: Vec<f32> = tokens
            .iter()
            .flat_map(|&t| weights.embedding_row(t).iter().copied())
            .collect();
        let mut h = Tensor::new(vec![n, c.dim], embed)?;

        for (layer, cache) in weights.layers.iter().zip(self.caches.iter_mut()) {
            let xn = rms_norm(&h, &layer.attn_norm_gain, NORM_EPS)?;
            let mut q = matmul(&xn, &layer.wq)?.into_data();
            let mut k = matmul(&xn, &layer.wk)?.into_data();
            let v = matmul(&xn, &layer.wv)?.into_data();
            for i in 0..n {
                rope_in_place(&mut q[i * n_heads * hd..(i + 1) * n_heads * hd], hd, start + i, ROPE_THETA);
                rope_in_place(&mut k[i * n_kv * hd..(i + 1) * n_kv * hd], hd, start + i, ROPE_THETA);
            }
            let q = head_major(&q, n, n_heads, hd)?;
            let queries: Vec<usize> = (start..start + n).collect();

            let (keys, values, mask) = if n == 1 {
                // the token's own K/V goes into the cache before it attends
                cache.append_slices(start, &k, &v)?;
                let view = cache.window_view()?;
                let mask = build_swa_mask(&queries, &view.positions, self.attention_window);
                (view.keys, view.values, mask)
            } else {
                let block_k = head_major(&k, n, n_kv, hd)?;
                let block_v = head_major(&v, n, n_kv, hd)?;
                let (keys, values, cached) = if cache.filled() > 0 {
                    let view = cache.window_view()?;
                    (
                        concat_keys(&view.keys, &block_k)?,
                        concat_keys(&view.values, &block_v)?,
                        view.positions,
                    )
                } else {
                    (block_k, block_v, Vec::new())
                };
                let mask = build_prefill_mask(start, n, &cached, self.attention_window)?;
                let rows = vec![n, n_kv, hd];
                cache.prefill_bulk(
                    start,
                    &Tensor::new(rows.clone(), k)?,
                    &Tensor::new(rows, v)?,
                )?;
                (keys, values, mask)
            };
            self.peak_score_entries = self
                .peak_score_entries
                .max(mask.n_queries() * mask.n_keys());

            let attn = gqa_attend(&q, &keys, &values, &mask, &self.grouping)?;
            let attn = position_major(attn.data(), n_heads, n, hd)?;
            add_in_place(&mut h, &matmul(&attn, &layer.wo)?);

            let xn = rms_norm(&h, &layer.ffn_norm_gain, NORM_EPS)?;
            let gated = silu_gate(&matmul(&xn, &layer.w1)?, &matmul(&xn, &layer.w3)?)?;
            add_in_place(&mut h, &matmul(&gated, &layer.w2)?);
        }
        Ok(h.row(n - 1).to_vec())
    }

    fn logits(&self, hidden: Vec<f32>) -> Result<Tensor> {
        let w = &self.weights;
        let h = Tensor::new(vec![1, w.config.dim], hidden)?;
        let normed = rms_norm(&h, &w.final_norm_gain, NORM_EPS)?;
        matmul(&normed, &w.output_proj)?.reshape(vec![w.config.vocab_size])
    }
}

impl Decoder for GenerationSession {
    fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    fn next_position(&self) -> usize {
        self.next_position
    }

    fn forward_decode(&mut self, token: usize) -> Result<Tensor> {
        let context_len = self.weights.config.context_len;
        if self.next_position >= context_len {
            return Err(Error::ContextOverflow {
                position: self.next_position,
                context_len,
            });
        }
        self.check_token(token)?;
        let hidden = self.run_block(self.next_position, &[token])?;
        self.next_position += 1;
        self.logits(hidden)
    }

    /// Pre-fills the caches in window-sized chunks. Each chunk attends the
    /// cached window plus itself through the combined pre-fill mask.
    fn prefill(&mut self, prompt: &[usize]) -> Result<Tensor> {
        if self.next_position != 0 {
            return Err(Error::SessionNotFresh(self.next_position));
        }
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let context_len = self.weights.config.context_len;
        if prompt.len() > context_len {
            return Err(Error::ContextOverflow {
                position: prompt.len(),
                context_len,
            });
        }
        for &t in prompt {
            self.check_token(t)?;
        }
        let mut last = Vec::new();
        for (start, end) in chunk_prompt(prompt.len(), self.weights.config.window_size) {
            last = self.run_block(start, &prompt[start..end])?;
            self.next_position = end;
        }
        self.logits(last)
    }
}

/// Half-open chunk ranges of length `window` covering `[0, prompt_len)`;
/// the final chunk may be shorter.
pub fn chunk_prompt(prompt_len: usize, window: usize) -> Vec<(usize, usize)> {
    assert!(prompt_len >= 1 && window >= 1);
    (0..prompt_len)
        .step_by(window)
        .map(|s| (s, (s + window).min(prompt_len)))
        .collect()
}

/// `[n × heads × hd]` rows to `[heads × n × hd]`.
fn head_major(rows: &[f32], n: usize, heads: usize, hd: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(rows.len());
    for g in 0..heads {
        for i in 0..n {
            out.extend_from_slice(&rows[(i * heads + g) * hd..(i * heads + g + 1) * hd]);
        }
    }
    Tensor::new(vec![heads, n, hd], out)
}

/// `[heads × n × hd]` to `[n × heads·hd]`.
fn position_major(data: &[f32], heads: usize, n: usize, hd: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(data.len());
    for i in 0..n {
        for h in 0..heads {
            out.extend_from_slice(&data[(h * n + i) * hd..(h * n + i + 1) * hd]);
        }
    }
    Tensor::new(vec![n, heads * hd], out)
}

/// Concatenates two `[heads × _ × hd]` tensors along the position axis.
fn concat_keys(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (heads, na, hd) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let nb = b.shape()[1];
    let mut out = Vec::with_capacity(a.len() + b.len());
    for g in 0..heads {
        out.extend_from_slice(&a.data()[g * na * hd..(g + 1) * na * hd]);
        out.extend_from_slice(&b.data()[g * nb * hd..(g + 1) * nb * hd]);
    }
    Tensor::new(vec![heads, na + nb, hd], out)
}

fn add_in_place(h: &mut Tensor, delta: &Tensor) {
    let sum: Vec<f32> = h.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
    *h = Tensor::new(h.shape().to_vec(), sum).expect("same shape");
}

/// Timing and attention bookkeeping for one decoded token.
#[derive(Debug, Clone, Serialize)]
pub struct StepStats {
    pub position: usize,
    pub token: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationOutput {
    pub tokens: Vec<usize>,
    pub truncated: bool,
    pub steps: Vec<StepStats>,
    pub prefill_seconds: f64,
    pub wall_seconds: f64,
    pub tokens_per_second: f64,
    /// Positions whose K/V went through the stack (prompt plus decoded tokens).
    pub positions_processed: usize,
    pub cache_bytes_per_layer: usize,
    pub total_cache_bytes: usize,
    pub swa_score_pairs: u64,
    pub full_score_pairs: u64,
}

/// Pre-fills `prompt`, then decodes up to `max_tokens` tokens. Running out
/// of context stops early with `truncated` set.
pub fn generate<D: Decoder>(
    decoder: &mut D,
    prompt: &[usize],
    max_tokens: usize,
    sampler: SamplerSpec,
) -> Result<GenerationOutput> {
    let config = *decoder.config();
    let mut sampler = Sampler::new(sampler, config.vocab_size)?;

    let started = Instant::now();
    let mut logits = decoder.prefill(prompt)?;
    let prefill_seconds = started.elapsed().as_secs_f64();

    let mut tokens = Vec::with_capacity(max_tokens);
    let mut steps = Vec::with_capacity(max_tokens);
    let mut truncated = false;
    let mut step_started = Instant::now();
    while tokens.len() < max_tokens {
        let token = sampler.sample(logits.data());
        tokens.push(token);
        if tokens.len() == max_tokens {
            steps.push(StepStats {
                position: decoder.next_position(),
                token,
                seconds: step_started.elapsed().as_secs_f64(),
            });
            break;
        }
        if decoder.next_position() >= config.context_len {
            truncated = true;
            steps.push(StepStats {
                position: decoder.next_position(),
                token,
                seconds: step_started.elapsed().as_secs_f64(),
            });
            break;
        }
        let position = decoder.next_position();
        logits = decoder.forward_decode(token)?;
        steps.push(StepStats {
            position,
            token,
            seconds: step_started.elapsed().as_secs_f64(),
        });
        step_started = Instant::now();
    }

    let wall_seconds = started.elapsed().as_secs_f64();
    let positions = decoder.next_position();
    let cache_bytes_per_layer = config.cache_floats_per_layer() * std::mem::size_of::<f32>();
    Ok(GenerationOutput {
        truncated,
        prefill_seconds,
        wall_seconds,
        tokens_per_second: if wall_seconds > 0.0 {
            tokens.len() as f64 / wall_seconds
        } else {
            0.0
        },
        positions_processed: positions,
        cache_bytes_per_layer,
        total_cache_bytes: cache_bytes_per_layer * config.n_layers,
        swa_score_pairs: score_pair_count(positions as u64, config.window_size as u64),
        full_score_pairs: full_pair_count(positions as u64),
        tokens,
        steps,
    })
}
