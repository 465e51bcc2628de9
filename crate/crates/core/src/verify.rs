//! End-to-end self checks of the rolling-cache engine against the
//! full-history oracle, runnable at any config the oracle accepts.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{Decoder, DecoderWeights, GenerationSession};
use crate::oracle::{self, OracleMask, HISTORY_LIMIT};

/// Per-step decode logits must match the oracle this closely.
pub const ORACLE_TOLERANCE: f32 = 1e-5;
/// Pre-fill final logits must match token-by-token decode this closely.
pub const PREFILL_TOLERANCE: f32 = 1e-6;
/// Embedding shift used by the reach check.
pub const REACH_EPSILON: f32 = 1e-2;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub config: ModelConfig,
    pub seed: u64,
    /// Attend with this window instead of `window_size` (fault injection).
    pub attention_window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub max_error: Option<f32>,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "pass" } else { "FAIL" };
        write!(f, "{}: {}: {verdict}", self.name, self.detail)
    }
}

pub fn random_tokens(vocab_size: usize, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab_size)).collect()
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

struct Harness {
    weights: Arc<DecoderWeights>,
    attention_window: Option<usize>,
    seed: u64,
}

impl Harness {
    fn session(&self) -> GenerationSession {
        let s = GenerationSession::new(Arc::clone(&self.weights));
        match self.attention_window {
            Some(w) => s.with_attention_window(w),
            None => s,
        }
    }

    fn config(&self) -> ModelConfig {
        self.weights.config
    }

    /// Longest sequence both the context and the oracle guard allow.
    fn cap(&self, len: usize) -> usize {
        let c = self.config();
        len.min(c.context_len).min(HISTORY_LIMIT / c.dim).max(1)
    }

    fn decode_against(&self, tokens: &[usize], mask: OracleMask) -> Result<f32> {
        let (expected, _) = oracle::forward_with_history(&self.weights, tokens, mask)?;
        let mut session = self.session();
        let mut worst = 0.0f32;
        for (i, &t) in tokens.iter().enumerate() {
            let got = session.forward_decode(t)?;
            worst = worst.max(max_abs(got.data(), expected.row(i)));
        }
        Ok(worst)
    }

    fn oracle_equivalence(&self) -> Result<CheckOutcome> {
        let len = self.cap(8 * self.config().window_size);
        let tokens = random_tokens(self.config().vocab_size, len, self.seed);
        let err = self.decode_against(&tokens, OracleMask::SlidingWindow)?;
        Ok(CheckOutcome {
            name: "oracle-equivalence",
            passed: err <= ORACLE_TOLERANCE,
            detail: format!("{len} decode steps, max-abs logit error {err:.3e} (tol {ORACLE_TOLERANCE:.0e})"),
            max_error: Some(err),
        })
    }

    fn vanilla_degeneracy(&self) -> Result<CheckOutcome> {
        let len = self.cap(self.config().window_size);
        let tokens = random_tokens(self.config().vocab_size, len, self.seed + 1);
        let err = self.decode_against(&tokens, OracleMask::Causal)?;
        Ok(CheckOutcome {
            name: "vanilla-degeneracy",
            passed: err <= ORACLE_TOLERANCE,
            detail: format!("{len} tokens within the window, max-abs error vs causal {err:.3e}"),
            max_error: Some(err),
        })
    }

    fn prefill_equivalence(&self) -> Result<CheckOutcome> {
        let w = self.config().window_size;
        let mut lengths = vec![1, w.saturating_sub(1), w, w + 1, 3 * w, 3 * w + 2];
        lengths.retain(|&l| l >= 1 && l <= self.config().context_len);
        lengths.dedup();

        let mut worst = 0.0f32;
        let mut caches_match = true;
        for &len in &lengths {
            let prompt = random_tokens(self.config().vocab_size, len, self.seed + 2 + len as u64);
            let mut chunked = self.session();
            let got = chunked.prefill(&prompt)?;
            let mut stepped = self.session();
            let mut expected = None;
            for &t in &prompt {
                expected = Some(stepped.forward_decode(t)?);
            }
            worst = worst.max(max_abs(got.data(), expected.expect("non-empty").data()));
            caches_match &= chunked.caches() == stepped.caches()
                && chunked.next_position() == stepped.next_position();
        }
        Ok(CheckOutcome {
            name: "prefill-equivalence",
            passed: worst <= PREFILL_TOLERANCE && caches_match,
            detail: format!(
                "prompt lengths {lengths:?}, max-abs error {worst:.3e}, caches identical {caches_match}"
            ),
            max_error: Some(worst),
        })
    }

    fn reach(&self) -> Result<CheckOutcome> {
        let c = self.config();
        let reach = c.n_layers * (c.window_size - 1);
        let len = self.cap(reach + 2);
        let tokens = random_tokens(c.vocab_size, len, self.seed + 3);
        let affected = oracle::reach_probe(&self.weights, &tokens, 0, REACH_EPSILON)?;
        let expected: Vec<usize> = (0..=reach.min(len - 1)).collect();
        let boundary_exact = affected == expected;
        Ok(CheckOutcome {
            name: "reach",
            passed: boundary_exact,
            detail: if boundary_exact {
                format!("affected ≤ {reach}, boundary exact")
            } else {
                format!("affected ≤ {reach}, boundary exact (observed {affected:?})")
            },
            max_error: None,
        })
    }

    fn cache_bound(&self) -> Result<CheckOutcome> {
        let c = self.config();
        let len = self.cap(8 * c.window_size);
        let tokens = random_tokens(c.vocab_size, len, self.seed + 4);
        let mut session = self.session();
        let initial = session.total_cache_bytes();
        let mut after_window = initial;
        for (i, &t) in tokens.iter().enumerate() {
            session.forward_decode(t)?;
            if i + 1 == c.window_size.min(len) {
                after_window = session.total_cache_bytes();
            }
        }
        let retained_ok = session
            .caches()
            .iter()
            .all(|cache| cache.filled() == c.window_size.min(len));
        let (_, history) = oracle::forward_with_history(&self.weights, &tokens, OracleMask::SlidingWindow)?;
        let ratio = history.entries_per_layer() as f64 / session.caches()[0].filled() as f64;
        let passed = retained_ok
            && after_window == initial
            && session.total_cache_bytes() == initial
            && ratio == c.cache_memory_ratio(len);
        Ok(CheckOutcome {
            name: "cache-bound",
            passed,
            detail: format!(
                "{len} tokens, {} cache bytes constant, unbounded/rolling entries {ratio}",
                session.total_cache_bytes()
            ),
            max_error: None,
        })
    }
}

/// Runs every check, in a fixed order.
pub fn run_checks(options: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let weights = Arc::new(DecoderWeights::init_random(&options.config, options.seed)?);
    let h = Harness {
        weights,
        attention_window: options.attention_window,
        seed: options.seed,
    };
    Ok(vec![
        h.oracle_equivalence()?,
        h.vanilla_degeneracy()?,
        h.prefill_equivalence()?,
        h.reach()?,
        h.cache_bound()?,
    ])
}
