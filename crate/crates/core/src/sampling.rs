//! Next-token selection from a logit row.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerSpec {
    Greedy,
    TopK { k: usize, temperature: f32, seed: u64 },
}

/// Index of the largest logit; the lowest id wins ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Stateful sampler built from a [`SamplerSpec`].
#[derive(Debug, Clone)]
pub struct Sampler {
    spec: SamplerSpec,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(spec: SamplerSpec, vocab_size: usize) -> Result<Self> {
        let seed = match spec {
            SamplerSpec::Greedy => 0,
            SamplerSpec::TopK { k, temperature, seed } => {
                if k == 0 || k > vocab_size {
                    return Err(Error::InvalidSampler(format!(
                        "top-k needs 1 <= k <= {vocab_size}, got {k}"
                    )));
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::InvalidSampler(format!(
                        "temperature must be positive, got {temperature}"
                    )));
                }
                seed
            }
        };
        Ok(Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self, logits: &[f32]) -> usize {
        match self.spec {
            SamplerSpec::Greedy => argmax(logits),
            SamplerSpec::TopK { k, temperature, .. } => {
                let mut order: Vec<usize> = (0..logits.len()).collect();
                // descending logit, ascending id on ties
                order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
                order.truncate(k);
                let top = logits[order[0]];
                let weights: Vec<f64> = order
                    .iter()
                    .map(|&i| (((logits[i] - top) / temperature) as f64).exp())
                    .collect();
                let dist = WeightedIndex::new(&weights).expect("top weight is exp(0) = 1");
                order[dist.sample(&mut self.rng)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
        assert_eq!(argmax(&[-1.0, -1.0]), 0);
    }

    #[test]
    fn top1_equals_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sampler = Sampler::new(
            SamplerSpec::TopK { k: 1, temperature: 0.7, seed: 9 },
            64,
        )
        .unwrap();
        for _ in 0..100 {
            let logits: Vec<f32> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_eq!(sampler.sample(&logits), argmax(&logits));
        }
    }

    #[test]
    fn top_k_stays_in_top_k_and_is_seeded() {
        let logits: Vec<f32> = (0..32).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut order: Vec<usize> = (0..32).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        let allowed = &order[..4];

        let spec = SamplerSpec::TopK { k: 4, temperature: 1.5, seed: 3 };
        let mut a = Sampler::new(spec, 32).unwrap();
        let mut b = Sampler::new(spec, 32).unwrap();
        for _ in 0..200 {
            let x = a.sample(&logits);
            assert!(allowed.contains(&x));
            assert_eq!(x, b.sample(&logits));
        }
    }

    #[test]
    fn invalid_specs() {
        let bad_k = SamplerSpec::TopK { k: 0, temperature: 1.0, seed: 0 };
        assert!(Sampler::new(bad_k, 10).is_err());
        let big_k = SamplerSpec::TopK { k: 11, temperature: 1.0, seed: 0 };
        assert!(Sampler::new(big_k, 10).is_err());
        let cold = SamplerSpec::TopK { k: 2, temperature: 0.0, seed: 0 };
        assert!(Sampler::new(cold, 10).is_err());
        assert!(Sampler::new(SamplerSpec::Greedy, 10).is_ok());
    }
}
