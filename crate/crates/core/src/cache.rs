//! Rolling buffer KV cache.
//!
//! One cache per layer with a fixed `W` slots. The key/value rows for
//! absolute position `i` live in slot `i mod W`; once `i >= W` every write
//! evicts the entry written `W` steps earlier, so storage stops growing.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RollingKvCache {
    capacity: usize,
    n_kv_heads: usize,
    head_dim: usize,
    /// `[n_kv_heads × capacity × head_dim]`
    keys: Vec<f32>,
    values: Vec<f32>,
    next_position: usize,
}

/// Retained entries gathered in ascending position order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowView {
    pub positions: Vec<usize>,
    /// `[n_kv_heads × positions.len() × head_dim]`
    pub keys: Tensor,
    pub values: Tensor,
}

impl WindowView {
    /// Entry `i` as `(position, k_row, v_row)`, rows shaped `[n_kv_heads × head_dim]`.
    pub fn entry(&self, i: usize) -> (usize, Vec<f32>, Vec<f32>) {
        let [n_kv, n, hd] = [self.keys.shape()[0], self.keys.shape()[1], self.keys.shape()[2]];
        let gather = |t: &Tensor| -> Vec<f32> {
            (0..n_kv)
                .flat_map(|g| t.data()[(g * n + i) * hd..(g * n + i + 1) * hd].iter().copied())
                .collect()
        };
        (self.positions[i], gather(&self.keys), gather(&self.values))
    }
}

impl RollingKvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self::with_dims(config.window_size, config.n_kv_heads, config.head_dim)
    }

    pub fn with_dims(capacity: usize, n_kv_heads: usize, head_dim: usize) -> Self {
        assert!(capacity >= 1 && n_kv_heads >= 1 && head_dim >= 1);
        let n = n_kv_heads * capacity * head_dim;
        Self {
            capacity,
            n_kv_heads,
            head_dim,
            keys: vec![0.0; n],
            values: vec![0.0; n],
            next_position: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn filled(&self) -> usize {
        self.next_position.min(self.capacity)
    }

    pub fn slot_of(&self, position: usize) -> usize {
        position % self.capacity
    }

    /// Floats held by the key and value buffers.
    pub fn allocated_floats(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    pub fn allocated_bytes(&self) -> usize {
        self.allocated_floats() * std::mem::size_of::<f32>()
    }

    /// `[max(0, next - W), next)`.
    pub fn retained_positions(&self) -> std::ops::Range<usize> {
        self.next_position - self.filled()..self.next_position
    }

    fn row_len(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Stores rows shaped `[n_kv_heads × head_dim]` for `position`, which
    /// must be the next position in sequence.
    pub fn append(&mut self, position: usize, k_row: &Tensor, v_row: &Tensor) -> Result<()> {
        for row in [k_row, v_row] {
            if row.len() != self.row_len() {
                return Err(Error::ShapeMismatch {
                    op: "cache append",
                    lhs: vec![self.n_kv_heads, self.head_dim],
                    rhs: row.shape().to_vec(),
                });
            }
        }
        self.append_slices(position, k_row.data(), v_row.data())
    }

    pub(crate) fn append_slices(&mut self, position: usize, k: &[f32], v: &[f32]) -> Result<()> {
        if position != self.next_position {
            return Err(Error::OutOfOrder {
                expected: self.next_position,
                given: position,
            });
        }
        debug_assert_eq!(k.len(), self.row_len());
        let slot = self.slot_of(position);
        let hd = self.head_dim;
        for g in 0..self.n_kv_heads {
            let dst = (g * self.capacity + slot) * hd;
            self.keys[dst..dst + hd].copy_from_slice(&k[g * hd..(g + 1) * hd]);
            self.values[dst..dst + hd].copy_from_slice(&v[g * hd..(g + 1) * hd]);
        }
        self.next_position += 1;
        Ok(())
    }

    /// Writes a block of rows `[len × n_kv_heads × head_dim]` starting at
    /// `start_position`; same end state as appending them one by one.
    pub fn prefill_bulk(&mut self, start_position: usize, k_block: &Tensor, v_block: &Tensor) -> Result<()> {
        if start_position != self.next_position {
            return Err(Error::OutOfOrder {
                expected: self.next_position,
                given: start_position,
            });
        }
        let row = self.row_len();
        if k_block.shape() != v_block.shape() || !k_block.len().is_multiple_of(row) {
            return Err(Error::ShapeMismatch {
                op: "cache prefill_bulk",
                lhs: k_block.shape().to_vec(),
                rhs: v_block.shape().to_vec(),
            });
        }
        for (i, (k, v)) in k_block
            .data()
            .chunks(row)
            .zip(v_block.data().chunks(row))
            .enumerate()
        {
            self.append_slices(start_position + i, k, v)?;
        }
        Ok(())
    }

    /// Gathers the retained entries oldest first, each read from slot `pos mod W`.
    pub fn window_view(&self) -> Result<WindowView> {
        let n = self.filled();
        if n == 0 {
            return Err(Error::EmptyCache);
        }
        let positions: Vec<usize> = self.retained_positions().collect();
        let hd = self.head_dim;
        let mut keys = Vec::with_capacity(self.n_kv_heads * n * hd);
        let mut values = Vec::with_capacity(self.n_kv_heads * n * hd);
        for g in 0..self.n_kv_heads {
            for &p in &positions {
                let src = (g * self.capacity + self.slot_of(p)) * hd;
                keys.extend_from_slice(&self.keys[src..src + hd]);
                values.extend_from_slice(&self.values[src..src + hd]);
            }
        }
        let shape = vec![self.n_kv_heads, n, hd];
        Ok(WindowView {
            positions,
            keys: Tensor::new(shape.clone(), keys)?,
            values: Tensor::new(shape, values)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(position: usize, n_kv: usize, hd: usize, salt: f32) -> Tensor {
        let data = (0..n_kv * hd)
            .map(|j| position as f32 * 100.0 + j as f32 + salt)
            .collect();
        Tensor::new(vec![n_kv, hd], data).unwrap()
    }

    fn fill(cache: &mut RollingKvCache, upto: usize) {
        for p in cache.next_position()..upto {
            cache
                .append(p, &row(p, 2, 3, 0.0), &row(p, 2, 3, 0.5))
                .unwrap();
        }
    }

    #[test]
    fn new_cache_is_empty() {
        let cfg = ModelConfig {
            window_size: 4,
            ..ModelConfig::toy()
        };
        let cache = RollingKvCache::new(&cfg);
        assert_eq!(cache.capacity(), 4);
        assert_eq!(cache.filled(), 0);
        assert_eq!(cache.next_position(), 0);
        assert!(matches!(cache.window_view(), Err(Error::EmptyCache)));
        assert_eq!(
            cache.allocated_floats(),
            2 * cfg.n_kv_heads * 4 * cfg.head_dim
        );
        assert_eq!(cache.allocated_floats(), cfg.cache_floats_per_layer());

        let single = RollingKvCache::with_dims(1, 2, 3);
        assert_eq!(single.capacity(), 1);
    }

    #[test]
    fn slots_follow_position_mod_w() {
        let cache = RollingKvCache::with_dims(4, 2, 3);
        assert_eq!(cache.slot_of(0), 0);
        assert_eq!(cache.slot_of(3), 3);
        assert_eq!(cache.slot_of(4), 0);
        assert_eq!(cache.slot_of(5), 1);
    }

    #[test]
    fn wrap_evicts_oldest() {
        let mut cache = RollingKvCache::with_dims(4, 2, 3);
        fill(&mut cache, 3);
        assert_eq!(cache.window_view().unwrap().positions, vec![0, 1, 2]);

        fill(&mut cache, 5);
        let view = cache.window_view().unwrap();
        assert_eq!(view.positions, vec![1, 2, 3, 4]);
        // position 4 overwrote slot 0
        assert_eq!(cache.keys[0], 400.0);

        fill(&mut cache, 6);
        let view = cache.window_view().unwrap();
        assert_eq!(view.positions, vec![2, 3, 4, 5]);
        for (i, p) in [2usize, 3, 4, 5].into_iter().enumerate() {
            let (pos, k, v) = view.entry(i);
            assert_eq!(pos, p);
            assert_eq!(k, row(p, 2, 3, 0.0).into_data());
            assert_eq!(v, row(p, 2, 3, 0.5).into_data());
        }
    }

    #[test]
    fn out_of_order_writes_are_rejected() {
        let mut cache = RollingKvCache::with_dims(4, 2, 3);
        fill(&mut cache, 2);
        let err = cache
            .append(3, &row(3, 2, 3, 0.0), &row(3, 2, 3, 0.0))
            .unwrap_err();
        assert!(matches!(err, Error::OutOfOrder { expected: 2, given: 3 }));
        let err = cache
            .append(1, &row(1, 2, 3, 0.0), &row(1, 2, 3, 0.0))
            .unwrap_err();
        assert!(matches!(err, Error::OutOfOrder { expected: 2, given: 1 }));
    }

    #[test]
    fn bulk_of_w_rows_replaces_every_slot() {
        let mut cache = RollingKvCache::with_dims(4, 2, 3);
        fill(&mut cache, 4);
        let block: Vec<f32> = (4..8).flat_map(|p| row(p, 2, 3, 0.0).into_data()).collect();
        let block = Tensor::new(vec![4, 2, 3], block).unwrap();
        cache.prefill_bulk(4, &block, &block).unwrap();
        assert_eq!(cache.window_view().unwrap().positions, vec![4, 5, 6, 7]);
        assert!(cache.keys.iter().all(|&v| v >= 400.0));
    }

    #[test]
    fn bulk_rejects_wrong_start() {
        let mut cache = RollingKvCache::with_dims(4, 2, 3);
        let block = Tensor::zeros(vec![2, 2, 3]).unwrap();
        assert!(matches!(
            cache.prefill_bulk(1, &block, &block),
            Err(Error::OutOfOrder { expected: 0, given: 1 })
        ));
    }

    #[test]
    fn storage_never_grows() {
        let mut cache = RollingKvCache::with_dims(3, 2, 3);
        let before = cache.allocated_floats();
        fill(&mut cache, 100);
        assert_eq!(cache.allocated_floats(), before);
        assert_eq!(cache.filled(), 3);
    }
}
