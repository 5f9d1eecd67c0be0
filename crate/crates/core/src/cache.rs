//! Per-layer, per-KV-head key/value storage indexed by absolute position.

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct HeadRows {
    /// `len * d_head` keys, already position-rotated.
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Key/value cache for every layer and KV head.
///
/// All heads always hold the same number of positions, `0..len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    heads: Vec<HeadRows>,
    n_layers: usize,
    n_kv_heads: usize,
    d_head: usize,
    max_seq_len: usize,
    len: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        let heads = (0..config.n_layers * config.n_kv_heads)
            .map(|_| HeadRows {
                keys: Vec::new(),
                values: Vec::new(),
            })
            .collect();
        Self {
            heads,
            n_layers: config.n_layers,
            n_kv_heads: config.n_kv_heads,
            d_head: config.d_head,
            max_seq_len: config.max_seq_len,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Fails unless `extra` more positions fit.
    pub fn reserve(&self, extra: usize) -> Result<()> {
        let needed = self.len + extra;
        if needed > self.max_seq_len {
            return Err(Error::Capacity {
                needed,
                max: self.max_seq_len,
            });
        }
        Ok(())
    }

    /// Discards every position `>= len`.
    pub fn truncate(&mut self, len: usize) -> Result<()> {
        if len > self.len {
            return Err(Error::Rollback { to: len, len: self.len });
        }
        let d = self.d_head;
        for head in &mut self.heads {
            head.keys.truncate(len * d);
            head.values.truncate(len * d);
        }
        self.len = len;
        Ok(())
    }

    pub fn key(&self, layer: usize, kv_head: usize, pos: usize) -> &[f64] {
        let d = self.d_head;
        &self.head(layer, kv_head).keys[pos * d..(pos + 1) * d]
    }

    pub fn value(&self, layer: usize, kv_head: usize, pos: usize) -> &[f64] {
        let d = self.d_head;
        &self.head(layer, kv_head).values[pos * d..(pos + 1) * d]
    }

    fn head(&self, layer: usize, kv_head: usize) -> &HeadRows {
        &self.heads[layer * self.n_kv_heads + kv_head]
    }

    /// Appends one row to a single (layer, head) while a forward pass is in
    /// flight. Callers must bring every head to the same length and then call
    /// [`KvCache::commit_rows`].
    pub(crate) fn push_row(&mut self, layer: usize, kv_head: usize, key: &[f64], value: &[f64]) {
        let head = &mut self.heads[layer * self.n_kv_heads + kv_head];
        head.keys.extend_from_slice(key);
        head.values.extend_from_slice(value);
    }

    pub(crate) fn commit_rows(&mut self, count: usize) {
        self.len += count;
        debug_assert!(self.heads.iter().all(|h| h.keys.len() == self.len * self.d_head));
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }
}
