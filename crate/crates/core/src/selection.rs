//! Text-guided top-K selection of visual cache rows.
//!
//! For every layer and KV head, each visual position is scored by the
//! attention it receives from the textual prompt during prefill, averaged
//! over the `m_t` textual queries and summed over the query heads that share
//! the KV head. The `K` highest-scoring visual positions are kept for the
//! sparse draft; textual and generated positions are always kept. The
//! selection is computed once and never revised while decoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::AttentionRecord;

/// Retained visual positions per `(layer, kv_head)`, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseSelection {
    /// Requested K, before clamping to `m_v`.
    k: usize,
    m_v: usize,
    m_t: usize,
    n_kv_heads: usize,
    /// `[layer * n_kv_heads + kv_head]`
    entries: Vec<Vec<usize>>,
}

/// One `(layer, kv_head)` entry of the JSON form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub layer: usize,
    pub kv_head: usize,
    pub indices: Vec<usize>,
}

/// Mean attention each visual position receives from the textual queries,
/// summed over the query heads grouped onto `kv_head`.
pub fn score_visual_tokens(record: &AttentionRecord, layer: usize, kv_head: usize) -> Result<Vec<f64>> {
    if layer >= record.n_layers() {
        return Err(Error::Index(format!(
            "layer {layer} out of range (model has {})",
            record.n_layers()
        )));
    }
    if kv_head >= record.n_kv_heads() {
        return Err(Error::Index(format!(
            "kv head {kv_head} out of range (model has {})",
            record.n_kv_heads()
        )));
    }
    let m_v = record.m_v();
    let m_t = record.m_t() as f64;
    let group = record.group_size();
    let mut scores = vec![0.0; m_v];
    for q_head in kv_head * group..(kv_head + 1) * group {
        let mut head_sum = vec![0.0; m_v];
        for t in 0..record.m_t() {
            for (acc, p) in head_sum.iter_mut().zip(&record.row(layer, q_head, t)[..m_v]) {
                *acc += p;
            }
        }
        for (s, h) in scores.iter_mut().zip(head_sum) {
            *s += h / m_t;
        }
    }
    Ok(scores)
}

/// Indices of the `k` largest scores (ties to the lower index), ascending.
/// `k` larger than `scores.len()` keeps everything.
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        other => other,
    });
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
    order
}

/// Runs [`select_top_k`] over every `(layer, kv_head)` of a prefill record.
pub fn build_selection(record: &AttentionRecord, config: &ModelConfig, k: usize) -> Result<SparseSelection> {
    if record.n_layers() != config.n_layers
        || record.n_q_heads() != config.n_q_heads
        || record.n_kv_heads() != config.n_kv_heads
    {
        return Err(Error::Index(
            "attention record does not match the model configuration".into(),
        ));
    }
    let mut entries = Vec::with_capacity(config.n_layers * config.n_kv_heads);
    for layer in 0..config.n_layers {
        for kv_head in 0..config.n_kv_heads {
            let scores = score_visual_tokens(record, layer, kv_head)?;
            entries.push(select_top_k(&scores, k));
        }
    }
    Ok(SparseSelection {
        k,
        m_v: record.m_v(),
        m_t: record.m_t(),
        n_kv_heads: config.n_kv_heads,
        entries,
    })
}

impl SparseSelection {
    /// Builds a selection from explicit per-head index lists.
    ///
    /// Lists are sorted; duplicates, indices `>= m_v`, and unequal list
    /// lengths are rejected.
    pub fn from_entries(
        entries: &[SelectionEntry],
        n_layers: usize,
        n_kv_heads: usize,
        m_v: usize,
        m_t: usize,
    ) -> Result<Self> {
        if entries.len() != n_layers * n_kv_heads {
            return Err(Error::Selection(format!(
                "expected {} entries, got {}",
                n_layers * n_kv_heads,
                entries.len()
            )));
        }
        let mut table: Vec<Option<Vec<usize>>> = vec![None; entries.len()];
        for e in entries {
            if e.layer >= n_layers || e.kv_head >= n_kv_heads {
                return Err(Error::Selection(format!(
                    "entry (layer {}, kv_head {}) out of range",
                    e.layer, e.kv_head
                )));
            }
            let mut indices = e.indices.clone();
            indices.sort_unstable();
            if indices.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Selection(format!(
                    "duplicate index in (layer {}, kv_head {})",
                    e.layer, e.kv_head
                )));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= m_v) {
                return Err(Error::Selection(format!(
                    "index {bad} is not a visual position (m_v = {m_v})"
                )));
            }
            let slot = &mut table[e.layer * n_kv_heads + e.kv_head];
            if slot.is_some() {
                return Err(Error::Selection(format!(
                    "(layer {}, kv_head {}) listed twice",
                    e.layer, e.kv_head
                )));
            }
            *slot = Some(indices);
        }
        let entries: Vec<Vec<usize>> = table.into_iter().map(Option::unwrap).collect();
        let k = entries[0].len();
        if entries.iter().any(|e| e.len() != k) {
            return Err(Error::Selection("entries differ in length".into()));
        }
        Ok(Self {
            k,
            m_v,
            m_t,
            n_kv_heads,
            entries,
        })
    }

    /// Keeps every visual position; the sparse path then equals the dense one.
    pub fn full(config: &ModelConfig, m_v: usize, m_t: usize) -> Self {
        Self {
            k: m_v,
            m_v,
            m_t,
            n_kv_heads: config.n_kv_heads,
            entries: vec![(0..m_v).collect(); config.n_layers * config.n_kv_heads],
        }
    }

    pub fn indices(&self, layer: usize, kv_head: usize) -> &[usize] {
        &self.entries[layer * self.n_kv_heads + kv_head]
    }

    /// Requested K.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of visual rows actually retained per head, `min(K, m_v)`.
    pub fn retained(&self) -> usize {
        self.k.min(self.m_v)
    }

    pub fn m_v(&self) -> usize {
        self.m_v
    }

    pub fn m_t(&self) -> usize {
        self.m_t
    }

    pub fn n_layers(&self) -> usize {
        self.entries.len() / self.n_kv_heads
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn to_entries(&self) -> Vec<SelectionEntry> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, indices)| SelectionEntry {
                layer: i / self.n_kv_heads,
                kv_head: i % self.n_kv_heads,
                indices: indices.clone(),
            })
            .collect()
    }

    /// JSON array of `{layer, kv_head, indices}` objects.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_entries()).expect("selection serializes")
    }

    pub fn from_json(json: &str, n_layers: usize, n_kv_heads: usize, m_v: usize, m_t: usize) -> Result<Self> {
        let entries: Vec<SelectionEntry> = serde_json::from_str(json).map_err(|e| Error::Selection(e.to_string()))?;
        Self::from_entries(&entries, n_layers, n_kv_heads, m_v, m_t)
    }

    /// Fails unless this selection fits `config` and a cache that still holds
    /// the whole prefilled prompt.
    pub(crate) fn check_against(&self, config: &ModelConfig, cache: &KvCache) -> Result<()> {
        if self.n_kv_heads != config.n_kv_heads || self.n_layers() != config.n_layers {
            return Err(Error::Selection("selection shape does not match the model".into()));
        }
        if self.m_v + self.m_t > cache.len() {
            return Err(Error::Selection(format!(
                "selection expects a prompt of {} positions, cache holds {}",
                self.m_v + self.m_t,
                cache.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_record(n_layers: usize, n_q: usize, n_kv: usize, m_v: usize, m_t: usize) -> AttentionRecord {
        let m = m_v + m_t;
        let row = vec![1.0 / m as f64; m];
        let rows = vec![vec![vec![row; m_t]; n_q]; n_layers];
        AttentionRecord::from_rows(&rows, n_kv, m_v).unwrap()
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(select_top_k(&[0.1, 0.5, 0.3], 2), vec![1, 2]);
        assert_eq!(select_top_k(&[0.1, 0.5, 0.3], 0), Vec::<usize>::new());
        assert_eq!(select_top_k(&[0.2, 0.2, 0.2, 0.2], 2), vec![0, 1]);
        assert_eq!(select_top_k(&[0.3, 0.1], 5), vec![0, 1]);
    }

    #[test]
    fn single_head_single_query_score_is_the_row() {
        let row = vec![0.1, 0.2, 0.3, 0.4];
        let record = AttentionRecord::from_rows(&[vec![vec![row.clone()]]], 1, 3).unwrap();
        let scores = score_visual_tokens(&record, 0, 0).unwrap();
        assert_eq!(scores, row[..3].to_vec());
    }

    #[test]
    fn uniform_rows_give_equal_group_scores() {
        let record = uniform_record(1, 4, 2, 6, 2);
        for kv in 0..2 {
            let scores = score_visual_tokens(&record, 0, kv).unwrap();
            for s in scores {
                assert!((s - 2.0 / 8.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_heads_are_index_errors() {
        let record = uniform_record(2, 2, 1, 4, 1);
        assert!(matches!(score_visual_tokens(&record, 2, 0), Err(Error::Index(_))));
        assert!(matches!(score_visual_tokens(&record, 0, 1), Err(Error::Index(_))));
    }

    #[test]
    fn full_k_keeps_everything() {
        let config = ModelConfig::new(2, 8, 2, 1, 16, 32, 0).unwrap();
        let record = uniform_record(2, 2, 1, 5, 3);
        let sel = build_selection(&record, &config, 5).unwrap();
        assert_eq!(sel, SparseSelection::full(&config, 5, 3));
        let clamped = build_selection(&record, &config, 50).unwrap();
        assert_eq!(clamped.indices(1, 0), &[0, 1, 2, 3, 4]);
        assert_eq!(clamped.retained(), 5);
    }

    #[test]
    fn concentrated_attention_selects_that_position() {
        let config = ModelConfig::new(2, 8, 2, 1, 16, 32, 0).unwrap();
        let m_v = 8;
        let mut row = vec![0.0; m_v + 2];
        row[5] = 0.9;
        row[m_v] = 0.1;
        let mut row2 = vec![0.0; m_v + 2];
        row2[5] = 1.0;
        let rows = vec![vec![vec![row, row2]; 2]; 2];
        let record = AttentionRecord::from_rows(&rows, 1, m_v).unwrap();
        let sel = build_selection(&record, &config, 1).unwrap();
        for layer in 0..2 {
            assert_eq!(sel.indices(layer, 0), &[5]);
        }
    }

    #[test]
    fn json_round_trip_and_validation() {
        let config = ModelConfig::new(2, 8, 2, 2, 16, 32, 0).unwrap();
        let full = SparseSelection::full(&config, 3, 1);
        let back = SparseSelection::from_json(&full.to_json(), 2, 2, 3, 1).unwrap();
        assert_eq!(back, full);

        let bad_index = r#"[{"layer":0,"kv_head":0,"indices":[3]}]"#;
        assert!(SparseSelection::from_json(bad_index, 1, 1, 3, 1).is_err());
        let dup = r#"[{"layer":0,"kv_head":0,"indices":[1,1]}]"#;
        assert!(SparseSelection::from_json(dup, 1, 1, 3, 1).is_err());
        let ragged = r#"[{"layer":0,"kv_head":0,"indices":[1]},{"layer":0,"kv_head":1,"indices":[0,2]}]"#;
        assert!(SparseSelection::from_json(ragged, 1, 2, 3, 1).is_err());
    }
}
