//! Forward passes of the toy decoder.
//!
//! Blocks are pre-norm (RMSNorm) with grouped-query attention and a SiLU
//! feed-forward. Positions enter through rotary embeddings applied to queries
//! and keys; cached keys are stored already rotated, so any subset of cache
//! rows can be attended without recomputation.
//!
//! Every path (prefill, dense step, sparse step, parallel verification) runs
//! through the same per-row kernels. Attention always accumulates over key
//! positions in ascending order, so a sparse step whose selection covers every
//! visual position performs exactly the same floating-point operations as a
//! dense step, and a batched pass over `n` tokens produces the same bits as
//! `n` single steps.

use crate::cache::KvCache;
use crate::config::{TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::selection::SparseSelection;
use crate::weights::{dot, LayerWeights, ModelWeights};

const NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

/// Post-softmax attention captured during prefill for the textual queries.
///
/// Stored per `(layer, query_head)` as an `m_t x m` matrix: row `t` is the
/// distribution of query position `m_v + t` over key positions `0..m`
/// (entries past the query position are zero).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    n_layers: usize,
    n_q_heads: usize,
    n_kv_heads: usize,
    m_v: usize,
    m_t: usize,
    probs: Vec<f64>,
}

impl AttentionRecord {
    fn zeros(n_layers: usize, n_q_heads: usize, n_kv_heads: usize, m_v: usize, m_t: usize) -> Self {
        let m = m_v + m_t;
        Self {
            n_layers,
            n_q_heads,
            n_kv_heads,
            m_v,
            m_t,
            probs: vec![0.0; n_layers * n_q_heads * m_t * m],
        }
    }

    /// Builds a record from explicit rows, indexed `[layer][q_head][t][key]`.
    ///
    /// Each row must be non-negative and sum to 1 within `1e-6`.
    pub fn from_rows(rows: &[Vec<Vec<Vec<f64>>>], n_kv_heads: usize, m_v: usize) -> Result<Self> {
        let n_layers = rows.len();
        let n_q_heads = rows.first().map_or(0, Vec::len);
        let m_t = rows.first().and_then(|l| l.first()).map_or(0, Vec::len);
        if n_layers == 0 || n_q_heads == 0 || m_t == 0 || m_v == 0 {
            return Err(Error::Input("attention record must be non-empty".into()));
        }
        if n_kv_heads == 0 || n_q_heads % n_kv_heads != 0 {
            return Err(Error::Input(format!(
                "{n_q_heads} query heads cannot be grouped onto {n_kv_heads} KV heads"
            )));
        }
        let m = m_v + m_t;
        let mut record = Self::zeros(n_layers, n_q_heads, n_kv_heads, m_v, m_t);
        for (layer, heads) in rows.iter().enumerate() {
            if heads.len() != n_q_heads {
                return Err(Error::Input("ragged head dimension".into()));
            }
            for (head, queries) in heads.iter().enumerate() {
                if queries.len() != m_t {
                    return Err(Error::Input("ragged query dimension".into()));
                }
                for (t, row) in queries.iter().enumerate() {
                    if row.len() != m {
                        return Err(Error::Input(format!(
                            "attention row has {} entries, expected {m}",
                            row.len()
                        )));
                    }
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                        return Err(Error::Input(format!(
                            "row (layer {layer}, head {head}, query {t}) is not a distribution"
                        )));
                    }
                    record.row_mut(layer, head, t).copy_from_slice(row);
                }
            }
        }
        Ok(record)
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_q_heads(&self) -> usize {
        self.n_q_heads
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn m_v(&self) -> usize {
        self.m_v
    }

    pub fn m_t(&self) -> usize {
        self.m_t
    }

    fn offset(&self, layer: usize, q_head: usize, t: usize) -> usize {
        let m = self.m_v + self.m_t;
        ((layer * self.n_q_heads + q_head) * self.m_t + t) * m
    }

    /// Distribution of textual query `t` (absolute position `m_v + t`).
    pub fn row(&self, layer: usize, q_head: usize, t: usize) -> &[f64] {
        let start = self.offset(layer, q_head, t);
        &self.probs[start..start + self.m_v + self.m_t]
    }

    fn row_mut(&mut self, layer: usize, q_head: usize, t: usize) -> &mut [f64] {
        let start = self.offset(layer, q_head, t);
        let m = self.m_v + self.m_t;
        &mut self.probs[start..start + m]
    }
}

/// Output of [`ModelWeights::prefill`].
#[derive(Debug, Clone)]
pub struct Prefill {
    pub cache: KvCache,
    pub record: AttentionRecord,
    /// Greedy prediction for position `m`.
    pub first_token: TokenId,
    pub m_v: usize,
    pub m_t: usize,
}

/// Which cache rows a query may read.
#[derive(Clone, Copy)]
enum Attend<'a> {
    Dense,
    Sparse(&'a SparseSelection),
}

/// Greedy argmax; ties go to the lowest token id.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let mean_sq = x.iter().fold(0.0, |acc, v| acc + v * v) / x.len() as f64;
    let inv = 1.0 / (mean_sq + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Rotates consecutive pairs of each `d_head`-wide head in place. An odd
/// trailing dimension is left unrotated.
fn rope(x: &mut [f64], d_head: usize, pos: usize) {
    for head in x.chunks_mut(d_head) {
        for i in 0..d_head / 2 {
            let freq = ROPE_BASE.powf(-2.0 * i as f64 / d_head as f64);
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
}

/// Softmax over `scores` in place, accumulating in slice order.
fn softmax(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

impl ModelWeights {
    /// Processes the whole input, fills a fresh cache and predicts the first
    /// response token.
    pub fn prefill(&self, input: &TokenSequence) -> Result<Prefill> {
        let config = self.config();
        input.check(config)?;
        let mut cache = KvCache::new(config);
        let mut record = AttentionRecord::zeros(
            config.n_layers,
            config.n_q_heads,
            config.n_kv_heads,
            input.m_v(),
            input.m_t(),
        );
        let tokens = input.tokens();
        let logits = self.forward(&mut cache, &tokens, Attend::Dense, Some(&mut record), tokens.len() - 1)?;
        Ok(Prefill {
            cache,
            record,
            first_token: argmax(&logits[0]),
            m_v: input.m_v(),
            m_t: input.m_t(),
        })
    }

    /// Appends `token` with full attention and returns the next greedy token.
    pub fn decode_step_dense(&self, cache: &mut KvCache, token: TokenId) -> Result<TokenId> {
        Ok(argmax(&self.decode_step_dense_logits(cache, token)?))
    }

    pub fn decode_step_dense_logits(&self, cache: &mut KvCache, token: TokenId) -> Result<Vec<f64>> {
        self.require_nonempty(cache)?;
        let mut logits = self.forward(cache, &[token], Attend::Dense, None, 0)?;
        Ok(logits.remove(0))
    }

    /// Appends `token` attending only the selected visual rows plus every
    /// position from `m_v` on, and returns the next greedy token.
    pub fn decode_step_sparse(
        &self,
        cache: &mut KvCache,
        selection: &SparseSelection,
        token: TokenId,
    ) -> Result<TokenId> {
        Ok(argmax(&self.decode_step_sparse_logits(cache, selection, token)?))
    }

    pub fn decode_step_sparse_logits(
        &self,
        cache: &mut KvCache,
        selection: &SparseSelection,
        token: TokenId,
    ) -> Result<Vec<f64>> {
        self.require_nonempty(cache)?;
        selection.check_against(self.config(), cache)?;
        let mut logits = self.forward(cache, &[token], Attend::Sparse(selection), None, 0)?;
        Ok(logits.remove(0))
    }

    /// Runs all `tokens` through the dense model in one pass over the cache.
    ///
    /// `output[i]` is the greedy prediction after `tokens[..=i]`, identical to
    /// what `i + 1` sequential [`ModelWeights::decode_step_dense`] calls give.
    pub fn forward_parallel_dense(&self, cache: &mut KvCache, tokens: &[TokenId]) -> Result<Vec<TokenId>> {
        Ok(self
            .forward_parallel_dense_logits(cache, tokens)?
            .iter()
            .map(|l| argmax(l))
            .collect())
    }

    pub fn forward_parallel_dense_logits(&self, cache: &mut KvCache, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        if tokens.is_empty() {
            return Err(Error::Precondition(
                "parallel verification needs at least one token".into(),
            ));
        }
        self.require_nonempty(cache)?;
        self.forward(cache, tokens, Attend::Dense, None, 0)
    }

    fn require_nonempty(&self, cache: &KvCache) -> Result<()> {
        if cache.is_empty() {
            return Err(Error::Precondition("decoding requires a prefilled cache".into()));
        }
        Ok(())
    }

    /// Core pass: appends one cache row per token and returns logits for rows
    /// `logits_from..tokens.len()`.
    fn forward(
        &self,
        cache: &mut KvCache,
        tokens: &[TokenId],
        attend: Attend<'_>,
        mut record: Option<&mut AttentionRecord>,
        logits_from: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let config = self.config();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of size {}",
                config.vocab_size
            )));
        }
        cache.reserve(tokens.len())?;
        let start = cache.len();

        let mut hidden: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.embedding.row(t as usize).to_vec())
            .collect();

        for (layer_idx, layer) in self.layers.iter().enumerate() {
            let queries = self.project_qkv(cache, layer_idx, layer, &hidden, start);
            for (i, (h, q)) in hidden.iter_mut().zip(&queries).enumerate() {
                let capture = record.as_deref_mut();
                let mixed = self.attention_row(cache, layer_idx, q, start + i, attend, capture);
                let projected = layer.wo.matvec(&mixed);
                for (x, p) in h.iter_mut().zip(&projected) {
                    *x += p;
                }
                let normed = rms_norm(h, &layer.ffn_norm);
                let up: Vec<f64> = layer.w_up.matvec(&normed).into_iter().map(silu).collect();
                let down = layer.w_down.matvec(&up);
                for (x, d) in h.iter_mut().zip(&down) {
                    *x += d;
                }
            }
        }
        cache.commit_rows(tokens.len());

        Ok(hidden[logits_from..]
            .iter()
            .map(|h| self.unembedding.matvec(&rms_norm(h, &self.final_norm)))
            .collect())
    }

    /// Computes rotated queries for every row and appends the rows' keys and
    /// values for this layer.
    fn project_qkv(
        &self,
        cache: &mut KvCache,
        layer_idx: usize,
        layer: &LayerWeights,
        hidden: &[Vec<f64>],
        start: usize,
    ) -> Vec<Vec<f64>> {
        let config = self.config();
        let d_head = config.d_head;
        hidden
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let normed = rms_norm(h, &layer.attn_norm);
                let mut q = layer.wq.matvec(&normed);
                let mut k = layer.wk.matvec(&normed);
                let v = layer.wv.matvec(&normed);
                rope(&mut q, d_head, start + i);
                rope(&mut k, d_head, start + i);
                for kv_head in 0..config.n_kv_heads {
                    let span = kv_head * d_head..(kv_head + 1) * d_head;
                    cache.push_row(layer_idx, kv_head, &k[span.clone()], &v[span]);
                }
                q
            })
            .collect()
    }

    /// Multi-head attention output (pre output-projection) for one query row
    /// at absolute position `pos`.
    fn attention_row(
        &self,
        cache: &KvCache,
        layer_idx: usize,
        query: &[f64],
        pos: usize,
        attend: Attend<'_>,
        mut record: Option<&mut AttentionRecord>,
    ) -> Vec<f64> {
        let config = self.config();
        let d_head = config.d_head;
        let scale = 1.0 / (d_head as f64).sqrt();
        let group = config.group_size();
        let mut out = vec![0.0; config.n_q_heads * d_head];

        for kv_head in 0..config.n_kv_heads {
            let positions: Vec<usize> = match attend {
                Attend::Dense => (0..=pos).collect(),
                Attend::Sparse(sel) => sel
                    .indices(layer_idx, kv_head)
                    .iter()
                    .copied()
                    .chain(sel.m_v()..=pos)
                    .collect(),
            };
            for q_head in kv_head * group..(kv_head + 1) * group {
                let q = &query[q_head * d_head..(q_head + 1) * d_head];
                let mut probs: Vec<f64> = positions
                    .iter()
                    .map(|&p| dot(q, cache.key(layer_idx, kv_head, p)) * scale)
                    .collect();
                softmax(&mut probs);

                let head_out = &mut out[q_head * d_head..(q_head + 1) * d_head];
                for (&p, &w) in positions.iter().zip(&probs) {
                    for (o, v) in head_out.iter_mut().zip(cache.value(layer_idx, kv_head, p)) {
                        *o += w * v;
                    }
                }

                if let Some(rec) = record.as_deref_mut() {
                    if pos >= rec.m_v {
                        let row = rec.row_mut(layer_idx, q_head, pos - rec.m_v);
                        for (&p, &w) in positions.iter().zip(&probs) {
                            row[p] = w;
                        }
                    }
                }
            }
        }
        out
    }
}
