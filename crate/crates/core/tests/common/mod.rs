//! Test-only reference implementation.
//!
//! A cache-free forward pass written from scratch: plain sequential sums, no
//! KV cache, no truncation, no shared kernels with the library. It reads only
//! the public weight tensors.

#![allow(dead_code, clippy::needless_range_loop)]

use sparse_to_dense::{
    AttentionRecord, ModelConfig, ModelWeights, TokenId, TokenSequence, VisualStructure, WorkloadSpec,
};

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig::new(2, 32, 4, 2, 64, 256, seed).unwrap()
}

pub fn small_input(m_v: usize, m_t: usize, workload_seed: u64) -> TokenSequence {
    WorkloadSpec::new(m_v, m_t, 64, workload_seed, VisualStructure::BlockCorrelated)
        .generate()
        .unwrap()
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let mut ss = 0.0;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f64 + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn matvec(rows: usize, cols: usize, data: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        for c in 0..cols {
            out[r] += data[r * cols + c] * x[c];
        }
    }
    out
}

fn rotate(x: &mut [f64], d_head: usize, pos: usize) {
    for h in 0..x.len() / d_head {
        for i in 0..d_head / 2 {
            let angle = pos as f64 * 10_000f64.powf(-((2 * i) as f64) / d_head as f64);
            let (a, b) = (x[h * d_head + 2 * i], x[h * d_head + 2 * i + 1]);
            x[h * d_head + 2 * i] = a * angle.cos() - b * angle.sin();
            x[h * d_head + 2 * i + 1] = a * angle.sin() + b * angle.cos();
        }
    }
}

fn mat(m: &sparse_to_dense::weights::Matrix, x: &[f64]) -> Vec<f64> {
    matvec(m.rows(), m.cols(), m.as_slice(), x)
}

/// Per-layer projections of one row.
struct Qkv {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

fn project(w: &ModelWeights, layer: usize, h: &[f64], pos: usize) -> Qkv {
    let c = w.config();
    let lw = &w.layers[layer];
    let x = rms_norm(h, &lw.attn_norm);
    let mut q = mat(&lw.wq, &x);
    let mut k = mat(&lw.wk, &x);
    let v = mat(&lw.wv, &x);
    rotate(&mut q, c.d_head, pos);
    rotate(&mut k, c.d_head, pos);
    Qkv { q, k, v }
}

/// Attention + feed-forward update of one row. `keys(kv_head)` yields
/// `(key, value)` pairs the query may read. Returns the per-query-head
/// attention probabilities alongside, in the order `keys` produced them.
fn block(
    w: &ModelWeights,
    layer: usize,
    h: &mut [f64],
    q: &[f64],
    keys: &dyn Fn(usize) -> Vec<(Vec<f64>, Vec<f64>)>,
) -> Vec<Vec<f64>> {
    let c = w.config();
    let lw = &w.layers[layer];
    let dh = c.d_head;
    let group = c.n_q_heads / c.n_kv_heads;
    let mut mixed = vec![0.0; c.n_q_heads * dh];
    let mut all_probs = Vec::new();
    for qh in 0..c.n_q_heads {
        let kv = keys(qh / group);
        let scores: Vec<f64> = kv
            .iter()
            .map(|(k, _)| {
                let mut s = 0.0;
                for i in 0..dh {
                    s += q[qh * dh + i] * k[i];
                }
                s / (dh as f64).sqrt()
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::MIN, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        for ((_, v), p) in kv.iter().zip(&probs) {
            for i in 0..dh {
                mixed[qh * dh + i] += p * v[i];
            }
        }
        all_probs.push(probs);
    }
    let o = mat(&lw.wo, &mixed);
    for i in 0..h.len() {
        h[i] += o[i];
    }
    let x = rms_norm(h, &lw.ffn_norm);
    let up: Vec<f64> = mat(&lw.w_up, &x).iter().map(|u| u / (1.0 + (-u).exp())).collect();
    let down = mat(&lw.w_down, &up);
    for i in 0..h.len() {
        h[i] += down[i];
    }
    all_probs
}

fn logits(w: &ModelWeights, h: &[f64]) -> Vec<f64> {
    mat(&w.unembedding, &rms_norm(h, &w.final_norm))
}

pub fn ref_argmax(v: &[f64]) -> TokenId {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best as TokenId
}

fn head_slice(x: &[f64], head: usize, dh: usize) -> Vec<f64> {
    x[head * dh..(head + 1) * dh].to_vec()
}

/// Output of [`reference_forward`].
pub struct Reference {
    /// Dense logits for every position.
    pub dense: Vec<Vec<f64>>,
    /// Sparse-draft logits for every position `>= sparse_from`.
    pub sparse: Vec<Option<Vec<f64>>>,
    /// Dense attention `[layer][q_head][query_pos]` over key positions
    /// `0..=query_pos`, for query positions `>= capture_from`.
    pub attention: Vec<Vec<Vec<Option<Vec<f64>>>>>,
}

/// Cache-free two-stream forward over `tokens`.
///
/// The dense stream computes every row with full causal attention. The
/// sparse stream computes, for each position `i >= sparse_from`, the row a
/// sparse draft step would compute there: its query reads the dense-stream
/// keys at earlier positions `j` with `allowed(layer, kv_head, j)`, plus its
/// own sparse-stream key at `i`.
pub fn reference_forward(
    w: &ModelWeights,
    tokens: &[TokenId],
    sparse_from: usize,
    allowed: &dyn Fn(usize, usize, usize) -> bool,
    capture_from: usize,
) -> Reference {
    let c = w.config().clone();
    let n = tokens.len();
    let dh = c.d_head;
    let embed = |t: TokenId| w.embedding.row(t as usize).to_vec();
    let mut dense_h: Vec<Vec<f64>> = tokens.iter().map(|&t| embed(t)).collect();
    let mut sparse_h: Vec<Option<Vec<f64>>> = (0..n).map(|i| (i >= sparse_from).then(|| embed(tokens[i]))).collect();
    let mut attention = vec![vec![vec![None; n]; c.n_q_heads]; c.n_layers];

    for layer in 0..c.n_layers {
        let dense_qkv: Vec<Qkv> = (0..n).map(|i| project(w, layer, &dense_h[i], i)).collect();
        let sparse_qkv: Vec<Option<Qkv>> = (0..n)
            .map(|i| sparse_h[i].as_ref().map(|h| project(w, layer, h, i)))
            .collect();

        for i in 0..n {
            let keys = |kv: usize| -> Vec<(Vec<f64>, Vec<f64>)> {
                (0..=i)
                    .map(|j| (head_slice(&dense_qkv[j].k, kv, dh), head_slice(&dense_qkv[j].v, kv, dh)))
                    .collect()
            };
            let probs = block(w, layer, &mut dense_h[i], &dense_qkv[i].q, &keys);
            if i >= capture_from {
                for (qh, p) in probs.into_iter().enumerate() {
                    attention[layer][qh][i] = Some(p);
                }
            }
        }
        for i in sparse_from..n {
            let own = sparse_qkv[i].as_ref().unwrap();
            let keys = |kv: usize| -> Vec<(Vec<f64>, Vec<f64>)> {
                let mut out: Vec<(Vec<f64>, Vec<f64>)> = (0..i)
                    .filter(|&j| allowed(layer, kv, j))
                    .map(|j| (head_slice(&dense_qkv[j].k, kv, dh), head_slice(&dense_qkv[j].v, kv, dh)))
                    .collect();
                out.push((head_slice(&own.k, kv, dh), head_slice(&own.v, kv, dh)));
                out
            };
            let mut h = sparse_h[i].take().unwrap();
            block(w, layer, &mut h, &own.q, &keys);
            sparse_h[i] = Some(h);
        }
    }

    Reference {
        dense: dense_h.iter().map(|h| logits(w, h)).collect(),
        sparse: sparse_h.iter().map(|h| h.as_ref().map(|h| logits(w, h))).collect(),
        attention,
    }
}

/// Dense-only reference.
pub fn dense_logits(w: &ModelWeights, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    reference_forward(w, tokens, tokens.len(), &|_, _, _| true, tokens.len()).dense
}

/// Greedy continuation by full recomputation at every step.
pub fn dense_greedy_recompute(w: &ModelWeights, prompt: &[TokenId], steps: usize) -> Vec<TokenId> {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..steps {
        let next = ref_argmax(dense_logits(w, &tokens).last().unwrap());
        out.push(next);
        tokens.push(next);
    }
    out
}

/// Top-K selection straight from the formula: for each visual position, the
/// attention from every textual query of every grouped query head, divided
/// by `m_t` and summed; then sort descending (lower index on ties), keep `k`,
/// sort ascending.
pub fn brute_force_selection(
    config: &ModelConfig,
    attention: &[Vec<Vec<Option<Vec<f64>>>>],
    m_v: usize,
    m_t: usize,
    k: usize,
) -> Vec<Vec<Vec<usize>>> {
    let group = config.n_q_heads / config.n_kv_heads;
    let mut out = Vec::new();
    for layer in 0..config.n_layers {
        let mut per_head = Vec::new();
        for kv in 0..config.n_kv_heads {
            let mut scores = vec![0.0; m_v];
            for (x, score) in scores.iter_mut().enumerate() {
                for qh in kv * group..(kv + 1) * group {
                    let mut s = 0.0;
                    for t in 0..m_t {
                        s += attention[layer][qh][m_v + t].as_ref().unwrap()[x];
                    }
                    *score += s / m_t as f64;
                }
            }
            let mut idx: Vec<usize> = (0..m_v).collect();
            idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            idx.truncate(k.min(m_v));
            idx.sort();
            per_head.push(idx);
        }
        out.push(per_head);
    }
    out
}

/// A library attention record in the layout [`reference_forward`] returns.
pub fn record_as_attention(record: &AttentionRecord) -> Vec<Vec<Vec<Option<Vec<f64>>>>> {
    let (m_v, m_t) = (record.m_v(), record.m_t());
    (0..record.n_layers())
        .map(|layer| {
            (0..record.n_q_heads())
                .map(|qh| {
                    let mut rows = vec![None; m_v + m_t];
                    for t in 0..m_t {
                        rows[m_v + t] = Some(record.row(layer, qh, t).to_vec());
                    }
                    rows
                })
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
