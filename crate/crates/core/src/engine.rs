//! Sparse-to-dense speculative decoding.
//!
//! Each round the sparse draft (the same weights, reading only the selected
//! visual rows) proposes `gamma` tokens one at a time. The dense model then
//! checks them in a single pass over `[pending, d_0, .., d_{gamma-1}]`, where
//! `pending` is the last committed token whose cache row has not been
//! written yet. The longest prefix of the draft that matches the dense greedy
//! predictions is committed, followed by the dense prediction at the first
//! mismatch (or after the last draft token), the bonus token. Rows written by
//! the draft are discarded before verification and rows for rejected tokens
//! are discarded after it, so the cache only ever holds dense rows for
//! committed tokens and the output is exactly that of dense greedy decoding.
//!
//! Cache invariant between rounds: `cache.len() == m + committed.len() - 1`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::config::{TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::model::Prefill;
use crate::selection::{build_selection, SparseSelection};
use crate::weights::ModelWeights;

/// Knobs for one generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeParams {
    /// Visual rows kept per `(layer, kv_head)` by the draft.
    pub k: usize,
    /// Draft length per round.
    pub gamma: usize,
    pub max_new_tokens: usize,
    pub stop_token: Option<TokenId>,
}

impl DecodeParams {
    pub fn new(k: usize, gamma: usize, max_new_tokens: usize) -> Self {
        Self {
            k,
            gamma,
            max_new_tokens,
            stop_token: None,
        }
    }

    pub fn with_stop_token(mut self, token: TokenId) -> Self {
        self.stop_token = Some(token);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeRound {
    pub round_index: usize,
    pub draft_tokens: Vec<TokenId>,
    pub n_accepted: usize,
    pub bonus_token: TokenId,
    /// Cache length once the round is committed.
    pub cache_len: usize,
    /// Textual plus generated rows in the cache when the round started.
    pub live_context: usize,
}

impl DecodeRound {
    pub fn gamma(&self) -> usize {
        self.draft_tokens.len()
    }

    pub fn committed(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.draft_tokens[..self.n_accepted]
            .iter()
            .copied()
            .chain(std::iter::once(self.bonus_token))
    }
}

/// One line of the round-by-round trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: usize,
    pub draft: Vec<TokenId>,
    pub n_accepted: usize,
    pub bonus: TokenId,
    pub cache_len: usize,
}

impl From<&DecodeRound> for TraceRecord {
    fn from(r: &DecodeRound) -> Self {
        Self {
            round: r.round_index,
            draft: r.draft_tokens.clone(),
            n_accepted: r.n_accepted,
            bonus: r.bonus_token,
            cache_len: r.cache_len,
        }
    }
}

/// Counters aggregated over a generation. I/O is counted in token rows: a
/// draft of `gamma` tokens costs `gamma * (K + live_context)` and a
/// verification pass costs the cache length it reads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub total_drafted: usize,
    pub total_accepted: usize,
    pub rounds: Vec<DecodeRound>,
    pub io_sparse_units: u64,
    pub io_dense_units: u64,
    /// Visual rows each draft step reads, `min(k, m_v)`.
    pub k_retained: usize,
    pub m_v: usize,
    pub m_t: usize,
}

impl DecodeStats {
    /// Accepted over drafted tokens; 0 when nothing was drafted.
    pub fn acceptance_rate(&self) -> f64 {
        if self.total_drafted == 0 {
            0.0
        } else {
            self.total_accepted as f64 / self.total_drafted as f64
        }
    }

    /// Fraction of rounds whose whole draft was accepted.
    pub fn full_draft_rate(&self) -> f64 {
        let drafted: Vec<_> = self.rounds.iter().filter(|r| r.gamma() > 0).collect();
        if drafted.is_empty() {
            return 0.0;
        }
        let full = drafted.iter().filter(|r| r.n_accepted == r.gamma()).count();
        full as f64 / drafted.len() as f64
    }

    /// Writes one JSON object per round.
    pub fn write_trace<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for round in &self.rounds {
            serde_json::to_writer(&mut out, &TraceRecord::from(round))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Tokens proposed by the draft and the rows they were charged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Draft {
    pub tokens: Vec<TokenId>,
    pub io_units: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verification {
    pub n_accepted: usize,
    pub bonus: TokenId,
    pub io_units: u64,
}

/// Autoregressively drafts `gamma` tokens with the sparse model, starting by
/// feeding `last_token`. The cache grows by `gamma` rows; callers roll them
/// back before verification.
pub fn draft(
    weights: &ModelWeights,
    cache: &mut KvCache,
    selection: &SparseSelection,
    last_token: TokenId,
    gamma: usize,
) -> Result<Draft> {
    if gamma == 0 {
        return Err(Error::Precondition("gamma must be at least 1".into()));
    }
    cache.reserve(gamma)?;
    let live = cache.len().saturating_sub(selection.m_v());
    let io_units = (gamma * (selection.retained() + live)) as u64;
    let mut tokens = Vec::with_capacity(gamma);
    let mut token = last_token;
    for _ in 0..gamma {
        token = weights.decode_step_sparse(cache, selection, token)?;
        tokens.push(token);
    }
    Ok(Draft { tokens, io_units })
}

/// Checks `draft` against the dense model in one pass.
///
/// `pending` is the last committed token (not yet in the cache). On return
/// the cache holds rows for `pending` and the accepted draft tokens; the bonus
/// token becomes the next `pending`.
pub fn verify(
    weights: &ModelWeights,
    cache: &mut KvCache,
    pending: TokenId,
    draft: &[TokenId],
) -> Result<Verification> {
    if draft.is_empty() {
        return Err(Error::Precondition("cannot verify an empty draft".into()));
    }
    verify_unchecked(weights, cache, pending, draft)
}

fn verify_unchecked(
    weights: &ModelWeights,
    cache: &mut KvCache,
    pending: TokenId,
    draft: &[TokenId],
) -> Result<Verification> {
    let base = cache.len();
    let mut batch = Vec::with_capacity(draft.len() + 1);
    batch.push(pending);
    batch.extend_from_slice(draft);
    let predictions = weights.forward_parallel_dense(cache, &batch)?;
    let n_accepted = draft.iter().zip(&predictions).take_while(|(d, p)| d == p).count();
    let bonus = predictions[n_accepted];
    rollback(cache, base + n_accepted + 1)?;
    Ok(Verification {
        n_accepted,
        bonus,
        io_units: base as u64,
    })
}

/// Discards cache rows at positions `>= to_length`.
pub fn rollback(cache: &mut KvCache, to_length: usize) -> Result<()> {
    cache.truncate(to_length)
}

/// Result of a generation: the new tokens, statistics, and the final cache
/// holding dense rows for the prompt and every output token but the last.
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub stats: DecodeStats,
    pub cache: KvCache,
}

/// A speculative decoding session over borrowed weights.
///
/// Sessions are independent; several may share one set of weights across
/// threads.
#[derive(Debug, Clone)]
pub struct Session<'w> {
    weights: &'w ModelWeights,
    cache: KvCache,
    selection: SparseSelection,
    params: DecodeParams,
    committed: Vec<TokenId>,
    stats: DecodeStats,
    prompt_len: usize,
    done: bool,
}

impl<'w> Session<'w> {
    pub fn new(weights: &'w ModelWeights, prefill: &Prefill, params: DecodeParams) -> Result<Self> {
        if params.gamma == 0 {
            return Err(Error::Precondition("gamma must be at least 1".into()));
        }
        let selection = build_selection(&prefill.record, weights.config(), params.k)?;
        let stats = DecodeStats {
            k_retained: selection.retained(),
            m_v: prefill.m_v,
            m_t: prefill.m_t,
            ..DecodeStats::default()
        };
        let mut session = Self {
            weights,
            cache: prefill.cache.clone(),
            selection,
            params,
            committed: Vec::new(),
            stats,
            prompt_len: prefill.m_v + prefill.m_t,
            done: false,
        };
        session.commit(&[prefill.first_token]);
        Ok(session)
    }

    pub fn selection(&self) -> &SparseSelection {
        &self.selection
    }

    pub fn committed(&self) -> &[TokenId] {
        &self.committed
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Runs one draft/verify round. Returns `None` once generation is over.
    pub fn step(&mut self) -> Result<Option<&DecodeRound>> {
        if self.done {
            return Ok(None);
        }
        let pending = *self.committed.last().expect("session always holds a token");
        let base = self.cache.len();
        let room = self.cache.max_seq_len().saturating_sub(base);
        if room == 0 {
            return Err(Error::Capacity {
                needed: base + 1,
                max: self.cache.max_seq_len(),
            });
        }
        // Drafting gamma tokens needs gamma + 1 rows for verification.
        let gamma = self.params.gamma.min(room - 1);
        let live_context = base - self.selection.m_v();

        let (draft_tokens, verification) = if gamma == 0 {
            (
                Vec::new(),
                verify_unchecked(self.weights, &mut self.cache, pending, &[])?,
            )
        } else {
            let d = draft(self.weights, &mut self.cache, &self.selection, pending, gamma)?;
            rollback(&mut self.cache, base)?;
            self.stats.io_sparse_units += d.io_units;
            let v = verify(self.weights, &mut self.cache, pending, &d.tokens)?;
            (d.tokens, v)
        };
        self.stats.io_dense_units += verification.io_units;
        self.stats.total_drafted += draft_tokens.len();
        self.stats.total_accepted += verification.n_accepted;

        let round = DecodeRound {
            round_index: self.stats.rounds.len(),
            draft_tokens,
            n_accepted: verification.n_accepted,
            bonus_token: verification.bonus,
            cache_len: self.cache.len(),
            live_context,
        };
        let new: Vec<TokenId> = round.committed().collect();
        self.stats.rounds.push(round);
        self.commit(&new);
        Ok(self.stats.rounds.last())
    }

    fn commit(&mut self, tokens: &[TokenId]) {
        for &t in tokens {
            if self.committed.len() >= self.params.max_new_tokens {
                self.done = true;
                break;
            }
            self.committed.push(t);
            if Some(t) == self.params.stop_token {
                self.done = true;
                break;
            }
        }
        if self.committed.len() >= self.params.max_new_tokens {
            self.done = true;
        }
    }

    /// Runs rounds to completion.
    pub fn finish(mut self) -> Result<Generation> {
        while self.step()?.is_some() {}
        // Drop rows for tokens decoded past the stop condition.
        let keep = self.prompt_len + self.committed.len().saturating_sub(1);
        if self.cache.len() > keep {
            self.cache.truncate(keep)?;
        }
        Ok(Generation {
            tokens: self.committed,
            stats: self.stats,
            cache: self.cache,
        })
    }
}

/// Prefills `input` and decodes speculatively.
pub fn generate(weights: &ModelWeights, input: &TokenSequence, params: DecodeParams) -> Result<Generation> {
    let prefill = weights.prefill(input)?;
    generate_from_prefill(weights, &prefill, params)
}

/// Decodes speculatively from an existing prefill (which is left untouched).
pub fn generate_from_prefill(weights: &ModelWeights, prefill: &Prefill, params: DecodeParams) -> Result<Generation> {
    Session::new(weights, prefill, params)?.finish()
}

/// Plain dense greedy decoding: the reference the speculative output must
/// reproduce.
pub fn generate_dense(
    weights: &ModelWeights,
    input: &TokenSequence,
    max_new_tokens: usize,
    stop_token: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    let prefill = weights.prefill(input)?;
    generate_dense_from_prefill(weights, &prefill, max_new_tokens, stop_token)
}

pub fn generate_dense_from_prefill(
    weights: &ModelWeights,
    prefill: &Prefill,
    max_new_tokens: usize,
    stop_token: Option<TokenId>,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(max_new_tokens);
    if max_new_tokens == 0 {
        return Ok(out);
    }
    let mut cache = prefill.cache.clone();
    let mut token = prefill.first_token;
    out.push(token);
    while out.len() < max_new_tokens && Some(token) != stop_token {
        token = weights.decode_step_dense(&mut cache, token)?;
        out.push(token);
    }
    Ok(out)
}

/// Per-token agreement between the sparse draft and the dense model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub matches: usize,
    pub horizon: usize,
}

impl Agreement {
    pub fn ratio(&self) -> f64 {
        self.matches as f64 / self.horizon as f64
    }

    /// Probability of a fully accepted draft of length `gamma` if token
    /// errors were independent. Real errors are correlated, so this is an
    /// estimate to compare against [`DecodeStats::full_draft_rate`].
    pub fn independent_full_draft_estimate(&self, gamma: usize) -> f64 {
        self.ratio().powi(gamma as i32)
    }
}

/// Walks the dense greedy trajectory for `horizon` steps and counts how often
/// a single sparse step from the same committed prefix predicts the same
/// token. Sparse mistakes never feed back into the trajectory.
pub fn measure_agreement(weights: &ModelWeights, input: &TokenSequence, k: usize, horizon: usize) -> Result<Agreement> {
    let prefill = weights.prefill(input)?;
    measure_agreement_from_prefill(weights, &prefill, k, horizon)
}

pub fn measure_agreement_from_prefill(
    weights: &ModelWeights,
    prefill: &Prefill,
    k: usize,
    horizon: usize,
) -> Result<Agreement> {
    if horizon == 0 {
        return Err(Error::Precondition("horizon must be at least 1".into()));
    }
    let selection = build_selection(&prefill.record, weights.config(), k)?;
    let mut cache = prefill.cache.clone();
    let mut token = prefill.first_token;
    let mut matches = 0;
    for _ in 0..horizon {
        let base = cache.len();
        let sparse = weights.decode_step_sparse(&mut cache, &selection, token)?;
        rollback(&mut cache, base)?;
        let dense = weights.decode_step_dense(&mut cache, token)?;
        matches += usize::from(sparse == dense);
        token = dense;
    }
    Ok(Agreement { matches, horizon })
}

/// How many draft tokens the dense model accepts when a round starts at each
/// position of the dense greedy trajectory.
///
/// A deterministic draft of `gamma < max_gamma` tokens is a prefix of the
/// `max_gamma` draft from the same state, so one draft per position gives the
/// accepted count for every shorter `gamma` as `min(run_length, gamma)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceProfile {
    pub max_gamma: usize,
    pub run_lengths: Vec<usize>,
}

impl AcceptanceProfile {
    /// Mean accepted tokens per round over all start positions.
    pub fn expected_accepted(&self, gamma: usize) -> f64 {
        assert!(
            gamma <= self.max_gamma,
            "gamma {gamma} beyond profiled {}",
            self.max_gamma
        );
        let total: usize = self.run_lengths.iter().map(|&r| r.min(gamma)).sum();
        total as f64 / self.run_lengths.len() as f64
    }

    /// Position-averaged acceptance rate for drafts of length `gamma`.
    pub fn acceptance_rate(&self, gamma: usize) -> f64 {
        self.expected_accepted(gamma) / gamma as f64
    }

    /// Pools several profiles with the same `max_gamma`.
    pub fn merge(profiles: &[AcceptanceProfile]) -> Option<Self> {
        let max_gamma = profiles.first()?.max_gamma;
        if profiles.iter().any(|p| p.max_gamma != max_gamma) {
            return None;
        }
        Some(Self {
            max_gamma,
            run_lengths: profiles.iter().flat_map(|p| p.run_lengths.iter().copied()).collect(),
        })
    }
}

/// Drafts `max_gamma` tokens and verifies them at each of the first
/// `positions` steps of the dense greedy trajectory.
pub fn acceptance_profile_from_prefill(
    weights: &ModelWeights,
    prefill: &Prefill,
    k: usize,
    max_gamma: usize,
    positions: usize,
) -> Result<AcceptanceProfile> {
    if max_gamma == 0 || positions == 0 {
        return Err(Error::Precondition("max_gamma and positions must be at least 1".into()));
    }
    let selection = build_selection(&prefill.record, weights.config(), k)?;
    let mut cache = prefill.cache.clone();
    let mut token = prefill.first_token;
    let mut run_lengths = Vec::with_capacity(positions);
    for _ in 0..positions {
        let base = cache.len();
        let d = draft(weights, &mut cache, &selection, token, max_gamma)?;
        rollback(&mut cache, base)?;
        let v = verify(weights, &mut cache, token, &d.tokens)?;
        run_lengths.push(v.n_accepted);
        // The verified row for `token` is its dense row; keep it and step.
        rollback(&mut cache, base + 1)?;
        token = if v.n_accepted > 0 { d.tokens[0] } else { v.bonus };
    }
    Ok(AcceptanceProfile { max_gamma, run_lengths })
}
