//! Experiments over seeded toy models: per-token agreement by K, single
//! lossless decoding runs, and (gamma, K) sweeps.
//!
//! Every speculative run is compared with plain dense decoding before any
//! metric is reported; a mismatch is an error, never a data point.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sparse_to_dense::{
    generate_dense_from_prefill, generate_from_prefill, measure_agreement_from_prefill, CostModelInput, DecodeParams,
    DecodeStats, Error, ModelConfig, ModelWeights, Prefill, TokenId, WorkloadSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Model(#[from] Error),
    #[error("speculative output diverged from dense decoding at token {position} (k={k}, gamma={gamma})")]
    Lossless { k: usize, gamma: usize, position: usize },
    #[error("{0} sweep cells diverged from dense decoding")]
    LosslessCells(usize),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl BenchError {
    /// Process exit code: 2 for a losslessness violation, 3 for capacity,
    /// 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            BenchError::Lossless { .. } | BenchError::LosslessCells(_) => 2,
            BenchError::Model(Error::Capacity { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// A model and prompt prefilled once and shared by every cell of a study.
pub struct Setup {
    pub config: ModelConfig,
    pub workload: WorkloadSpec,
    pub weights: ModelWeights,
    pub prefill: Prefill,
}

impl Setup {
    pub fn new(config: ModelConfig, workload: WorkloadSpec) -> Result<Self> {
        if workload.vocab_size != config.vocab_size {
            return Err(BenchError::Usage(format!(
                "workload vocabulary ({}) differs from the model's ({})",
                workload.vocab_size, config.vocab_size
            )));
        }
        let weights = sparse_to_dense::build_model(&config)?;
        let prefill = weights.prefill(&workload.generate()?)?;
        Ok(Self {
            config,
            workload,
            weights,
            prefill,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub k: usize,
    pub matches: usize,
    pub horizon: usize,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStudy {
    pub model: ModelConfig,
    pub workload: WorkloadSpec,
    pub rows: Vec<AgreementRow>,
    pub warnings: Vec<String>,
}

/// Removes repeated values, keeping first occurrences in order. Returns a
/// warning when anything was dropped.
fn dedup(values: &[usize], name: &str) -> (Vec<usize>, Option<String>) {
    let mut seen = BTreeSet::new();
    let unique: Vec<usize> = values.iter().copied().filter(|v| seen.insert(*v)).collect();
    let warning =
        (unique.len() < values.len()).then(|| format!("duplicate {name} values ignored: {values:?} -> {unique:?}"));
    (unique, warning)
}

/// One row per distinct `k`: how often a single sparse step agrees with the
/// dense model along the dense trajectory.
pub fn run_agreement_study(setup: &Setup, k_list: &[usize], horizon: usize) -> Result<AgreementStudy> {
    let (ks, warning) = dedup(k_list, "k");
    let rows = ks
        .par_iter()
        .map(|&k| {
            let a = measure_agreement_from_prefill(&setup.weights, &setup.prefill, k, horizon)?;
            Ok(AgreementRow {
                k,
                matches: a.matches,
                horizon: a.horizon,
                agreement: a.ratio(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AgreementStudy {
        model: setup.config.clone(),
        workload: setup.workload.clone(),
        rows,
        warnings: warning.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model: ModelConfig,
    pub workload: WorkloadSpec,
    pub k: usize,
    pub gamma: usize,
    pub max_new_tokens: usize,
    pub tokens_generated: usize,
    pub tokens: Vec<TokenId>,
    pub acceptance_rate: f64,
    pub agreement: f64,
    pub full_draft_rate: f64,
    /// `agreement ^ gamma`: the full-draft rate if token errors were
    /// independent. Compare with `full_draft_rate`.
    pub independent_full_draft_estimate: f64,
    pub rounds: usize,
    /// `None` when nothing was accepted and the average is undefined.
    pub modeled_speedup: Option<f64>,
    pub io_average: Option<f64>,
    pub modeled_speedup_with_bonus: f64,
    pub alpha_threshold: f64,
    pub io_sparse_units: u64,
    pub io_dense_units: u64,
    /// Dense rows read per generated token by the run, and by plain decoding.
    pub io_per_token: f64,
    pub io_per_token_vanilla: f64,
    /// Informational only; omitted unless timing was requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<String>,
}

/// Checks one speculative generation against dense greedy decoding.
fn decode_checked(
    setup: &Setup,
    k: usize,
    gamma: usize,
    max_new_tokens: usize,
    dense: &[TokenId],
) -> Result<(Vec<TokenId>, DecodeStats)> {
    let out = generate_from_prefill(
        &setup.weights,
        &setup.prefill,
        DecodeParams::new(k, gamma, max_new_tokens),
    )?;
    if out.tokens != dense {
        let position = out.tokens.iter().zip(dense).take_while(|(a, b)| a == b).count();
        return Err(BenchError::Lossless { k, gamma, position });
    }
    Ok((out.tokens, out.stats))
}

fn cost_input(setup: &Setup, k: usize, gamma: usize, alpha: f64) -> Result<CostModelInput> {
    // Selection keeps at most m_v rows whatever k asks for.
    Ok(CostModelInput::new(
        gamma as u64,
        k.min(setup.workload.m_v) as u64,
        setup.workload.m_v as u64,
        setup.workload.m_t as u64,
        alpha,
    )?)
}

/// Decodes `max_new_tokens` speculatively, verifies the output against dense
/// decoding, and reports acceptance, agreement and modeled cost.
pub fn run_speedup_experiment(
    setup: &Setup,
    k: usize,
    gamma: usize,
    max_new_tokens: usize,
    timing: bool,
) -> Result<(ExperimentResult, DecodeStats)> {
    let dense = generate_dense_from_prefill(&setup.weights, &setup.prefill, max_new_tokens, None)?;
    let started = Instant::now();
    let (tokens, stats) = decode_checked(setup, k, gamma, max_new_tokens, &dense)?;
    let wall_time_ms = timing.then(|| started.elapsed().as_secs_f64() * 1e3);
    let agreement = measure_agreement_from_prefill(&setup.weights, &setup.prefill, k, max_new_tokens.max(1))?.ratio();

    let alpha = stats.acceptance_rate();
    let cost = cost_input(setup, k, gamma, alpha)?;
    let produced = tokens.len().max(1) as f64;
    let result = ExperimentResult {
        model: setup.config.clone(),
        workload: setup.workload.clone(),
        k,
        gamma,
        max_new_tokens,
        tokens_generated: tokens.len(),
        acceptance_rate: alpha,
        agreement,
        full_draft_rate: stats.full_draft_rate(),
        independent_full_draft_estimate: agreement.powi(gamma as i32),
        rounds: stats.rounds.len(),
        modeled_speedup: cost.modeled_speedup().ok(),
        io_average: cost.io_average().ok(),
        modeled_speedup_with_bonus: cost.modeled_speedup_with_bonus(),
        alpha_threshold: cost.alpha_threshold(),
        io_sparse_units: stats.io_sparse_units,
        io_dense_units: stats.io_dense_units,
        io_per_token: (stats.io_sparse_units + stats.io_dense_units) as f64 / produced,
        io_per_token_vanilla: (setup.workload.m_v + setup.workload.m_t) as f64,
        wall_time_ms,
        trace: None,
        tokens,
    };
    Ok((result, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: usize,
    pub k: usize,
    pub alpha: Option<f64>,
    pub agreement: Option<f64>,
    pub modeled_speedup: Option<f64>,
    pub io_avg: Option<f64>,
    /// Why the cell has no metrics.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    #[serde(skip)]
    pub lossless_violation: bool,
}

/// Runs every `(gamma, k)` cell. Failed cells keep their coordinates and an
/// error message; rows are sorted by `(gamma, k)`.
pub fn run_sweep(
    setup: &Setup,
    gamma_list: &[usize],
    k_list: &[usize],
    max_new_tokens: usize,
) -> Result<Vec<SweepRow>> {
    if gamma_list.is_empty() || k_list.is_empty() {
        return Err(BenchError::Usage("sweep needs at least one gamma and one k".into()));
    }
    let (gammas, _) = dedup(gamma_list, "gamma");
    let (ks, _) = dedup(k_list, "k");
    let dense = generate_dense_from_prefill(&setup.weights, &setup.prefill, max_new_tokens, None)?;
    // Agreement depends on k only.
    let agreement: Vec<Option<f64>> = ks
        .par_iter()
        .map(|&k| {
            measure_agreement_from_prefill(&setup.weights, &setup.prefill, k, max_new_tokens.max(1))
                .ok()
                .map(|a| a.ratio())
        })
        .collect();
    let cells: Vec<(usize, usize, Option<f64>)> = gammas
        .iter()
        .flat_map(|&g| ks.iter().zip(&agreement).map(move |(&k, &a)| (g, k, a)))
        .collect();
    let mut rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(gamma, k, agreement)| {
            let cell = decode_checked(setup, k, gamma, max_new_tokens, &dense).and_then(|(_, stats)| {
                let alpha = stats.acceptance_rate();
                Ok((alpha, cost_input(setup, k, gamma, alpha)?))
            });
            match cell {
                Ok((alpha, cost)) => SweepRow {
                    gamma,
                    k,
                    alpha: Some(alpha),
                    agreement,
                    modeled_speedup: cost.modeled_speedup().ok(),
                    io_avg: cost.io_average().ok(),
                    error: None,
                    lossless_violation: false,
                },
                Err(e) => SweepRow {
                    gamma,
                    k,
                    alpha: None,
                    agreement: None,
                    modeled_speedup: None,
                    io_avg: None,
                    lossless_violation: matches!(e, BenchError::Lossless { .. }),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.gamma, r.k));
    Ok(rows)
}

/// Writes sweep rows as CSV with columns
/// `gamma,k,alpha,agreement,modeled_speedup,io_avg`; missing values are empty.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["gamma", "k", "alpha", "agreement", "modeled_speedup", "io_avg"])?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.gamma.to_string(),
            r.k.to_string(),
            cell(r.alpha),
            cell(r.agreement),
            cell(r.modeled_speedup),
            cell(r.io_avg),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_agreement_csv<W: Write>(rows: &[AgreementRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses `"1,2,5"` or ranges such as `"1-13"`, or a mix of both.
pub fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (
                    a.trim().parse().map_err(|_| format!("bad range start in {part:?}"))?,
                    b.trim().parse().map_err(|_| format!("bad range end in {part:?}"))?,
                );
                if a > b {
                    return Err(format!("empty range {part:?}"));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| format!("not a number: {part:?}"))?),
        }
    }
    if out.is_empty() {
        return Err("list is empty".into());
    }
    Ok(out)
}
