//! Memory-I/O cost of sparse-to-dense decoding, in cache rows.
//!
//! Per round, the draft reads `K + m_t` rows for each of its `gamma` steps and
//! the dense verification reads all `m_v + m_t` rows once:
//!
//! ```text
//! io_sparse  = gamma * (K + m_t)
//! io_dense   = m_v + m_t
//! io_total   = io_sparse + io_dense
//! io_average = io_total / (alpha * gamma)
//! ```
//!
//! where `alpha` is the fraction of drafted tokens that are accepted. Vanilla
//! decoding reads `m_v + m_t` rows per token, so the scheme wins when
//!
//! ```text
//! alpha > (K + m_t) / (m_v + m_t) + 1 / gamma
//! ```
//!
//! Layer and head counts multiply every term equally and cancel in all ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelInput {
    pub gamma: u64,
    pub k: u64,
    pub m_v: u64,
    pub m_t: u64,
    pub alpha: f64,
}

impl CostModelInput {
    pub fn new(gamma: u64, k: u64, m_v: u64, m_t: u64, alpha: f64) -> Result<Self> {
        if gamma == 0 {
            return Err(Error::CostInput("gamma must be at least 1".into()));
        }
        if m_v == 0 {
            return Err(Error::CostInput("m_v must be at least 1".into()));
        }
        if k > m_v {
            return Err(Error::CostInput(format!("k ({k}) exceeds m_v ({m_v})")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::CostInput(format!("alpha ({alpha}) is not in [0, 1]")));
        }
        Ok(Self {
            gamma,
            k,
            m_v,
            m_t,
            alpha,
        })
    }

    /// Same point with a different acceptance rate.
    pub fn with_alpha(self, alpha: f64) -> Result<Self> {
        Self::new(self.gamma, self.k, self.m_v, self.m_t, alpha)
    }

    pub fn io_sparse(&self) -> u64 {
        self.gamma * (self.k + self.m_t)
    }

    pub fn io_dense(&self) -> u64 {
        self.m_v + self.m_t
    }

    pub fn io_total(&self) -> u64 {
        self.io_sparse() + self.io_dense()
    }

    pub fn io_vanilla_per_token(&self) -> f64 {
        (self.m_v + self.m_t) as f64
    }

    /// Rows read per accepted token.
    pub fn io_average(&self) -> Result<f64> {
        if self.alpha == 0.0 {
            return Err(Error::UndefinedAverage);
        }
        Ok(self.io_total() as f64 / (self.alpha * self.gamma as f64))
    }

    /// Extension: also credits the bonus token, `alpha * gamma + 1` tokens per
    /// round. Defined for every alpha.
    pub fn io_average_with_bonus(&self) -> f64 {
        self.io_total() as f64 / (self.alpha * self.gamma as f64 + 1.0)
    }

    /// Acceptance rate at which `io_average` equals vanilla decoding.
    pub fn alpha_threshold(&self) -> f64 {
        (self.k + self.m_t) as f64 / (self.m_v + self.m_t) as f64 + 1.0 / self.gamma as f64
    }

    /// Vanilla I/O per token over speculative I/O per token.
    pub fn modeled_speedup(&self) -> Result<f64> {
        Ok(self.io_vanilla_per_token() / self.io_average()?)
    }

    pub fn modeled_speedup_with_bonus(&self) -> f64 {
        self.io_vanilla_per_token() / self.io_average_with_bonus()
    }

    pub fn report(&self) -> Result<CostReport> {
        let io_average_per_token = self.io_average()?;
        let io_vanilla_per_token = self.io_vanilla_per_token();
        Ok(CostReport {
            input: *self,
            io_sparse: self.io_sparse(),
            io_dense: self.io_dense(),
            io_total: self.io_total(),
            io_average_per_token,
            io_vanilla_per_token,
            modeled_speedup: io_vanilla_per_token / io_average_per_token,
            alpha_threshold: self.alpha_threshold(),
            profitable: io_average_per_token < io_vanilla_per_token,
            io_average_with_bonus: self.io_average_with_bonus(),
            modeled_speedup_with_bonus: self.modeled_speedup_with_bonus(),
            unit: "token-rows".to_string(),
        })
    }
}

/// Evaluated cost model for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input: CostModelInput,
    pub io_sparse: u64,
    pub io_dense: u64,
    pub io_total: u64,
    pub io_average_per_token: f64,
    pub io_vanilla_per_token: f64,
    pub modeled_speedup: f64,
    pub alpha_threshold: f64,
    pub profitable: bool,
    /// Extension: bonus token counted as produced.
    pub io_average_with_bonus: f64,
    pub modeled_speedup_with_bonus: f64,
    pub unit: String,
}

/// I/O as actually incurred by a generation, where the rows after the visual
/// prompt grow as tokens are committed.
///
/// Each item is `(gamma, live_context)` for one round: the draft length and
/// the number of textual plus generated rows cached when the round started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveIo {
    pub io_sparse: u64,
    pub io_dense: u64,
}

impl EffectiveIo {
    pub fn from_rounds<I>(k_retained: usize, m_v: usize, rounds: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let (mut io_sparse, mut io_dense) = (0u64, 0u64);
        for (gamma, live) in rounds {
            io_sparse += (gamma * (k_retained + live)) as u64;
            io_dense += (m_v + live) as u64;
        }
        Self { io_sparse, io_dense }
    }
}
