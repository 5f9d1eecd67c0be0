//! Model hyperparameters and the two-part (visual, textual) input sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token identifier. Always in `[0, vocab_size)` for a validated sequence.
pub type TokenId = u32;

/// Architecture hyperparameters of the toy decoder.
///
/// Query heads are grouped onto KV heads in contiguous blocks: query head `h`
/// reads KV head `h / group_size()`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Builds a config with `d_head = d_model / n_q_heads` and validates it.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_q_heads: usize,
        n_kv_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let d_head = d_model.checked_div(n_q_heads).unwrap_or(0);
        let config = Self {
            n_layers,
            d_model,
            n_q_heads,
            n_kv_heads,
            d_head,
            vocab_size,
            max_seq_len,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    /// The small default used by the benchmark harness and the acceptance suite:
    /// 4 layers, width 128, 8 query heads over 2 KV heads, 512-token vocabulary.
    pub fn toy(seed: u64) -> Self {
        Self::new(4, 128, 8, 2, 512, 1024, seed).expect("toy config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_q_heads ({}) is not a multiple of n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.n_q_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "d_model ({}) != n_q_heads ({}) * d_head ({})",
                self.d_model, self.n_q_heads, self.d_head
            )));
        }
        if self.vocab_size > TokenId::MAX as usize {
            return Err(Error::Config("vocab_size does not fit in a token id".into()));
        }
        Ok(())
    }

    /// Number of query heads sharing one KV head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    /// Feed-forward hidden width.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}

/// An input of `m_v` visual tokens followed by `m_t` textual tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    visual: Vec<TokenId>,
    textual: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(visual: Vec<TokenId>, textual: Vec<TokenId>) -> Result<Self> {
        if visual.is_empty() {
            return Err(Error::Input("at least one visual token is required".into()));
        }
        if textual.is_empty() {
            return Err(Error::Input("at least one textual token is required".into()));
        }
        Ok(Self { visual, textual })
    }

    pub fn visual(&self) -> &[TokenId] {
        &self.visual
    }

    pub fn textual(&self) -> &[TokenId] {
        &self.textual
    }

    pub fn m_v(&self) -> usize {
        self.visual.len()
    }

    pub fn m_t(&self) -> usize {
        self.textual.len()
    }

    pub fn len(&self) -> usize {
        self.visual.len() + self.textual.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All tokens in position order, visual first.
    pub fn tokens(&self) -> Vec<TokenId> {
        self.visual.iter().chain(&self.textual).copied().collect()
    }

    /// Checks the sequence against a model: ids in range and `m <= max_seq_len`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if let Some(&bad) = self
            .visual
            .iter()
            .chain(&self.textual)
            .find(|&&t| t as usize >= config.vocab_size)
        {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of size {}",
                config.vocab_size
            )));
        }
        if self.len() > config.max_seq_len {
            return Err(Error::Capacity {
                needed: self.len(),
                max: config.max_seq_len,
            });
        }
        Ok(())
    }
}
