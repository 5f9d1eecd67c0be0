//! Seeded parameters of the toy decoder.
//!
//! Every tensor is drawn from one `ChaCha8Rng` stream seeded with
//! `ModelConfig::seed`, in a fixed order (embedding, then each layer's
//! attention norm, Q, K, V, O, feed-forward norm, up, down, then the final
//! norm and the unembedding). Entries are uniform on `[-a, a]` with
//! `a = sqrt(3 / fan_in)`, giving unit-variance outputs for unit-variance
//! inputs. A salience structure is then planted on top (see `plant_salience`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;

/// Extra gain on the query projection. Sharpens attention so that a small
/// set of keys carries most of the mass, as in trained models.
pub(crate) const QUERY_GAIN: f64 = 3.0;

/// Fraction of the vocabulary marked salient.
const SALIENT_FRACTION: f64 = 0.125;
/// Embedding offset on the salience and always-on features.
const SALIENCE: f64 = 3.0;
/// Weight linking those features to the attention logits.
const SALIENCE_GAIN: f64 = 4.0;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = scale * (3.0 / cols as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out[r] = sum_c self[r][c] * x[c]`, summed in ascending `c`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Dot product with four interleaved partial sums, combined as
/// `(s0 + s1) + (s2 + s3)` plus the scalar tail. Every path uses this one
/// kernel, so the summation order is the same everywhere.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .fold(0.0, |s, (x, y)| s + x * y);
    for (x, y) in chunks_a.zip(chunks_b) {
        for lane in 0..4 {
            acc[lane] += x[lane] * y[lane];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn gains(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| 1.0 + rng.random_range(-0.1..=0.1)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    /// `(n_q_heads * d_head) x d_model`
    pub wq: Matrix,
    /// `(n_kv_heads * d_head) x d_model`
    pub wk: Matrix,
    pub wv: Matrix,
    /// `d_model x (n_q_heads * d_head)`
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    /// `d_ff x d_model`
    pub w_up: Matrix,
    /// `d_model x d_ff`
    pub w_down: Matrix,
}

/// All parameters, shared by the dense model and its sparse draft.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub unembedding: Matrix,
}

/// Validates `config` and draws its weights.
pub fn build_model(config: &ModelConfig) -> Result<ModelWeights> {
    ModelWeights::build(config)
}

impl ModelWeights {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let q_dim = config.n_q_heads * config.d_head;
        let kv_dim = config.kv_dim();
        let d_ff = config.d_ff();

        // Embedding rows are unit variance regardless of fan-in.
        let embedding = Matrix {
            rows: config.vocab_size,
            cols: d,
            data: (0..config.vocab_size * d)
                .map(|_| rng.random_range(-1.0..=1.0) * 3f64.sqrt())
                .collect(),
        };

        let mut embedding = embedding;
        for t in 0..config.vocab_size {
            if rng.random_bool(SALIENT_FRACTION) {
                embedding.data[t * d] += SALIENCE;
            }
            if d > 1 {
                embedding.data[t * d + 1] += SALIENCE;
            }
        }

        let mut layers: Vec<LayerWeights> = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: gains(d, &mut rng),
                wq: Matrix::random(q_dim, d, QUERY_GAIN, &mut rng),
                wk: Matrix::random(kv_dim, d, 1.0, &mut rng),
                wv: Matrix::random(kv_dim, d, 1.0, &mut rng),
                wo: Matrix::random(d, q_dim, 1.0, &mut rng),
                ffn_norm: gains(d, &mut rng),
                w_up: Matrix::random(d_ff, d, 1.0, &mut rng),
                w_down: Matrix::random(d, d_ff, 1.0, &mut rng),
            })
            .collect();
        if d > 1 {
            plant_salience(config, &mut layers);
        }
        let final_norm = gains(d, &mut rng);
        let unembedding = Matrix::random(config.vocab_size, d, 1.0, &mut rng);

        Ok(Self {
            config: config.clone(),
            embedding,
            layers,
            final_norm,
            unembedding,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// FNV-1a over the bit patterns of every parameter, in construction order.
    pub fn checksum(&self) -> u64 {
        let mut hash = Fnv::default();
        hash.write(self.embedding.as_slice());
        for layer in &self.layers {
            hash.write(&layer.attn_norm);
            hash.write(layer.wq.as_slice());
            hash.write(layer.wk.as_slice());
            hash.write(layer.wv.as_slice());
            hash.write(layer.wo.as_slice());
            hash.write(&layer.ffn_norm);
            hash.write(layer.w_up.as_slice());
            hash.write(layer.w_down.as_slice());
        }
        hash.write(&self.final_norm);
        hash.write(self.unembedding.as_slice());
        hash.0
    }
}

/// Trained models attend heavily to a small, query-independent set of
/// tokens. Random weights have no such structure, so it is planted: model
/// dimension 0 carries a salience feature present only in salient tokens'
/// embeddings, and dimension 1 an always-on feature. Every layer maps
/// dimension 0 into each key head, and dimension 1 into each query head, on
/// the slowest-rotating rotary coordinate so the product barely depends on
/// relative position. Every query then favours salient keys.
fn plant_salience(config: &ModelConfig, layers: &mut [LayerWeights]) {
    let d = config.d_model;
    // First coordinate of the last rotary pair, or the unrotated odd tail.
    let slot = config.d_head - 1 - (config.d_head + 1) % 2;
    for layer in layers {
        for h in 0..config.n_kv_heads {
            layer.wk.data[(h * config.d_head + slot) * d] += SALIENCE_GAIN;
        }
        for h in 0..config.n_q_heads {
            layer.wq.data[(h * config.d_head + slot) * d + 1] += SALIENCE_GAIN;
        }
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, values: &[f64]) {
        for v in values {
            for byte in v.to_bits().to_le_bytes() {
                self.0 ^= u64::from(byte);
                self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
}
