//! Synthetic visual + textual inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{TokenId, TokenSequence};
use crate::error::{Error, Result};

/// Tokens per synthetic frame in the block-correlated mode.
pub const FRAME_LEN: usize = 16;
/// Chance that a token changes from one frame to the next.
const DRIFT: f64 = 0.1;
/// Chance that a frame starts a new scene instead of drifting.
const SCENE_CUT: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisualStructure {
    /// Every visual token drawn independently.
    UniformRandom,
    /// Frames of [`FRAME_LEN`] tokens that mostly repeat the previous frame,
    /// like consecutive video frames of one scene.
    BlockCorrelated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub m_v: usize,
    pub m_t: usize,
    pub vocab_size: usize,
    pub workload_seed: u64,
    pub visual_structure: VisualStructure,
}

impl WorkloadSpec {
    pub fn new(
        m_v: usize,
        m_t: usize,
        vocab_size: usize,
        workload_seed: u64,
        visual_structure: VisualStructure,
    ) -> Self {
        Self {
            m_v,
            m_t,
            vocab_size,
            workload_seed,
            visual_structure,
        }
    }

    /// Toy default: 512 visual and 32 textual tokens over a 512-token vocabulary.
    pub fn toy(workload_seed: u64, visual_structure: VisualStructure) -> Self {
        Self::new(512, 32, 512, workload_seed, visual_structure)
    }

    /// Draws the token sequence. Deterministic in `workload_seed`.
    pub fn generate(&self) -> Result<TokenSequence> {
        if self.vocab_size == 0 {
            return Err(Error::Input("vocab_size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.workload_seed);
        let vocab = self.vocab_size as TokenId;
        let visual = match self.visual_structure {
            VisualStructure::UniformRandom => (0..self.m_v).map(|_| rng.random_range(0..vocab)).collect(),
            VisualStructure::BlockCorrelated => {
                let mut out = Vec::with_capacity(self.m_v);
                let mut frame: Vec<TokenId> = (0..FRAME_LEN).map(|_| rng.random_range(0..vocab)).collect();
                while out.len() < self.m_v {
                    let take = FRAME_LEN.min(self.m_v - out.len());
                    out.extend_from_slice(&frame[..take]);
                    if rng.random_bool(SCENE_CUT) {
                        frame.iter_mut().for_each(|t| *t = rng.random_range(0..vocab));
                    } else {
                        for t in frame.iter_mut() {
                            if rng.random_bool(DRIFT) {
                                *t = rng.random_range(0..vocab);
                            }
                        }
                    }
                }
                out
            }
        };
        let textual = (0..self.m_t).map(|_| rng.random_range(0..vocab)).collect();
        TokenSequence::new(visual, textual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = WorkloadSpec::toy(1, VisualStructure::BlockCorrelated)
            .generate()
            .unwrap();
        let b = WorkloadSpec::toy(1, VisualStructure::BlockCorrelated)
            .generate()
            .unwrap();
        let c = WorkloadSpec::toy(2, VisualStructure::BlockCorrelated)
            .generate()
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!((a.m_v(), a.m_t()), (512, 32));
    }

    #[test]
    fn block_mode_repeats_frames() {
        let seq = WorkloadSpec::new(256, 4, 512, 9, VisualStructure::BlockCorrelated)
            .generate()
            .unwrap();
        let v = seq.visual();
        let same = (FRAME_LEN..v.len()).filter(|&i| v[i] == v[i - FRAME_LEN]).count();
        // Most positions repeat the previous frame.
        assert!(same * 2 > v.len() - FRAME_LEN, "{same}");

        let uniform = WorkloadSpec::new(256, 4, 512, 9, VisualStructure::UniformRandom)
            .generate()
            .unwrap();
        let u = uniform.visual();
        let same_u = (FRAME_LEN..u.len()).filter(|&i| u[i] == u[i - FRAME_LEN]).count();
        assert!(same_u < 10);
    }

    #[test]
    fn ids_in_vocab_and_partial_last_frame() {
        let seq = WorkloadSpec::new(37, 3, 5, 0, VisualStructure::BlockCorrelated)
            .generate()
            .unwrap();
        assert_eq!(seq.m_v(), 37);
        assert!(seq.tokens().iter().all(|&t| t < 5));
    }
}
