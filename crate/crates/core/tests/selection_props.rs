#![allow(clippy::needless_range_loop)]

mod common;

use common::{brute_force_selection, record_as_attention, small_config, small_input};
use proptest::prelude::*;
use sparse_to_dense::{
    build_model, build_selection, score_visual_tokens, select_top_k, AttentionRecord, ModelConfig, SparseSelection,
};

/// Random attention rows `[layer][q_head][t][key]` with causal zeros.
fn rows_strategy(
    n_layers: usize,
    n_q_heads: usize,
    m_v: usize,
    m_t: usize,
) -> impl Strategy<Value = Vec<Vec<Vec<Vec<f64>>>>> {
    let m = m_v + m_t;
    prop::collection::vec(0.0f64..1.0, n_layers * n_q_heads * m_t * m).prop_map(move |raw| {
        let mut rows = vec![vec![vec![vec![0.0; m]; m_t]; n_q_heads]; n_layers];
        let mut it = raw.into_iter();
        for heads in rows.iter_mut() {
            for queries in heads.iter_mut() {
                for (t, row) in queries.iter_mut().enumerate() {
                    for p in row.iter_mut() {
                        *p = it.next().unwrap();
                    }
                    row[m_v + t + 1..].iter_mut().for_each(|p| *p = 0.0);
                    row[0] += 1e-3;
                    let sum: f64 = row.iter().sum();
                    row.iter_mut().for_each(|p| *p /= sum);
                }
            }
        }
        rows
    })
}

fn config(n_layers: usize) -> ModelConfig {
    ModelConfig::new(n_layers, 16, 4, 2, 32, 128, 0).unwrap()
}

#[test]
fn matches_brute_force_on_small_models() {
    for seed in 0..6 {
        let w = build_model(&small_config(seed)).unwrap();
        let prefill = w.prefill(&small_input(24, 5, seed + 100)).unwrap();
        let attention = record_as_attention(&prefill.record);
        for k in [0, 1, 6, 12, 23, 24] {
            let ours = build_selection(&prefill.record, w.config(), k).unwrap();
            let oracle = brute_force_selection(w.config(), &attention, 24, 5, k);
            for (layer, heads) in oracle.iter().enumerate() {
                for (kv, idx) in heads.iter().enumerate() {
                    assert_eq!(ours.indices(layer, kv), idx.as_slice(), "seed {seed} k {k}");
                }
            }
        }
    }
}

#[test]
fn json_round_trip() {
    let w = build_model(&small_config(1)).unwrap();
    let prefill = w.prefill(&small_input(16, 4, 0)).unwrap();
    let sel = build_selection(&prefill.record, w.config(), 5).unwrap();
    let back = SparseSelection::from_json(&sel.to_json(), 2, 2, 16, 4).unwrap();
    assert_eq!(back, sel);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn top_k_shape(scores in prop::collection::vec(-10.0f64..10.0, 1..64), k in 0usize..80) {
        let sel = select_top_k(&scores, k);
        prop_assert_eq!(sel.len(), k.min(scores.len()));
        prop_assert!(sel.windows(2).all(|p| p[0] < p[1]));
        let worst_kept = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in (0..scores.len()).filter(|i| !sel.contains(i)) {
            prop_assert!(scores[i] <= worst_kept);
        }
    }

    #[test]
    fn top_k_nested_in_k(scores in prop::collection::vec(0.0f64..1.0, 1..64), k in 0usize..63) {
        let small = select_top_k(&scores, k);
        let large = select_top_k(&scores, k + 1);
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn top_k_ties_prefer_lower_index(n in 1usize..40, k in 0usize..40) {
        let scores = vec![0.5; n];
        prop_assert_eq!(select_top_k(&scores, k), (0..k.min(n)).collect::<Vec<_>>());
    }

    #[test]
    fn top_k_permutation_equivariant(
        perm in Just((0..32usize).collect::<Vec<_>>()).prop_shuffle(),
        k in 0usize..33,
    ) {
        // Distinct scores, so no tie-breaking is involved.
        let scores: Vec<f64> = (0..32).map(|i| i as f64 * 0.37 % 5.0 + i as f64 * 1e-3).collect();
        let permuted: Vec<f64> = perm.iter().map(|&p| scores[p]).collect();
        let mut mapped: Vec<usize> = select_top_k(&permuted, k).into_iter().map(|i| perm[i]).collect();
        mapped.sort();
        prop_assert_eq!(mapped, select_top_k(&scores, k));
    }

    #[test]
    fn selection_scale_invariant(rows in rows_strategy(2, 4, 8, 3), k in 0usize..9) {
        let record = AttentionRecord::from_rows(&rows, 2, 8).unwrap();
        let base = build_selection(&record, &config(2), k).unwrap();
        for layer in 0..2 {
            for kv in 0..2 {
                let scores = score_visual_tokens(&record, layer, kv).unwrap();
                let scaled: Vec<f64> = scores.iter().map(|s| s * 4.0).collect();
                let kept = select_top_k(&scaled, k);
                prop_assert_eq!(kept.as_slice(), base.indices(layer, kv));
            }
        }
    }

    #[test]
    fn selection_heads_independent(
        rows in rows_strategy(2, 4, 8, 3),
        other in rows_strategy(1, 1, 8, 3),
        k in 0usize..9,
    ) {
        // Replace query head 3 of layer 1 (KV head 1); everything else keeps its selection.
        let record = AttentionRecord::from_rows(&rows, 2, 8).unwrap();
        let mut changed_rows = rows.clone();
        changed_rows[1][3] = other[0][0].clone();
        let changed = AttentionRecord::from_rows(&changed_rows, 2, 8).unwrap();
        let a = build_selection(&record, &config(2), k).unwrap();
        let b = build_selection(&changed, &config(2), k).unwrap();
        for (layer, kv) in [(0, 0), (0, 1), (1, 0)] {
            prop_assert_eq!(a.indices(layer, kv), b.indices(layer, kv));
        }
    }

    #[test]
    fn scores_sum_to_group_mass(rows in rows_strategy(1, 4, 6, 2)) {
        // Scores of a KV head add up to the visual mass of its grouped queries.
        let record = AttentionRecord::from_rows(&rows, 2, 6).unwrap();
        for kv in 0..2 {
            let total: f64 = score_visual_tokens(&record, 0, kv).unwrap().iter().sum();
            let mut mass = 0.0;
            for qh in kv * 2..kv * 2 + 2 {
                for t in 0..2 {
                    mass += rows[0][qh][t][..6].iter().sum::<f64>() / 2.0;
                }
            }
            prop_assert!((total - mass).abs() < 1e-12);
        }
    }
}
