use std::collections::BTreeSet;

use omniprune::divprune::win_div_prune_with_ratios;
use omniprune::io::{read_ots, write_ots, OtsContainer};
use omniprune::relevance::window_relevance;
use omniprune::{
    allocate, build_schedule, greedy_maxmin, run_pipeline, select_topk, synth_generate, Boundaries, Modality,
    ModelConfig, RelevanceScores, RetentionSpec, SynthSpec, TokenStream, WindowLayout,
};
use proptest::prelude::*;

fn layouts() -> impl Strategy<Value = WindowLayout> {
    (1usize..6).prop_flat_map(|t| {
        (prop::collection::vec(0usize..40, t), prop::collection::vec(0usize..15, t))
            .prop_map(|(v, a)| WindowLayout::new(v, a).unwrap())
    })
}

fn boundaries(layers: usize) -> impl Strategy<Value = Boundaries> {
    prop::collection::vec(1..=layers, 4)
        .prop_map(|mut v| {
            v.sort_unstable();
            Boundaries::new(v[0], v[1], v[2], v[3])
        })
        .prop_filter("valid ordering", |b| b.shallow < b.mid1 && b.mid2 < b.late)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn allocation_conserves_total(layout in layouts(), rv in 0.0f64..=1.0, ra in 0.0f64..=1.0, seed in any::<u64>()) {
        let t = layout.windows();
        let w = |i: usize, salt: u64| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64 * 1442695040888963407 + salt)) >> 40) as f64 + 1.0;
        let s_v: Vec<f64> = (0..t).map(|i| if layout.n_v[i] > 0 { w(i, 1) } else { 0.0 }).collect();
        let s_a: Vec<f64> = (0..t).map(|i| if layout.n_a[i] > 0 { w(i, 2) } else { 0.0 }).collect();
        let norm = |s: Vec<f64>| { let z: f64 = s.iter().sum(); if z > 0.0 { s.iter().map(|x| x / z).collect() } else { s } };
        let rel = RelevanceScores::from_modality_weights(norm(s_v), norm(s_a), 0.1).unwrap();
        let totals = (layout.total_v(), layout.total_a());
        let plan = allocate(&rel, rv, ra, totals, &layout).unwrap();
        let target = (rv * totals.0 as f64 + ra * totals.1 as f64).round() as usize;
        prop_assert_eq!(plan.b.iter().sum::<usize>(), target);
        for i in 0..t {
            prop_assert!(plan.b_v[i] <= layout.n_v[i] && plan.b_a[i] <= layout.n_a[i]);
            prop_assert_eq!(plan.b_v[i] + plan.b_a[i], plan.b[i]);
        }
    }

    #[test]
    fn schedule_mean_equals_ratio(b in boundaries(28), ratio in 0.0f64..0.6, lambda in 1.0f64..2.0) {
        let config = ModelConfig { boundaries: b, ..ModelConfig::qwen25_omni_7b() };
        if let Ok(plan) = build_schedule(&config, ratio, lambda) {
            prop_assert!((plan.mean() - ratio).abs() < 1e-9);
            prop_assert!(plan.per_layer_trr.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(plan.per_layer_trr.iter().all(|&r| (0.0..=1.0).contains(&r)));
        }
    }

    #[test]
    fn relevance_is_shift_and_permutation_invariant(
        scores in prop::collection::vec(0.0f64..1.0, 12),
        shift in -0.5f64..0.5,
        rot in 0usize..4,
    ) {
        // four windows of three visual tokens each
        let layout = WindowLayout::uniform(4, 3, 0);
        let base = window_relevance(&scores, &[], &layout, 0.1).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let moved = window_relevance(&shifted, &[], &layout, 0.1).unwrap();
        for t in 0..4 {
            prop_assert!((base.s[t] - moved.s[t]).abs() < 1e-12);
        }
        let rotated: Vec<f64> = (0..12).map(|i| scores[(i + 3 * rot) % 12]).collect();
        let perm = window_relevance(&rotated, &[], &layout, 0.1).unwrap();
        for t in 0..4 {
            prop_assert!((perm.s[t] - base.s[(t + rot) % 4]).abs() < 1e-12);
        }
        prop_assert!((base.s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_is_nested(scores in prop::collection::vec(0.0f64..1.0, 1..30), k in 0usize..30) {
        let k = k.min(scores.len() - 1);
        let small: BTreeSet<usize> = select_topk(&scores, k).unwrap().into_iter().collect();
        let large: BTreeSet<usize> = select_topk(&scores, k + 1).unwrap().into_iter().collect();
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn greedy_is_deterministic_and_prefix_stable(
        emb in prop::collection::vec(-1.0f32..1.0, 24),
        weights in prop::collection::vec(0.01f64..1.0, 8),
        k in 1usize..8,
    ) {
        let a = greedy_maxmin(&emb, 3, &weights, k).unwrap();
        let b = greedy_maxmin(&emb, 3, &weights, k).unwrap();
        prop_assert_eq!(&a, &b);
        let more = greedy_maxmin(&emb, 3, &weights, k + 1).unwrap();
        prop_assert_eq!(&more.order[..k], &a.order[..]);
    }

    #[test]
    fn ots_round_trip(dim in 1usize..5, rows in prop::collection::vec((0u8..3, any::<u32>()), 0..20)) {
        let mut modality = Vec::new();
        let mut window = Vec::new();
        let mut emb = Vec::new();
        let mut text = Vec::new();
        for (i, (m, bits)) in rows.iter().enumerate() {
            let vals = (0..dim).map(|k| f32::from_bits(bits.rotate_left(k as u32) & 0xBF7F_FFFF));
            if *m == 2 {
                text.extend(vals);
            } else {
                modality.push(if *m == 0 { Modality::Visual } else { Modality::Audio });
                window.push(Some((i / 7) as u32));
                emb.extend(vals);
            }
        }
        let n_text = text.len() / dim;
        modality.extend(std::iter::repeat_n(Modality::Text, n_text));
        window.extend(std::iter::repeat_n(None, n_text));
        emb.extend(text);
        let n = modality.len();
        let s = TokenStream::new(dim, 3, emb, modality, window, (0..n as u64).map(|p| p * 2).collect()).unwrap();
        let c = OtsContainer::new(s);
        let bytes = write_ots(&c);
        let back = read_ots(&bytes).unwrap();
        prop_assert_eq!(write_ots(&back), bytes);
        prop_assert_eq!(back.stream().positions(), c.stream().positions());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stage1_is_window_local(seed in any::<u64>(), rv in 0.1f64..1.0, ra in 0.1f64..1.0) {
        let (s, _) = synth_generate(&SynthSpec::new(seed, 3, 6, 12, 5, 2)).unwrap();
        let layout = s.layout();
        let base = win_div_prune_with_ratios(&s, &layout, (rv, ra), |_| None).unwrap();
        // perturb window 2 only
        let rows: Vec<usize> = (0..s.len()).collect();
        let mut emb = s.embeddings().to_vec();
        for r in rows.iter().filter(|&&r| s.window_id(r) == Some(2)) {
            for x in &mut emb[r * 6..(r + 1) * 6] {
                *x = -*x * 1.5 + 0.25;
            }
        }
        let other = TokenStream::new(6, 3, emb, s.modalities().to_vec(), s.window_ids().to_vec(), s.positions().to_vec()).unwrap();
        let res = win_div_prune_with_ratios(&other, &layout, (rv, ra), |_| None).unwrap();
        let in_first_two = |kept: &[u64]| kept.iter().copied().filter(|&p| s.window_id(p as usize).is_some_and(|w| w < 2)).collect::<Vec<_>>();
        prop_assert_eq!(in_first_two(&base.kept), in_first_two(&res.kept));
        prop_assert_eq!(base.per_window_kept, res.per_window_kept);
    }

    #[test]
    fn pipeline_survivors_are_nested(seed in any::<u64>()) {
        let config = ModelConfig {
            layers: 12, d_model: 32, d_ff: 64, n_heads: 2,
            boundaries: Boundaries::new(6, 8, 9, 11),
        };
        let (s, o) = synth_generate(&SynthSpec::new(seed, 3, 8, 30, 8, 4)).unwrap();
        let run = run_pipeline(&s, &o, &config, &RetentionSpec::new(0.3, 0.6, 1.3, 0.1)).unwrap();
        let t = &run.trace;
        let mut prev: BTreeSet<u64> = t.stage1.kept.iter().copied().collect();
        prop_assert_eq!(t.seq_len[0], prev.len() + 4);
        for sel in &t.selections {
            let now: BTreeSet<u64> = sel.kept.iter().copied().collect();
            prop_assert!(now.is_subset(&prev));
            let dropped: usize = sel.dropped.iter().map(|d| d[0] + d[1]).sum();
            prop_assert_eq!(prev.len() - now.len(), dropped);
            prev = now;
        }
        prop_assert!(t.seq_len.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(t.seq_len[10..].iter().all(|&n| n == 4));
    }
}
