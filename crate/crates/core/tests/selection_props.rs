use proptest::prelude::*;
use ros_core::embed::{cosine_distance, euclidean, EmbeddingVector, Metric};
use ros_core::select::{score_distances, select, SelectionConfig};
use ros_core::teacher::{CandidateSource, ReasoningCandidate};

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, dim)
}

fn nonzero(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    vector(dim).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

fn ev(v: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(v.to_vec()).unwrap()
}

fn candidate(i: usize, text: &str) -> ReasoningCandidate {
    ReasoningCandidate {
        text: text.into(),
        source: CandidateSource::Positive,
        candidate_index: i,
        prompt_hash: "h".into(),
    }
}

// exp(d_pos/τ) / Σ exp(d_neg/τ), evaluated without logs.
fn direct_score(d_pos: f64, d_negs: &[f64], tau: f64) -> f64 {
    (d_pos / tau).exp() / d_negs.iter().map(|d| (d / tau).exp()).sum::<f64>()
}

#[test]
fn distance_examples() {
    assert_eq!(euclidean(&ev(&[0.0, 0.0]), &ev(&[3.0, 4.0])).unwrap(), 5.0);
    assert_eq!(euclidean(&ev(&[1.0, 2.0, 3.0]), &ev(&[4.0, 6.0, 3.0])).unwrap(), 5.0);
    assert!(cosine_distance(&ev(&[1.0, 2.0]), &ev(&[1.0, 2.0])).unwrap().abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distances_are_symmetric(u in nonzero(8), v in nonzero(8)) {
        for m in [Metric::Euclidean, Metric::Cosine] {
            prop_assert_eq!(m.distance(&ev(&u), &ev(&v)).unwrap(), m.distance(&ev(&v), &ev(&u)).unwrap());
        }
    }

    #[test]
    fn euclidean_triangle_inequality(u in vector(6), v in vector(6), w in vector(6)) {
        let (u, v, w) = (ev(&u), ev(&v), ev(&w));
        let lhs = euclidean(&u, &w).unwrap();
        let rhs = euclidean(&u, &v).unwrap() + euclidean(&v, &w).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant(u in nonzero(6), v in nonzero(6), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        let base = cosine_distance(&ev(&u), &ev(&v)).unwrap();
        let su: Vec<f64> = u.iter().map(|x| x * a).collect();
        let sv: Vec<f64> = v.iter().map(|x| x * b).collect();
        prop_assert!((cosine_distance(&ev(&su), &ev(&sv)).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn score_decreases_with_positive_distance(
        d_pos in 0.0f64..20.0,
        delta in 1e-3f64..5.0,
        d_negs in prop::collection::vec(0.0f64..20.0, 1..8),
        tau in 0.1f64..10.0,
    ) {
        let near = score_distances(d_pos, &d_negs, tau).unwrap();
        let far = score_distances(d_pos + delta, &d_negs, tau).unwrap();
        prop_assert!(near.log_score < far.log_score);
    }

    #[test]
    fn score_decreases_as_negatives_move_away(
        d_pos in 0.0f64..20.0,
        moves in prop::collection::vec((0.0f64..20.0, 1e-3f64..5.0), 1..8),
        tau in 0.1f64..10.0,
    ) {
        let d_negs: Vec<f64> = moves.iter().map(|(d, _)| *d).collect();
        let moved: Vec<f64> = moves.iter().map(|(d, delta)| d + delta).collect();
        let before = score_distances(d_pos, &d_negs, tau).unwrap();
        let after = score_distances(d_pos, &moved, tau).unwrap();
        prop_assert!(after.log_score < before.log_score);
    }

    #[test]
    fn log_and_direct_scores_agree(
        d_pos in 0.0f64..20.0,
        d_negs in prop::collection::vec(0.0f64..20.0, 1..8),
        tau in 0.1f64..10.0,
    ) {
        let s = score_distances(d_pos, &d_negs, tau).unwrap();
        let direct = direct_score(d_pos, &d_negs, tau);
        prop_assert!(((s.score - direct) / direct).abs() < 1e-9, "{} vs {}", s.score, direct);
    }

    #[test]
    fn single_negative_argmin_ignores_tau(
        cands in prop::collection::vec(vector(4), 2..6),
        pos in vector(4),
        neg in vector(4),
    ) {
        let pairs: Vec<_> = cands.iter().enumerate().map(|(i, v)| (candidate(i, &format!("c{i}")), ev(v))).collect();
        let picks: Vec<usize> = [0.1, 0.8, 10.0]
            .iter()
            .map(|&tau| {
                let cfg = SelectionConfig { tau, n: 1, ..Default::default() };
                select(&pairs, &ev(&pos), &[ev(&neg)], &cfg).unwrap().0
            })
            .collect();
        prop_assert!(picks.iter().all(|&p| p == picks[0]), "{:?}", picks);
    }

    #[test]
    fn selection_is_order_equivariant(
        cands in prop::collection::vec(vector(4), 1..7),
        pos in vector(4),
        negs in prop::collection::vec(vector(4), 1..7),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let cfg = SelectionConfig::default();
        let pairs: Vec<_> = cands.iter().enumerate().map(|(i, v)| (candidate(i, &format!("c{i}")), ev(v))).collect();
        let negs: Vec<_> = negs.iter().map(|v| ev(v)).collect();
        let (at, _) = select(&pairs, &ev(&pos), &negs, &cfg).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let (at2, audit) = select(&shuffled, &ev(&pos), &negs, &cfg).unwrap();
        prop_assert_eq!(&pairs[at].0.text, &shuffled[at2].0.text);
        prop_assert_eq!(audit.iter().filter(|a| a.selected).count(), 1);
    }

    #[test]
    fn identical_candidates_pick_lowest_index(
        v in vector(4),
        copies in 2usize..6,
        pos in vector(4),
        negs in prop::collection::vec(vector(4), 1..4),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut pairs: Vec<_> = (0..copies).map(|i| (candidate(i, "same"), ev(&v))).collect();
        pairs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let negs: Vec<_> = negs.iter().map(|v| ev(v)).collect();
        let (at, _) = select(&pairs, &ev(&pos), &negs, &SelectionConfig::default()).unwrap();
        prop_assert_eq!(pairs[at].0.candidate_index, 0);
    }
}
