//! Property tests for the invariants of corpus preparation, evaluation and
//! persistence.

use std::collections::HashSet;

use detm_core::checkpoint::{Checkpoint, TensorData};
use detm_core::corpus::{
    build_vocabulary, make_subdocuments, smooth_window_stats, split_corpus, Corpus, Document, EncodedDoc, SubDocument,
    WindowSpec, WindowStats, DEFAULT_SPLIT,
};
use detm_core::eval::{mark_best, per_word_nll, seed_variance, CooccurrenceCounts, EvalMode};
use detm_core::model::{gaussian_kl, init_model, ModelConfig};
use detm_core::trainer::{TrainingConfig, TrainingHistory};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "d", "e", "f", "g", "h"]).prop_map(str::to_string)
}

fn document(id: usize) -> impl Strategy<Value = Document> {
    (prop::collection::vec(word(), 0..60), -500i64..2000).prop_map(move |(tokens, time)| Document {
        id: format!("d{id}"),
        tokens,
        time,
    })
}

fn corpus() -> impl Strategy<Value = Corpus> {
    (1usize..40)
        .prop_flat_map(|n| (0..n).map(document).collect::<Vec<_>>())
        .prop_map(|docs| Corpus::from_documents(docs).unwrap())
}

fn normalized_rows(rng: &mut ChaCha8Rng, empty: &[bool], v: usize) -> Array2<f64> {
    let mut m = Array2::zeros((empty.len(), v));
    for (i, &e) in empty.iter().enumerate() {
        if !e {
            let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            for (j, x) in raw.into_iter().enumerate() {
                m[[i, j]] = x / s;
            }
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunks_concatenate_to_the_document(doc in document(0), max in 1usize..30) {
        let subs = make_subdocuments(&doc, max).unwrap();
        let joined: Vec<String> = subs.iter().flat_map(|s| s.tokens.clone()).collect();
        prop_assert_eq!(&joined, &doc.tokens);
        for (i, s) in subs.iter().enumerate() {
            prop_assert_eq!(s.index, i);
            prop_assert!(!s.tokens.is_empty() && s.tokens.len() <= max);
            if i + 1 < subs.len() {
                prop_assert_eq!(s.tokens.len(), max);
            }
        }
    }

    #[test]
    fn splits_partition_the_corpus(c in corpus(), seed in any::<u64>()) {
        let split = split_corpus(&c, DEFAULT_SPLIT, seed).unwrap();
        let ids = |docs: &[Document]| docs.iter().map(|d| d.id.clone()).collect::<HashSet<_>>();
        let (tr, va, te) = (ids(&split.train), ids(&split.validation), ids(&split.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(tr.len() + va.len() + te.len(), c.len());
        let again = split_corpus(&c, DEFAULT_SPLIT, seed).unwrap();
        prop_assert_eq!(split, again);
    }

    #[test]
    fn smoothing_normalizes_and_is_idempotent(mask in prop::collection::vec(any::<bool>(), 1..32), keep in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let mut empty = mask;
        let k = keep.index(empty.len());
        empty[k] = false;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = normalized_rows(&mut rng, &empty, 4);
        let raw = WindowStats { matrix: matrix.clone(), empty_mask: empty.clone(), smoothed: false };
        let once = smooth_window_stats(&raw).unwrap();
        for (i, row) in once.matrix.rows().into_iter().enumerate() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
            if !empty[i] {
                prop_assert_eq!(row, matrix.row(i));
            }
        }
        let twice = smooth_window_stats(&once).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn larger_vocabularies_keep_smaller_ones(c in corpus(), small in 1usize..8, extra in 0usize..8, cap in 0.1f64..1.0) {
        let subs: Vec<SubDocument> = c.documents.iter().flat_map(|d| make_subdocuments(d, 10).unwrap()).collect();
        prop_assume!(!subs.is_empty());
        let a = build_vocabulary(&subs, small, cap).unwrap();
        let b = build_vocabulary(&subs, small + extra, cap).unwrap();
        let bigger: HashSet<&String> = b.tokens().iter().collect();
        prop_assert!(a.tokens().iter().all(|t| bigger.contains(t)));
        for (i, t) in b.tokens().iter().enumerate() {
            prop_assert_eq!(b.index_of(t), Some(i));
            prop_assert!(b.subdoc_fraction()[i] <= cap);
        }
    }

    #[test]
    fn window_assignment_is_monotone(lo in -3000i64..2000, width in 1i64..3000, count in 2usize..40, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let spec = WindowSpec::new(count, lo, lo + width).unwrap();
        let d1 = lo + (a.min(b) * width as f64) as i64;
        let d2 = lo + (a.max(b) * width as f64) as i64;
        let (w1, w2) = (spec.window_of(d1).unwrap(), spec.window_of(d2).unwrap());
        prop_assert!(w1 <= w2 && w2 < count);
        prop_assert_eq!(spec.window_of(lo + width).unwrap(), count - 1);
        prop_assert_eq!(spec.window_of(lo).unwrap(), 0);
    }

    #[test]
    fn nll_ignores_order_and_duplication(seed in any::<u64>(), n in 1usize..12) {
        let cfg = ModelConfig { encoder_hidden: 6, rnn_hidden: 3, ..ModelConfig::new(3, 2, 9, 4) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = Array2::from_shape_simple_fn((9, 4), || rng.random_range(-1.0..1.0));
        let params = init_model(&cfg, &rho, seed).unwrap();
        let docs: Vec<EncodedDoc> = (0..n)
            .map(|i| EncodedDoc::new(i % 2, vec![(rng.random_range(0..3), 2.0), (rng.random_range(3..9), 1.0)]))
            .collect();
        let stats = smooth_window_stats(&WindowStats::from_encoded(&docs, 9, 2).unwrap()).unwrap();
        let base = per_word_nll(&params, &docs, &stats, EvalMode::Deterministic).unwrap().per_word_nll;
        let mut shuffled: Vec<EncodedDoc> = docs.iter().rev().cloned().collect();
        shuffled.rotate_left(n / 2);
        let doubled: Vec<EncodedDoc> = docs.iter().chain(docs.iter()).cloned().collect();
        for variant in [shuffled, doubled] {
            let other = per_word_nll(&params, &variant, &stats, EvalMode::Deterministic).unwrap().per_word_nll;
            prop_assert!((other - base).abs() <= 1e-12 * base.abs());
        }
    }

    #[test]
    fn npmi_stays_in_bounds(docs in prop::collection::vec(prop::collection::vec(prop::option::weighted(0.9, 0usize..6), 0..25), 1..10), context in 1usize..12) {
        let all: HashSet<usize> = (0..6).collect();
        let counts = CooccurrenceCounts::count(&docs, context, &all);
        for a in 0..6 {
            for b in 0..6 {
                if a != b {
                    let s = counts.npmi(a, b);
                    prop_assert!((-1.0..=1.0).contains(&s));
                    prop_assert_eq!(s, counts.npmi(b, a));
                }
            }
        }
    }

    // dyadic values keep shifted gaps exact
    #[test]
    fn mark_best_ignores_shifts_and_tracks_permutations(
        row in prop::collection::vec(0i32..64, 1..8),
        shift in -256i32..256,
        sigma in 0i32..8,
        perm_seed in any::<u64>(),
    ) {
        let as_f = |v: i32| f64::from(v) / 64.0;
        let values: Vec<f64> = row.iter().map(|&v| as_f(v)).collect();
        let two_sigma = as_f(sigma);
        let best = mark_best(&values, two_sigma);
        let shifted: Vec<f64> = row.iter().map(|&v| as_f(v + shift)).collect();
        prop_assert_eq!(mark_best(&shifted, two_sigma), best);

        let mut order: Vec<usize> = (0..values.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        let expected = best.map(|b| order.iter().position(|&i| i == b).unwrap());
        prop_assert_eq!(mark_best(&permuted, two_sigma), expected);

        if let Some(b) = best {
            let runner_up = values.iter().enumerate().filter(|(i, _)| *i != b).map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
            prop_assert!(runner_up - values[b] > two_sigma);
        }
    }

    #[test]
    fn seed_variance_scales_and_matches_two_pass(scores in prop::collection::vec(5.0f64..9.0, 2..30), c in -4.0f64..4.0) {
        let est = seed_variance(&scores).unwrap();
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let two_pass = 2.0 * (scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        prop_assert!((est.two_sigma - two_pass).abs() <= 1e-12);
        let scaled: Vec<f64> = scores.iter().map(|x| c * x).collect();
        let s = seed_variance(&scaled).unwrap().two_sigma;
        prop_assert!((s - c.abs() * est.two_sigma).abs() <= 1e-9 * (1.0 + s));
    }

    #[test]
    fn kl_is_nonnegative(mq in -5.0f64..5.0, mp in -5.0f64..5.0, lq in -8.0f64..8.0, lp in -8.0f64..8.0) {
        prop_assert!(gaussian_kl(&[mq], &[lq], &[mp], &[lp]).unwrap() >= -1e-12);
        prop_assert!(gaussian_kl(&[mq], &[lq], &[mq], &[lq]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tensors_round_trip_bit_exactly(values in prop::collection::vec(any::<f64>(), 1..40)) {
        let n = values.len();
        let t = Array2::from_shape_vec((1, n), values).unwrap();
        let back = TensorData::encode(&t).decode().unwrap();
        let bits = |m: &Array2<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&t), bits(&back));
    }
}

#[test]
fn twenty_run_variance_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let scores: Vec<f64> = (0..20).map(|_| 7.05 + rng.random_range(-0.03..0.03)).collect();
    let mean = scores.iter().sum::<f64>() / 20.0;
    let oracle = 2.0 * (scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
    let est = seed_variance(&scores).unwrap();
    assert_eq!(est.n_runs, 20);
    assert!((est.two_sigma - oracle).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_through_json() {
    let cfg = ModelConfig { encoder_hidden: 5, rnn_hidden: 2, ..ModelConfig::new(2, 2, 6, 3) };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rho = Array2::from_shape_simple_fn((6, 3), || rng.random::<f64>());
    let params = init_model(&cfg, &rho, 4).unwrap();
    let ckpt = Checkpoint { params, training: TrainingConfig::default(), history: TrainingHistory::default(), context: None };
    let back = Checkpoint::from_json(&ckpt.to_json().unwrap()).unwrap();
    assert_eq!(back, ckpt);
}
