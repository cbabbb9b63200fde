use cmsenti::embed::{
    fit_tfidf, train_contextual, train_skipgram, ContextualConfig, ContextualEncoder, SkipgramConfig,
};
use cmsenti::subword::TokenSequence;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sg_config() -> SkipgramConfig {
    SkipgramConfig {
        dim: 16,
        buckets: 2048,
        epochs: 20,
        ..Default::default()
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split(' ').map(str::to_string).collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Reference FNV-1a walk over the bracketed piece, written out separately
/// from the library's.
fn reference_buckets(piece: &str, buckets: usize) -> Vec<usize> {
    let s: Vec<char> = format!("<{piece}>").chars().collect();
    let mut out = Vec::new();
    for n in 3..=6 {
        if n > s.len() {
            break;
        }
        for start in 0..=s.len() - n {
            let gram: String = s[start..start + n].iter().collect();
            let mut h = 2166136261u32;
            for b in gram.bytes() {
                h = (h ^ b as u32).wrapping_mul(16777619);
            }
            out.push(h as usize % buckets);
        }
    }
    out
}

#[test]
fn skipgram_loss_falls_over_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let words = ["nalla", "padam", "mass", "semma", "mokka", "waste", "super", "da"];
    let corpus: Vec<Vec<String>> = (0..40)
        .map(|_| (0..5).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect())
        .collect();
    let t = train_skipgram(&corpus, &sg_config()).unwrap();
    let h = t.loss_history();
    assert_eq!(h.len(), 20);
    assert!(h.iter().all(|l| l.is_finite()));
    assert!(h[19] < h[0], "{h:?}");
}

#[test]
fn shared_contexts_give_similar_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let fillers = ["ka", "mo", "ru", "te", "vi", "lo", "ne", "zu", "pi", "ga"];
    let mut corpus = Vec::new();
    for i in 0..200 {
        // "qqx" and "wwz" only ever occur between "left" and "right"
        let twin = if i % 2 == 0 { "qqx" } else { "wwz" };
        corpus.push(toks(&format!("left {twin} right")));
        let a = fillers[rng.gen_range(0..fillers.len())];
        let b = fillers[rng.gen_range(0..fillers.len())];
        let c = fillers[rng.gen_range(0..fillers.len())];
        corpus.push(toks(&format!("{a} {b} {c}")));
    }
    let cfg = SkipgramConfig { epochs: 10, ..sg_config() };
    let t = train_skipgram(&corpus, &cfg).unwrap();
    let twin_sim = cosine(&t.word_vector("qqx"), &t.word_vector("wwz"));
    for f in fillers {
        let other = cosine(&t.word_vector("qqx"), &t.word_vector(f));
        assert!(twin_sim > other, "twin {twin_sim} vs {f} {other}");
    }
}

#[test]
fn word_vector_matches_external_ngram_sum() {
    let corpus = vec![toks("ab cd ab ef"), toks("cd ab ef")];
    let cfg = SkipgramConfig { epochs: 2, ..sg_config() };
    let t = train_skipgram(&corpus, &cfg).unwrap();
    for piece in ["ab", "unseen", "x", "ப"] {
        let mut want: Vec<f32> = t.piece_vector(piece).map(<[f32]>::to_vec).unwrap_or(vec![0.0; 16]);
        for b in reference_buckets(piece, 2048) {
            for (w, v) in want.iter_mut().zip(t.bucket_vector(b)) {
                *w += v;
            }
        }
        assert_eq!(t.word_vector(piece), want, "{piece}");
    }
}

#[test]
fn skipgram_is_deterministic_per_seed() {
    let corpus = vec![toks("a b c d e f a b"), toks("c d e a")];
    let cfg = SkipgramConfig { epochs: 3, ..sg_config() };
    let a = train_skipgram(&corpus, &cfg).unwrap();
    let b = train_skipgram(&corpus, &cfg).unwrap();
    assert_eq!(a, b);
    let c = train_skipgram(&corpus, &SkipgramConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn word_vector_is_total(piece in "\\PC{0,12}") {
        let t = train_skipgram(&[toks("a b a")], &SkipgramConfig { epochs: 1, ..sg_config() }).unwrap();
        let v = t.word_vector(&piece);
        prop_assert_eq!(v.len(), 16);
        prop_assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn tfidf_idf_matches_closed_form(
        docs in prop::collection::vec(prop::collection::vec("[a-e]{1,2}", 0..6), 1..8),
        k in 1usize..40,
    ) {
        prop_assume!(docs.iter().any(|d| !d.is_empty()));
        let m = fit_tfidf(&docs, k).unwrap();
        let n = docs.len() as f64;
        for term in m.terms() {
            let df = docs.iter().filter(|d| d.contains(term)).count() as f64;
            let want = ((1.0 + n) / (1.0 + df)).ln() + 1.0;
            prop_assert!((m.idf(term).unwrap() - want).abs() < 1e-9);
            prop_assert!(m.idf(term).unwrap() > 0.0);
        }
    }

    #[test]
    fn tfidf_vector_ignores_order(
        docs in prop::collection::vec(prop::collection::vec("[a-e]", 1..6), 1..6),
        sentence in prop::collection::vec("[a-g]", 0..8),
        seed in 0u64..100,
    ) {
        use rand::seq::SliceRandom;
        let m = fit_tfidf(&docs, 10).unwrap();
        let mut shuffled = sentence.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = m.sentence_vector(&sentence);
        prop_assert_eq!(&a, &m.sentence_vector(&shuffled));
        let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if sentence.iter().any(|t| m.idf(t).is_some()) {
            prop_assert!((norm - 1.0).abs() < 1e-6);
        } else {
            prop_assert_eq!(norm, 0.0);
        }
    }
}

fn ctx_config() -> ContextualConfig {
    ContextualConfig {
        emb_dim: 8,
        hidden: 12,
        epochs: 6,
        lr: 1e-2,
        batch_size: 8,
        held_out: 0.2,
        ..Default::default()
    }
}

fn ctx_corpus() -> Vec<TokenSequence> {
    // two repeating patterns over ids 4..10
    (0..40)
        .map(|i| {
            let ids = if i % 2 == 0 { vec![4, 5, 6, 7, 4, 5] } else { vec![8, 9, 10, 8, 9] };
            TokenSequence::new(ids)
        })
        .collect()
}

#[test]
fn contextual_perplexity_decreases() {
    let enc = train_contextual(&ctx_corpus(), 11, &ctx_config()).unwrap();
    let h = enc.perplexity_history();
    assert_eq!(h.len(), 6);
    assert!(h.last().unwrap() < &h[0], "{h:?}");
}

#[test]
fn contextual_training_is_deterministic() {
    let a = train_contextual(&ctx_corpus(), 11, &ctx_config()).unwrap();
    let b = train_contextual(&ctx_corpus(), 11, &ctx_config()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_token_sentence_is_its_own_state() {
    let enc = ContextualEncoder::new(11, &ctx_config()).unwrap();
    let one = enc.sentence_vector(&TokenSequence::new(vec![6])).unwrap();
    assert_eq!(one.len(), 24);
    let twice = enc.sentence_vectors(&[TokenSequence::new(vec![6]), TokenSequence::new(vec![6])], 2).unwrap();
    assert_eq!(twice[0], one);
    assert_eq!(twice[1], one);
}

#[test]
fn constant_states_average_to_themselves() {
    let mut enc = ContextualEncoder::new(11, &ctx_config()).unwrap();
    let store = enc.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = store.get_mut(id);
        if name.contains(".u_") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        if name.ends_with(".b_z") {
            // update gate closed, so h_t depends on x_t only
            t.data_mut().iter_mut().for_each(|v| *v = -100.0);
        }
    }
    let single = enc.sentence_vector(&TokenSequence::new(vec![7])).unwrap();
    let repeated = enc.sentence_vector(&TokenSequence::new(vec![7; 5])).unwrap();
    for (a, b) in single.iter().zip(&repeated) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn pad_suffix_is_ignored_bitwise() {
    let enc = ContextualEncoder::new(11, &ctx_config()).unwrap();
    let s = TokenSequence::new(vec![4, 9, 5]);
    assert_eq!(enc.sentence_vector(&s.padded(3)).unwrap(), enc.sentence_vector(&s.padded(9)).unwrap());
}
