use std::collections::BTreeMap;

use kgtok::eval::*;
use kgtok::toylm::{tokenize, Vocabulary};
use kgtok::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

// Sort-based oracle: position of the first entry equal to the true logit in
// a descending sort, plus one.
fn sorted_rank(logits: &[f64], t: usize) -> usize {
    let mut s = logits.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    1 + s.iter().position(|&x| x == logits[t]).unwrap()
}

fn brute_hits(ranks: &[usize], k: usize) -> f64 {
    let mut n = 0;
    for &r in ranks {
        if r <= k {
            n += 1;
        }
    }
    n as f64 / ranks.len() as f64
}

#[test]
fn token_rank_exhaustive_small_alphabets() {
    // Every vector over {0,1,2}^v for v ≤ 6, every true position.
    for v in 1..=6usize {
        let total = 3usize.pow(v as u32);
        for code in 0..total {
            let mut c = code;
            let logits: Vec<f64> = (0..v)
                .map(|_| {
                    let d = c % 3;
                    c /= 3;
                    d as f64
                })
                .collect();
            for t in 0..v {
                assert_eq!(token_rank(&logits, t), sorted_rank(&logits, t), "{logits:?} {t}");
            }
        }
    }
}

#[test]
fn token_rank_and_hits_random_up_to_32() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20_000 {
        let v = rng.random_range(1..=32);
        // Few distinct values so ties are frequent.
        let levels = rng.random_range(1..=v);
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(0..levels) as f64 * 0.5 - 3.0).collect();
        let t = rng.random_range(0..v);
        assert_eq!(token_rank(&logits, t), sorted_rank(&logits, t));
    }
    for _ in 0..2_000 {
        let n = rng.random_range(1..40);
        let ranks: Vec<usize> = (0..n).map(|_| rng.random_range(1..=32)).collect();
        let h = hit_at_k(&ranks, &DEFAULT_KS).unwrap();
        for k in DEFAULT_KS {
            assert_eq!(h[&k], brute_hits(&ranks, k));
        }
    }
}

// Character-level oracle: locate the label in the space-joined token text
// and map char offsets back to token indices.
fn char_offset_span(answer_tokens: &[String], label: &str) -> Option<(usize, usize)> {
    let joined = answer_tokens.join(" ");
    let label = tokenize(label).join(" ");
    let mut from = 0;
    while let Some(pos) = joined[from..].find(&label) {
        let start = from + pos;
        let end = start + label.len();
        let at_boundary = (start == 0 || joined.as_bytes()[start - 1] == b' ')
            && (end == joined.len() || joined.as_bytes()[end] == b' ');
        if at_boundary {
            let first = joined[..start].matches(' ').count();
            return Some((first, first + label.matches(' ').count() + 1));
        }
        from = start + 1;
    }
    None
}

#[test]
fn object_span_matches_char_offsets() {
    let words = ["red", "river", "delta", "of", "the", "mount", "blue", "lake", "is", "it"];
    let vocab = Vocabulary::new(words.iter().map(|w| w.to_string()));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..3_000 {
        let n = rng.random_range(1..8);
        let ans: Vec<String> = (0..n).map(|_| words[rng.random_range(0..words.len())].to_string()).collect();
        let m = rng.random_range(1..4);
        let label: Vec<&str> = (0..m).map(|_| words[rng.random_range(0..words.len())]).collect();
        let label = label.join(" ");
        let ids = vocab.encode(&ans.join(" "));
        let got = find_object_span(&ids, &label, &vocab);
        match char_offset_span(&ans, &label) {
            Some((s, e)) => assert_eq!((got.start, got.end, got.fallback), (s, e, false), "{ans:?} / {label}"),
            None => assert_eq!((got.start, got.end, got.fallback), (0, n, true)),
        }
    }
    // Leading space variant tokenizes identically.
    let ids = vocab.encode("it is blue lake");
    assert_eq!(find_object_span(&ids, " blue lake", &vocab).start, 2);
}

struct Fixed(BTreeMap<Vec<usize>, Vec<Vec<f64>>>);

impl TeacherForced for Fixed {
    fn answer_logits(&self, _: &EvalInstance, answer: &[usize]) -> kgtok::Result<Vec<Vec<f64>>> {
        Ok(self.0[answer].clone())
    }
    fn prompt_tokens(&self, inst: &EvalInstance) -> kgtok::Result<usize> {
        Ok(inst.query.split(' ').count())
    }
}

fn span(tokens: Vec<usize>, start: usize, end: usize) -> AnswerSpan {
    AnswerSpan {
        tokens,
        span: ObjectSpan {
            start,
            end,
            fallback: false,
        },
    }
}

#[test]
fn multi_answer_takes_the_best_alternative() {
    // Answer [0, 1] ranks 1 then 7; alternative [2] ranks 2.
    let mut m = BTreeMap::new();
    m.insert(vec![0, 1], vec![vec![5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]]);
    m.insert(vec![2], vec![vec![0.0, 3.0, 2.0, 0.0, 0.0, 0.0, 0.0]]);
    let inst = EvalInstance {
        query: "a b c".into(),
        answer: span(vec![0, 1], 0, 2),
        alternatives: vec![span(vec![2], 0, 1)],
        graph: None,
    };
    let r = rank_instance(&Fixed(m.clone()), &inst, &DEFAULT_KS).unwrap();
    assert_eq!(r.ranks, vec![1, 7]);
    assert_eq!(r.sequence_rank, 2);
    assert_eq!(r.hits[&1], false);
    assert_eq!(r.hits[&3], true);
    assert_eq!(r.token_count, 3);

    let rep = evaluate(&Fixed(m), &[inst], "kore", "test").unwrap();
    let json = serde_json::to_value(&rep).unwrap();
    assert!(json["hit_at_k"]["3"].as_f64() == Some(1.0));
    assert!(render_table(&[rep]).lines().nth(1).unwrap().starts_with("kore"));
    assert!(matches!(evaluate(&Fixed(BTreeMap::new()), &[], "kore", "test"), Err(Error::EmptyInstances)));
}

proptest! {
    #[test]
    fn hits_monotone_in_k(ranks in prop::collection::vec(1usize..50, 1..30)) {
        let h = hit_at_k(&ranks, &DEFAULT_KS).unwrap();
        let v: Vec<f64> = h.values().copied().collect();
        prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn multi_answer_never_worse(alts in prop::collection::vec(prop::collection::vec(1usize..20, 1..5), 1..5)) {
        let a: Vec<(Vec<usize>, (usize, usize))> = alts.iter().map(|r| (r.clone(), (0, r.len()))).collect();
        let best = multi_answer_rank(&a);
        for (r, s) in &a {
            prop_assert!(best <= sequence_rank(r, *s));
        }
    }
}
