use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdabsa::data::{Segment, Sentiment};
use xdabsa::evaluation::{exact_match_counts, score_predictions, Counts, EvalReport, Task};

fn random_segments(rng: &mut ChaCha8Rng, len: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < len {
        if rng.gen_bool(0.3) {
            let end = (i + rng.gen_range(0..3)).min(len - 1);
            out.push(Segment::new(i, end, Some(Sentiment::ALL[rng.gen_range(0..3)])));
            i = end + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Quadratic scan: a predicted span is a hit if some gold span equals it.
fn brute_force(gold: &[Segment], pred: &[Segment], task: Task) -> Counts {
    let same = |a: &Segment, b: &Segment| {
        a.start == b.start && a.end == b.end && (task == Task::Ad || a.sentiment == b.sentiment)
    };
    Counts {
        tp: pred.iter().filter(|p| gold.iter().any(|g| same(g, p))).count(),
        pred: pred.len(),
        gold: gold.len(),
    }
}

#[test]
fn counts_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let len = rng.gen_range(1..15);
        let gold = random_segments(&mut rng, len);
        let pred = random_segments(&mut rng, len);
        for task in [Task::Ad, Task::Ads] {
            assert_eq!(exact_match_counts(&gold, &pred, task), brute_force(&gold, &pred, task));
        }
    }
}

#[test]
fn worked_example_is_exact() {
    let gold = [Segment::new(0, 1, Some(Sentiment::Pos))];
    let pred = [Segment::new(0, 1, Some(Sentiment::Pos)), Segment::new(3, 3, Some(Sentiment::Neg))];
    let r = EvalReport::from_counts(Task::Ads, exact_match_counts(&gold, &pred, Task::Ads));
    assert_eq!((r.precision, r.recall, r.micro_f1), (0.5, 1.0, 2.0 / 3.0));
}

#[test]
fn perfect_and_empty_predictions() {
    use xdabsa::data::{Position, UnifiedTag};
    let gold = vec![vec![
        UnifiedTag::O,
        UnifiedTag::Aspect(Position::B, Sentiment::Neg),
        UnifiedTag::Aspect(Position::E, Sentiment::Neg),
    ]];
    let (ad, ads) = score_predictions(&gold, &gold);
    assert_eq!((ad.micro_f1, ads.micro_f1), (1.0, 1.0));
    let none = vec![vec![UnifiedTag::O; 3]];
    let (ad, ads) = score_predictions(&gold, &none);
    assert_eq!((ad.micro_f1, ads.micro_f1), (0.0, 0.0));
}

proptest! {
    #[test]
    fn f1_is_bounded_and_symmetric_in_swap(seed in any::<u64>(), len in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_segments(&mut rng, len);
        let b = random_segments(&mut rng, len);
        let ab = EvalReport::from_counts(Task::Ads, exact_match_counts(&a, &b, Task::Ads));
        let ba = EvalReport::from_counts(Task::Ads, exact_match_counts(&b, &a, Task::Ads));
        prop_assert!((0.0..=1.0).contains(&ab.micro_f1));
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert!((ab.micro_f1 - ba.micro_f1).abs() < 1e-15);
        let ad = exact_match_counts(&a, &b, Task::Ad);
        prop_assert!(ad.tp >= exact_match_counts(&a, &b, Task::Ads).tp);
    }
}
