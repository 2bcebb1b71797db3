use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xdabsa::data::{
    parse_conll, DomainLabel, OpinionLabel, Sentiment, TransferPaths, SOURCE_TEST, SOURCE_TRAIN, TARGET_TEST,
    TARGET_TRAIN,
};
use xdabsa::embeddings::{EmbeddingMatrix, RowSource, Vocabulary, UNK};
use xdabsa::synth::{generate, SynthSpec, VECTORS};

fn aspect_tokens(path: &std::path::Path) -> BTreeSet<String> {
    let c = parse_conll(path, DomainLabel::Source).unwrap();
    let mut out = BTreeSet::new();
    for s in &c.sentences {
        for seg in s.gold_segments().unwrap() {
            for t in &s.tokens[seg.start..=seg.end] {
                out.insert(t.clone());
            }
        }
    }
    out
}

#[test]
fn files_reparse_without_repairs() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate(&SynthSpec::default(), dir.path()).unwrap();
    for (name, expected) in [
        (SOURCE_TRAIN, &c.source_train),
        (SOURCE_TEST, &c.source_test),
        (TARGET_TRAIN, &c.target_train),
        (TARGET_TEST, &c.target_test),
    ] {
        let parsed = parse_conll(&dir.path().join(name), DomainLabel::Source).unwrap();
        assert!(parsed.repairs.is_empty(), "{name}: {:?}", parsed.repairs);
        assert_eq!(parsed.sentences.len(), expected.len());
        for (a, b) in parsed.sentences.iter().zip(expected.iter()) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.unified_tags, b.unified_tags);
        }
    }
}

#[test]
fn aspect_vocabularies_are_disjoint_in_files() {
    let dir = tempfile::tempdir().unwrap();
    generate(&SynthSpec::default(), dir.path()).unwrap();
    let src: BTreeSet<String> = aspect_tokens(&dir.path().join(SOURCE_TRAIN))
        .union(&aspect_tokens(&dir.path().join(SOURCE_TEST)))
        .cloned()
        .collect();
    let tgt: BTreeSet<String> = aspect_tokens(&dir.path().join(TARGET_TRAIN))
        .union(&aspect_tokens(&dir.path().join(TARGET_TEST)))
        .cloned()
        .collect();
    assert!(!src.is_empty() && !tgt.is_empty());
    assert!(src.is_disjoint(&tgt), "shared: {:?}", src.intersection(&tgt).collect::<Vec<_>>());
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    generate(&SynthSpec::default(), a.path()).unwrap();
    generate(&SynthSpec::default(), b.path()).unwrap();
    generate(
        &SynthSpec {
            seed: 99,
            ..SynthSpec::default()
        },
        c.path(),
    )
    .unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for n in &names {
        let x = std::fs::read(a.path().join(n)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(n)).unwrap(), "{n:?}");
    }
    assert_ne!(
        std::fs::read(a.path().join(SOURCE_TRAIN)).unwrap(),
        std::fs::read(c.path().join(SOURCE_TRAIN)).unwrap()
    );
}

#[test]
fn sentiments_follow_the_opinion_polarity_map() {
    let spec = SynthSpec::default();
    let c = spec.generate().unwrap();
    let pair = c.pair();
    let polarity: std::collections::BTreeMap<&str, Sentiment> =
        spec.opinions.iter().map(|(w, s)| (w.as_str(), *s)).collect();
    for s in pair.source_train.iter().chain(&pair.source_test).chain(&pair.target_test) {
        let segs = s.gold_segments().unwrap();
        let ops: Vec<Sentiment> = s
            .tokens
            .iter()
            .filter_map(|t| polarity.get(t.as_str()).copied())
            .collect();
        // one opinion per aspect group; every gold sentiment appears among the opinions
        for seg in &segs {
            assert!(ops.contains(&seg.sentiment.unwrap()), "{:?}", s.tokens);
        }
        for (t, l) in s.tokens.iter().zip(&s.opinion_labels) {
            assert_eq!(polarity.contains_key(t.as_str()), *l == OpinionLabel::Opinion, "{t}");
        }
    }
}

#[test]
fn written_vectors_load_for_the_whole_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::default();
    generate(&spec, dir.path()).unwrap();
    let pair = xdabsa::data::TransferPair::load(&TransferPaths::in_dir(dir.path())).unwrap();
    let vocab = Vocabulary::from_sentences(pair.all_sentences());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m: EmbeddingMatrix<f32> =
        EmbeddingMatrix::load_word2vec_text(&dir.path().join(VECTORS), &vocab, spec.vectors.dim, &mut rng).unwrap();
    let random: Vec<&str> = (0..vocab.len())
        .filter(|&i| m.sources[i] == RowSource::OovRandom)
        .map(|i| vocab.token(i))
        .collect();
    assert_eq!(random, vec![vocab.token(UNK)]);
}
