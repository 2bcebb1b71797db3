//! Corpora, label spaces and span conversions.

mod batch;
mod conll;
mod lexicon;
mod segments;
mod tags;

use std::path::{Path, PathBuf};

pub use batch::{Batch, MixedBatches};
pub use conll::{parse_conll, parse_conll_str, write_conll, ParsedCorpus, Repair};
pub use lexicon::Lexicon;
pub use segments::{
    boundary_tags_from_segments, is_well_formed, segments_from_tags, unified_tags_from_segments,
    Segment,
};
pub use tags::{
    unified_to_boundary, BoundaryTag, DomainLabel, OpinionLabel, Position, Sentiment, SpanTag,
    UnifiedTag,
};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub unified_tags: Option<Vec<UnifiedTag>>,
    pub opinion_labels: Vec<OpinionLabel>,
    pub domain: DomainLabel,
}

impl Sentence {
    pub fn unlabeled<S: Into<String>>(tokens: impl IntoIterator<Item = S>, domain: DomainLabel) -> Self {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let n = tokens.len();
        Sentence {
            tokens,
            unified_tags: None,
            opinion_labels: vec![OpinionLabel::NotOpinion; n],
            domain,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gold_segments(&self) -> Option<Vec<Segment>> {
        self.unified_tags.as_deref().map(segments_from_tags)
    }

    pub fn label_opinions(&mut self, lexicon: &Lexicon) {
        self.opinion_labels = lexicon.label_opinions(&self.tokens);
    }
}

/// Canonical file names inside a transfer-pair directory.
pub const SOURCE_TRAIN: &str = "source_train.conll";
pub const TARGET_TRAIN: &str = "target_train.conll";
pub const SOURCE_TEST: &str = "source_test.conll";
pub const TARGET_TEST: &str = "target_test.conll";
pub const LEXICON: &str = "lexicon.txt";

#[derive(Clone, Debug)]
pub struct TransferPaths {
    pub source_train: PathBuf,
    pub target_train: PathBuf,
    pub source_test: PathBuf,
    pub target_test: PathBuf,
    pub lexicon: Option<PathBuf>,
}

impl TransferPaths {
    /// Standard layout under `dir`; the lexicon is used when present.
    pub fn in_dir(dir: &Path) -> Self {
        let lex = dir.join(LEXICON);
        TransferPaths {
            source_train: dir.join(SOURCE_TRAIN),
            target_train: dir.join(TARGET_TRAIN),
            source_test: dir.join(SOURCE_TEST),
            target_test: dir.join(TARGET_TEST),
            lexicon: lex.exists().then_some(lex),
        }
    }
}

/// Labeled source data, unlabeled target data, and the two test splits.
///
/// Gold tags found in the target training file are moved out of the
/// sentences on construction; only [`TransferPair::target_train_supervised`]
/// (the in-domain reference setting) can see them.
#[derive(Clone, Debug)]
pub struct TransferPair {
    pub source_train: Vec<Sentence>,
    pub target_train: Vec<Sentence>,
    /// Validation set.
    pub source_test: Vec<Sentence>,
    /// Evaluation set.
    pub target_test: Vec<Sentence>,
    target_train_gold: Vec<Option<Vec<UnifiedTag>>>,
}

impl TransferPair {
    pub fn new(
        source_train: Vec<Sentence>,
        mut target_train: Vec<Sentence>,
        source_test: Vec<Sentence>,
        target_test: Vec<Sentence>,
    ) -> Self {
        let target_train_gold = target_train.iter_mut().map(|s| s.unified_tags.take()).collect();
        TransferPair {
            source_train,
            target_train,
            source_test,
            target_test,
            target_train_gold,
        }
    }

    pub fn load(paths: &TransferPaths) -> Result<Self> {
        let read = |p: &Path, d| parse_conll(p, d).map(|c| c.sentences);
        let mut pair = TransferPair::new(
            read(&paths.source_train, DomainLabel::Source)?,
            read(&paths.target_train, DomainLabel::Target)?,
            read(&paths.source_test, DomainLabel::Source)?,
            read(&paths.target_test, DomainLabel::Target)?,
        );
        if let Some(lex) = &paths.lexicon {
            pair.label_opinions(&Lexicon::load(lex)?);
        }
        Ok(pair)
    }

    pub fn label_opinions(&mut self, lexicon: &Lexicon) {
        for s in self
            .source_train
            .iter_mut()
            .chain(&mut self.target_train)
            .chain(&mut self.source_test)
            .chain(&mut self.target_test)
        {
            s.label_opinions(lexicon);
        }
    }

    /// Target training sentences with their gold tags restored. Fails if any
    /// sentence had no tags in the file.
    pub fn target_train_supervised(&self) -> Result<Vec<Sentence>> {
        self.target_train
            .iter()
            .zip(&self.target_train_gold)
            .enumerate()
            .map(|(i, (s, gold))| {
                let tags = gold.clone().ok_or(Error::Unlabeled(i))?;
                Ok(Sentence {
                    unified_tags: Some(tags),
                    ..s.clone()
                })
            })
            .collect()
    }

    pub fn all_sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.source_train
            .iter()
            .chain(&self.target_train)
            .chain(&self.source_test)
            .chain(&self.target_test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(tokens: &[&str], tags: &[&str], d: DomainLabel) -> Sentence {
        Sentence {
            unified_tags: Some(tags.iter().map(|t| t.parse().unwrap()).collect()),
            ..Sentence::unlabeled(tokens.iter().copied(), d)
        }
    }

    #[test]
    fn target_gold_is_hidden() {
        let t = tagged(&["the", "camera"], &["O", "S-POS"], DomainLabel::Target);
        let pair = TransferPair::new(vec![], vec![t.clone()], vec![], vec![]);
        assert!(pair.target_train[0].unified_tags.is_none());
        assert_eq!(pair.target_train_supervised().unwrap(), vec![t]);
    }

    #[test]
    fn supervised_target_requires_tags() {
        let u = Sentence::unlabeled(["x"], DomainLabel::Target);
        let pair = TransferPair::new(vec![], vec![u], vec![], vec![]);
        assert!(matches!(pair.target_train_supervised(), Err(Error::Unlabeled(0))));
    }

    #[test]
    fn intel_example_segment() {
        let s = tagged(&["Intel"], &["S-NEG"], DomainLabel::Source);
        assert_eq!(
            s.gold_segments().unwrap(),
            vec![Segment::new(0, 0, Some(Sentiment::Neg))]
        );
    }
}
