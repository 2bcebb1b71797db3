//! Exact-match span scoring.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{segments_from_tags, unified_to_boundary, Segment, Sentence, UnifiedTag};
use crate::diffcore::{Graph, ParamStore, Real};
use crate::embeddings::Vocabulary;
use crate::error::{Error, Result};
use crate::memory::{AttentionDump, DmiCache};
use crate::model::{decode_boundary, decode_unified, Model, Needs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Spans only.
    #[serde(rename = "AD")]
    Ad,
    /// Spans and sentiment.
    #[serde(rename = "ADS")]
    Ads,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.pred += o.pred;
        self.gold += o.gold;
    }
}

/// Matches of `pred` against `gold`. AD compares `(start, end)`, ADS also
/// the sentiment. Duplicate spans within a set are counted once.
pub fn exact_match_counts(gold: &[Segment], pred: &[Segment], task: Task) -> Counts {
    let key = |s: &Segment| match task {
        Task::Ad => (s.start, s.end, None),
        Task::Ads => (s.start, s.end, s.sentiment),
    };
    let g: BTreeSet<_> = gold.iter().map(key).collect();
    let p: BTreeSet<_> = pred.iter().map(key).collect();
    Counts {
        tp: g.intersection(&p).count(),
        pred: p.len(),
        gold: g.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

impl EvalReport {
    /// Precision or recall is 0 when its denominator is 0; F1 is 0 when both are.
    pub fn from_counts(task: Task, c: Counts) -> Self {
        let precision = ratio(c.tp, c.pred);
        let recall = ratio(c.tp, c.gold);
        let micro_f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport {
            task,
            tp: c.tp,
            pred: c.pred,
            gold: c.gold,
            precision,
            recall,
            micro_f1,
        }
    }
}

/// Score predicted unified tag sequences against gold sequences. AD spans
/// come from the boundary projection of the same predictions.
pub fn score_predictions(gold: &[Vec<UnifiedTag>], pred: &[Vec<UnifiedTag>]) -> (EvalReport, EvalReport) {
    let mut ad = Counts::default();
    let mut ads = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        let gs = segments_from_tags(g);
        let ps = segments_from_tags(p);
        ad += exact_match_counts(&gs, &segments_from_tags(&unified_to_boundary(p)), Task::Ad);
        ads += exact_match_counts(&gs, &ps, Task::Ads);
    }
    (EvalReport::from_counts(Task::Ad, ad), EvalReport::from_counts(Task::Ads, ads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEval {
    pub ad: EvalReport,
    pub ads: EvalReport,
    /// AD scored from the auxiliary boundary head instead (diagnostic).
    pub boundary_head_ad: EvalReport,
    /// Fraction of tokens whose unified tag is predicted exactly.
    pub token_accuracy: f64,
}

/// Per-sentence predictions from the unified and boundary heads.
pub struct Prediction {
    pub unified: Vec<UnifiedTag>,
    pub boundary: Vec<crate::data::BoundaryTag>,
}

/// Sentences per evaluation graph; bounds memory without affecting results.
const EVAL_CHUNK: usize = 64;

pub fn predict<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    vocab: &Vocabulary,
    sentences: &[Sentence],
) -> Result<Vec<Prediction>> {
    let needs = Needs {
        unified: true,
        opinion: false,
        domain: false,
    };
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(EVAL_CHUNK) {
        let mut g = Graph::new(store);
        let mut cache = DmiCache::default();
        for s in chunk {
            let o = model.forward(&mut g, &mut cache, &vocab.encode(&s.tokens), needs)?;
            out.push(Prediction {
                unified: decode_unified(g.value(o.unified_logits.expect("requested"))),
                boundary: decode_boundary(g.value(o.boundary_logits)),
            });
        }
    }
    Ok(out)
}

pub fn evaluate_corpus<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    vocab: &Vocabulary,
    sentences: &[Sentence],
) -> Result<CorpusEval> {
    let gold: Vec<Vec<UnifiedTag>> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| s.unified_tags.clone().ok_or(Error::Unlabeled(i)))
        .collect::<Result<_>>()?;
    let preds = predict(model, store, vocab, sentences)?;
    let unified: Vec<Vec<UnifiedTag>> = preds.iter().map(|p| p.unified.clone()).collect();
    let (ad, ads) = score_predictions(&gold, &unified);
    let mut head = Counts::default();
    let mut correct = 0usize;
    let mut total = 0usize;
    for (g, p) in gold.iter().zip(&preds) {
        head += exact_match_counts(&segments_from_tags(g), &segments_from_tags(&p.boundary), Task::Ad);
        correct += g.iter().zip(&p.unified).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    Ok(CorpusEval {
        ad,
        ads,
        boundary_head_ad: EvalReport::from_counts(Task::Ad, head),
        token_accuracy: ratio(correct, total),
    })
}

/// Per-hop attention of each sentence with its predicted tags. `None` for
/// models without the memory interaction.
pub fn attention<F: Real>(
    model: &Model,
    store: &ParamStore<F>,
    vocab: &Vocabulary,
    sentences: &[Sentence],
) -> Result<Option<Vec<AttentionDump>>> {
    if model.dmi.is_none() {
        return Ok(None);
    }
    let needs = Needs {
        unified: true,
        opinion: false,
        domain: false,
    };
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(EVAL_CHUNK) {
        let mut g = Graph::new(store);
        let mut cache = DmiCache::default();
        for s in chunk {
            let o = model.forward(&mut g, &mut cache, &vocab.encode(&s.tokens), needs)?;
            let tags = decode_unified(g.value(o.unified_logits.expect("requested")));
            let trace = o.dmi.as_ref().expect("memory model");
            out.push(AttentionDump::from_trace(
                &g,
                trace,
                s.tokens.clone(),
                tags.iter().map(|t| t.to_string()).collect(),
            ));
        }
    }
    Ok(Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sentiment;

    fn seg(s: usize, e: usize, p: Sentiment) -> Segment {
        Segment::new(s, e, Some(p))
    }

    #[test]
    fn worked_example() {
        let gold = [seg(0, 2, Sentiment::Pos)];
        let pred = [seg(0, 2, Sentiment::Pos), seg(4, 4, Sentiment::Neg)];
        let r = EvalReport::from_counts(Task::Ads, exact_match_counts(&gold, &pred, Task::Ads));
        assert_eq!((r.tp, r.pred, r.gold), (1, 2, 1));
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.micro_f1, 2.0 / 3.0);
    }

    #[test]
    fn ad_ignores_sentiment() {
        let gold = [seg(0, 2, Sentiment::Pos)];
        let pred = [seg(0, 2, Sentiment::Neg)];
        assert_eq!(exact_match_counts(&gold, &pred, Task::Ad).tp, 1);
        assert_eq!(exact_match_counts(&gold, &pred, Task::Ads).tp, 0);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let r = EvalReport::from_counts(Task::Ad, Counts { tp: 0, pred: 0, gold: 3 });
        assert_eq!((r.precision, r.recall, r.micro_f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn micro_aggregation() {
        let mut c = Counts { tp: 1, pred: 1, gold: 2 };
        c += Counts { tp: 0, pred: 1, gold: 0 };
        let r = EvalReport::from_counts(Task::Ad, c);
        assert_eq!((r.precision, r.recall), (0.5, 0.5));
    }

    #[test]
    fn report_json_round_trip() {
        let r = EvalReport::from_counts(Task::Ads, Counts { tp: 2, pred: 3, gold: 4 });
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"task\":\"ADS\""));
        let back: EvalReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
