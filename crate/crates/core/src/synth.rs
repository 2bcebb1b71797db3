//! Deterministic two-domain corpus generator. Both domains share opinion
//! words and sentence templates; their aspect vocabularies are disjoint.
//!
//! Alongside the corpora the generator writes word vectors in word2vec text
//! format that play the role of pretrained embeddings: words of one class
//! (source aspects, target aspects, opinions, out-of-scope nouns) lie around
//! a shared class center, and opinion polarity is a common direction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    unified_tags_from_segments, write_conll, DomainLabel, Lexicon, Segment, Sentence, Sentiment, TransferPair,
    UnifiedTag, LEXICON,
    SOURCE_TEST, SOURCE_TRAIN, TARGET_TEST, TARGET_TRAIN,
};
use crate::error::{Error, Result};

const SOURCE_ASPECTS: &[&str] = &[
    "pizza", "pasta", "sushi", "steak", "salad", "burger", "dessert", "wine", "beer", "coffee", "tea", "soup",
    "bread", "waiter", "waitress", "staff", "service", "menu", "decor", "ambience", "music", "table", "bar",
    "patio", "chef", "manager", "portion", "price", "fish tacos", "tuna tartare", "dim sum", "crab cakes",
    "outdoor seating", "happy hour", "lamb chops", "garlic knots", "ice cream", "fried rice", "spring rolls",
    "drink list",
];

const TARGET_ASPECTS: &[&str] = &[
    "laptop", "screen", "keyboard", "monitor", "trackpad", "speakers", "processor", "memory", "display",
    "charger", "fan", "hinge", "webcam", "camera", "software", "drivers", "warranty", "case", "port", "mouse",
    "touchscreen", "graphics", "ram", "disk", "os", "bios", "antivirus", "cable", "battery life", "hard drive",
    "power supply", "operating system", "customer support", "boot time", "sound card", "usb ports",
    "wifi adapter", "build quality", "retina panel", "video chip",
];

const POSITIVE: &[&str] = &[
    "great", "good", "excellent", "amazing", "fantastic", "wonderful", "perfect", "superb", "lovely", "awesome",
];

const NEGATIVE: &[&str] = &[
    "bad", "terrible", "awful", "horrible", "poor", "mediocre", "disappointing", "lousy", "dreadful", "weak",
];

const TEMPLATES: &[&str] = &[
    "the <A> is <O>",
    "<O> <A> and <A>",
    "the <D> was really <O>",
    "the <A1> is <O1> but the <A2> is <O2>",
    "the <D> is <O1> but the <A2> is <O2>",
    "i think the <A> and the <D> were <O>",
];

/// Out-of-scope nouns shared by both domains; they fill aspect-like slots
/// but are never aspects.
const DISTRACTORS: &[&str] = &[
    "weather", "traffic", "parking", "neighborhood", "street", "city", "holiday", "trip", "news", "weekend",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub source_train: usize,
    pub source_test: usize,
    pub target_train: usize,
    pub target_test: usize,
}

/// Generator settings. Aspects may be multiword (space separated).
/// Template slots: `<Ak>` is a fresh aspect whose sentiment comes from the
/// opinion filling `<Ok>`; `<A>` and `<O>` mean `<A1>` and `<O1>`; `<D>` is
/// a distractor tagged O. Every other template token is literal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub source_aspects: Vec<String>,
    pub target_aspects: Vec<String>,
    pub opinions: Vec<(String, Sentiment)>,
    pub templates: Vec<String>,
    pub distractors: Vec<String>,
    pub sizes: SplitSizes,
    pub vectors: VectorSpec,
    pub seed: u64,
}

/// Geometry of the emitted word vectors. Each class center and each
/// function word is drawn from U(-center_range, center_range) per
/// component; every word adds U(-word_noise, word_noise) noise to its
/// class center. Opinions add `polarity` times a shared unit-range
/// direction, positively for POS and negatively for NEG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorSpec {
    pub dim: usize,
    pub center_range: f64,
    pub word_noise: f64,
    pub polarity: f64,
}

impl Default for VectorSpec {
    fn default() -> Self {
        VectorSpec {
            dim: 50,
            center_range: 0.3,
            word_noise: 0.15,
            polarity: 0.3,
        }
    }
}

fn owned(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for SynthSpec {
    fn default() -> Self {
        let opinions = POSITIVE
            .iter()
            .map(|w| (w.to_string(), Sentiment::Pos))
            .chain(NEGATIVE.iter().map(|w| (w.to_string(), Sentiment::Neg)))
            .collect();
        SynthSpec {
            source_aspects: owned(SOURCE_ASPECTS),
            target_aspects: owned(TARGET_ASPECTS),
            opinions,
            templates: owned(TEMPLATES),
            distractors: owned(DISTRACTORS),
            sizes: SplitSizes {
                source_train: 400,
                source_test: 100,
                target_train: 400,
                target_test: 100,
            },
            vectors: VectorSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Slot {
    Aspect(usize),
    Opinion(usize),
    Distractor,
    Word(String),
}

fn parse_template(t: &str) -> Result<Vec<Slot>> {
    let slots: Vec<Slot> = t
        .split_whitespace()
        .map(|tok| {
            let inner = tok.strip_prefix('<').and_then(|s| s.strip_suffix('>'));
            let Some(inner) = inner else {
                return Ok(Slot::Word(tok.to_string()));
            };
            let (kind, num) = inner.split_at(1);
            let k = if num.is_empty() {
                1
            } else {
                num.parse::<usize>()
                    .map_err(|_| Error::Config(format!("template `{t}`: bad slot `{tok}`")))?
            };
            match kind {
                "A" => Ok(Slot::Aspect(k)),
                "O" => Ok(Slot::Opinion(k)),
                "D" if num.is_empty() => Ok(Slot::Distractor),
                _ => Err(Error::Config(format!("template `{t}`: bad slot `{tok}`"))),
            }
        })
        .collect::<Result<_>>()?;
    let opinions: BTreeSet<usize> = slots
        .iter()
        .filter_map(|s| if let Slot::Opinion(k) = s { Some(*k) } else { None })
        .collect();
    for s in &slots {
        if let Slot::Aspect(k) = s {
            if !opinions.contains(k) {
                return Err(Error::Config(format!("template `{t}`: <A{k}> has no <O{k}>")));
            }
        }
    }
    Ok(slots)
}

/// The generated corpora with gold tags on every split.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub source_train: Vec<Sentence>,
    pub source_test: Vec<Sentence>,
    pub target_train: Vec<Sentence>,
    pub target_test: Vec<Sentence>,
    pub lexicon: Vec<String>,
    /// Word vectors in file order.
    pub vectors: Vec<(String, Vec<f64>)>,
}

pub const VECTORS: &str = "vectors.txt";

impl SynthSpec {
    /// Reject overlapping vocabularies and malformed templates.
    pub fn validate(&self) -> Result<()> {
        self.checked_templates().map(|_| ())
    }

    fn checked_templates(&self) -> Result<Vec<Vec<Slot>>> {
        let words = |xs: &[String]| -> BTreeSet<String> {
            xs.iter().flat_map(|a| a.split_whitespace().map(str::to_string)).collect()
        };
        let templates = self.templates.iter().map(|t| parse_template(t)).collect::<Result<Vec<_>>>()?;
        let literal: BTreeSet<String> = templates
            .iter()
            .flatten()
            .filter_map(|s| if let Slot::Word(w) = s { Some(w.clone()) } else { None })
            .collect();
        let opinion_words: Vec<String> = self.opinions.iter().map(|(w, _)| w.clone()).collect();
        let groups = [
            ("source aspects", words(&self.source_aspects)),
            ("target aspects", words(&self.target_aspects)),
            ("opinions", words(&opinion_words)),
            ("distractors", words(&self.distractors)),
            ("template words", literal),
        ];
        for (i, (na, a)) in groups.iter().enumerate() {
            for (nb, b) in &groups[i + 1..] {
                if let Some(w) = a.intersection(b).next() {
                    return Err(Error::Config(format!("{na} and {nb} share the token `{w}`")));
                }
            }
        }
        let empty = [
            ("source aspects", self.source_aspects.is_empty()),
            ("target aspects", self.target_aspects.is_empty()),
            ("opinions", self.opinions.is_empty()),
            ("templates", self.templates.is_empty()),
        ];
        if let Some((n, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("synthetic spec has no {n}")));
        }
        let uses_distractor = templates.iter().flatten().any(|s| *s == Slot::Distractor);
        if uses_distractor && self.distractors.is_empty() {
            return Err(Error::Config("templates use <D> but there are no distractors".into()));
        }
        if self.opinions.iter().any(|(w, _)| w.split_whitespace().count() != 1) {
            return Err(Error::Config("opinions must be single tokens".into()));
        }
        if self.vectors.dim == 0 {
            return Err(Error::Config("vector dimension must be positive".into()));
        }
        Ok(templates)
    }

    fn sentence(
        &self,
        template: &[Slot],
        aspects: &[String],
        domain: DomainLabel,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Sentence, Vec<UnifiedTag>)> {
        let mut chosen: BTreeMap<usize, &(String, Sentiment)> = BTreeMap::new();
        for s in template {
            if let Slot::Opinion(k) = s {
                chosen
                    .entry(*k)
                    .or_insert_with(|| self.opinions.choose(rng).expect("validated non-empty"));
            }
        }
        let mut tokens = Vec::new();
        let mut segments = Vec::new();
        for s in template {
            match s {
                Slot::Word(w) => tokens.push(w.clone()),
                Slot::Distractor => tokens.push(self.distractors.choose(rng).expect("validated").clone()),
                Slot::Opinion(k) => tokens.push(chosen[k].0.clone()),
                Slot::Aspect(k) => {
                    let a = aspects.choose(rng).expect("validated non-empty");
                    let start = tokens.len();
                    tokens.extend(a.split_whitespace().map(str::to_string));
                    segments.push(Segment::new(start, tokens.len() - 1, Some(chosen[k].1)));
                }
            }
        }
        let tags = unified_tags_from_segments(&segments, tokens.len())?;
        let mut s = Sentence::unlabeled(tokens, domain);
        s.unified_tags = Some(tags.clone());
        Ok((s, tags))
    }

    fn split(
        &self,
        templates: &[Vec<Slot>],
        aspects: &[String],
        domain: DomainLabel,
        n: usize,
        stream: u64,
    ) -> Result<Vec<Sentence>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        (0..n)
            .map(|_| {
                let t = &templates[rng.gen_range(0..templates.len())];
                self.sentence(t, aspects, domain, &mut rng).map(|(s, _)| s)
            })
            .collect()
    }

    pub fn generate(&self) -> Result<SynthCorpus> {
        let templates = self.checked_templates()?;
        let z = &self.sizes;
        let (s, t) = (DomainLabel::Source, DomainLabel::Target);
        let mut lexicon: Vec<String> = self.opinions.iter().map(|(w, _)| w.clone()).collect();
        lexicon.sort();
        lexicon.dedup();
        Ok(SynthCorpus {
            source_train: self.split(&templates, &self.source_aspects, s, z.source_train, 1)?,
            source_test: self.split(&templates, &self.source_aspects, s, z.source_test, 2)?,
            target_train: self.split(&templates, &self.target_aspects, t, z.target_train, 3)?,
            target_test: self.split(&templates, &self.target_aspects, t, z.target_test, 4)?,
            lexicon,
            vectors: self.word_vectors(&templates),
        })
    }

    fn word_vectors(&self, templates: &[Vec<Slot>]) -> Vec<(String, Vec<f64>)> {
        let v = &self.vectors;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(5);
        let mut draw = |r: f64| -> Vec<f64> { (0..v.dim).map(|_| rng.gen_range(-r..=r)).collect() };
        let centers: Vec<Vec<f64>> = (0..4).map(|_| draw(v.center_range)).collect();
        let polarity = draw(1.0);
        let mut out: Vec<(String, Vec<f64>)> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut push = |w: &str, base: &[f64], shift: f64, out: &mut Vec<(String, Vec<f64>)>, noise: Vec<f64>| {
            if seen.insert(w.to_string()) {
                let vec = base
                    .iter()
                    .zip(&noise)
                    .zip(&polarity)
                    .map(|((c, n), p)| c + n + shift * p)
                    .collect();
                out.push((w.to_string(), vec));
            }
        };
        let classes = [
            (&self.source_aspects, 0usize),
            (&self.target_aspects, 1),
            (&self.distractors, 3),
        ];
        for (words, c) in classes {
            for w in words.iter().flat_map(|a| a.split_whitespace()) {
                let noise = draw(v.word_noise);
                push(w, &centers[c], 0.0, &mut out, noise);
            }
        }
        for (w, s) in &self.opinions {
            let shift = match s {
                Sentiment::Pos => v.polarity,
                Sentiment::Neg => -v.polarity,
                Sentiment::Neu => 0.0,
            };
            let noise = draw(v.word_noise);
            push(w, &centers[2], shift, &mut out, noise);
        }
        let literals: Vec<String> = templates
            .iter()
            .flatten()
            .filter_map(|s| if let Slot::Word(w) = s { Some(w.clone()) } else { None })
            .collect();
        let zero = vec![0.0; v.dim];
        for w in literals {
            let own = draw(v.center_range);
            push(&w, &zero, 0.0, &mut out, own);
        }
        out
    }
}

fn render_vectors(vectors: &[(String, Vec<f64>)]) -> String {
    let dim = vectors.first().map_or(0, |v| v.1.len());
    let mut s = format!("{} {dim}\n", vectors.len());
    for (w, v) in vectors {
        s.push_str(w);
        for x in v {
            s.push_str(&format!(" {x:.6}"));
        }
        s.push('\n');
    }
    s
}

fn render(sentences: &[Sentence]) -> String {
    let tags: Vec<Vec<UnifiedTag>> = sentences
        .iter()
        .map(|s| s.unified_tags.clone().expect("synthetic sentences are tagged"))
        .collect();
    write_conll(sentences, &tags)
}

impl SynthCorpus {
    /// The same data as [`TransferPair::load`] would read back from [`SynthCorpus::write`].
    pub fn pair(&self) -> TransferPair {
        let mut pair = TransferPair::new(
            self.source_train.clone(),
            self.target_train.clone(),
            self.source_test.clone(),
            self.target_test.clone(),
        );
        pair.label_opinions(&Lexicon::from_words(&self.lexicon));
        pair
    }

    /// Write the four splits, the opinion lexicon and the word vectors under
    /// `dir` using the standard file names. The target training file keeps its gold tags;
    /// loaders hide them from every transfer setting.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            (SOURCE_TRAIN, render(&self.source_train)),
            (SOURCE_TEST, render(&self.source_test)),
            (TARGET_TRAIN, render(&self.target_train)),
            (TARGET_TEST, render(&self.target_test)),
            (LEXICON, self.lexicon.iter().map(|w| format!("{w}\n")).collect()),
            (VECTORS, render_vectors(&self.vectors)),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Generate with `spec` and write the corpus files to `dir`.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<SynthCorpus> {
    let c = spec.generate()?;
    c.write(dir)?;
    Ok(c)
}
