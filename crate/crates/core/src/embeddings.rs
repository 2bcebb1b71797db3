//! Vocabulary and pretrained word vectors.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sentence;
use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";
const OOV_RANGE: f64 = 0.25;

/// Token index with `<pad>` at 0 and `<unk>` at 1; corpus tokens follow in
/// order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(PAD_TOKEN.to_string(), PAD);
        v.index.insert(UNK_TOKEN.to_string(), UNK);
        for t in tokens {
            v.push(t.into());
        }
        v
    }

    pub fn from_sentences<'a>(corpora: impl IntoIterator<Item = &'a Sentence>) -> Self {
        Self::from_tokens(corpora.into_iter().flat_map(|s| s.tokens.iter().cloned()))
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    /// Rebuild the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    /// Number of rows including pad.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    /// Map tokens to rows; unseen tokens go to `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.get(t.as_ref()).unwrap_or(UNK))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSource {
    Pad,
    Pretrained,
    OovRandom,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix<F> {
    pub table: Tensor<F>,
    pub sources: Vec<RowSource>,
}

impl<F: Real> EmbeddingMatrix<F> {
    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[F] {
        let d = self.dim();
        &self.table.data()[i * d..(i + 1) * d]
    }

    /// Every non-pad row drawn from U(-0.25, 0.25).
    pub fn random(vocab: &Vocabulary, dim: usize, rng: &mut impl Rng) -> Self {
        Self::build(vocab, dim, &HashMap::new(), rng)
    }

    fn build(vocab: &Vocabulary, dim: usize, found: &HashMap<usize, Vec<f64>>, rng: &mut impl Rng) -> Self {
        let n = vocab.len();
        let mut data = Vec::with_capacity(n * dim);
        let mut sources = Vec::with_capacity(n);
        for i in 0..n {
            if i == PAD {
                data.extend(std::iter::repeat(F::zero()).take(dim));
                sources.push(RowSource::Pad);
            } else if let Some(v) = found.get(&i) {
                data.extend(v.iter().map(|&x| F::of(x)));
                sources.push(RowSource::Pretrained);
            } else {
                data.extend((0..dim).map(|_| F::of(rng.gen_range(-OOV_RANGE..OOV_RANGE))));
                sources.push(RowSource::OovRandom);
            }
        }
        EmbeddingMatrix {
            table: Tensor::new(vec![n, dim], data).expect("sized above"),
            sources,
        }
    }

    /// Read word2vec text vectors (optional `count dim` header). Rows for
    /// vocabulary tokens missing from the file are drawn from U(-0.25, 0.25)
    /// in row order, so the result depends only on the file, vocabulary and
    /// generator state.
    pub fn parse_word2vec_text(
        text: &str,
        origin: &str,
        vocab: &Vocabulary,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut found = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if idx == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                let d: usize = fields[1].parse().unwrap();
                if d != dim {
                    return Err(err(line_no, format!("header dimension {d}, expected {dim}")));
                }
                continue;
            }
            if fields.len() != dim + 1 {
                return Err(err(
                    line_no,
                    format!("expected {dim} components, found {}", fields.len() - 1),
                ));
            }
            let v = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| err(line_no, format!("`{f}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            match vocab.get(fields[0]) {
                Some(row) if row != PAD => {
                    found.entry(row).or_insert(v);
                }
                _ => {}
            }
        }
        Ok(Self::build(vocab, dim, &found, rng))
    }

    pub fn load_word2vec_text(path: &Path, vocab: &Vocabulary, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_word2vec_text(&text, &path.display().to_string(), vocab, dim, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::from_tokens(["foo", "bar", "foo"]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.get("foo"), Some(2));
        assert_eq!(v.encode(&["bar", "zzz"]), vec![3, UNK]);
    }

    #[test]
    fn reads_header_and_vectors() {
        let vocab = Vocabulary::from_tokens(["foo", "baz"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: EmbeddingMatrix<f64> =
            EmbeddingMatrix::parse_word2vec_text("2 3\nfoo 1 2 3\nbar 4 5 6\n", "v", &vocab, 3, &mut rng).unwrap();
        assert_eq!(m.row(2), &[1.0, 2.0, 3.0]);
        assert_eq!(m.row(PAD), &[0.0; 3]);
        assert_eq!(m.sources[2], RowSource::Pretrained);
        assert_eq!(m.sources[3], RowSource::OovRandom);
        assert!(m.row(3).iter().all(|x| x.abs() < 0.25));
    }

    #[test]
    fn dimension_and_line_errors() {
        let vocab = Vocabulary::from_tokens(["foo"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = EmbeddingMatrix::<f32>::parse_word2vec_text("2 4\n", "v", &vocab, 3, &mut rng).unwrap_err();
        assert!(e.to_string().contains("header dimension 4"));
        let e = EmbeddingMatrix::<f32>::parse_word2vec_text("foo 1 2 3\nbar 1 x 3\n", "v", &vocab, 3, &mut rng)
            .unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = EmbeddingMatrix::<f32>::parse_word2vec_text("foo 1 2\n", "v", &vocab, 3, &mut rng).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn oov_rows_are_reproducible() {
        let vocab = Vocabulary::from_tokens(["a", "b"]);
        let a: EmbeddingMatrix<f32> = EmbeddingMatrix::random(&vocab, 5, &mut ChaCha8Rng::seed_from_u64(4));
        let b: EmbeddingMatrix<f32> = EmbeddingMatrix::random(&vocab, 5, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }
}
