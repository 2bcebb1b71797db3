//! Reader and writer for the token-per-line tagged corpus format.
//!
//! One token per line, optionally followed by whitespace and a unified tag;
//! sentences are separated by blank lines. A sentence is either fully tagged
//! or fully untagged.

use std::fmt::Write as _;
use std::path::Path;

use super::segments::{is_well_formed, segments_from_tags, unified_tags_from_segments};
use super::tags::{DomainLabel, OpinionLabel, UnifiedTag};
use super::Sentence;
use crate::error::{Error, Result};

/// A gold sequence that was not well formed and was rewritten by the span
/// decoder's repair policy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Repair {
    /// Index of the sentence in the file.
    pub sentence: usize,
    /// Line number (1-based) of the sentence's first token.
    pub line: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ParsedCorpus {
    pub sentences: Vec<Sentence>,
    pub repairs: Vec<Repair>,
}

struct Pending {
    first_line: usize,
    tokens: Vec<String>,
    tags: Vec<UnifiedTag>,
    tagged: Option<bool>,
}

pub fn parse_conll(path: &Path, domain: DomainLabel) -> Result<ParsedCorpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll_str(&text, &path.display().to_string(), domain)
}

/// Parse corpus text; `origin` is used only in error messages.
pub fn parse_conll_str(text: &str, origin: &str, domain: DomainLabel) -> Result<ParsedCorpus> {
    let mut out = ParsedCorpus::default();
    let mut cur: Option<Pending> = None;
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(p) = cur.take() {
                finish(p, domain, &mut out);
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let p = cur.get_or_insert_with(|| Pending {
            first_line: line_no,
            tokens: Vec::new(),
            tags: Vec::new(),
            tagged: None,
        });
        let tagged = match fields.len() {
            1 => false,
            2 => true,
            n => return Err(err(line_no, format!("expected 1 or 2 columns, found {n}"))),
        };
        match p.tagged {
            None => p.tagged = Some(tagged),
            Some(t) if t != tagged => {
                return Err(err(line_no, "sentence mixes tagged and untagged lines".into()))
            }
            Some(_) => {}
        }
        p.tokens.push(fields[0].to_string());
        if tagged {
            let tag = fields[1].parse::<UnifiedTag>().map_err(|m| err(line_no, m))?;
            p.tags.push(tag);
        }
    }
    if let Some(p) = cur.take() {
        finish(p, domain, &mut out);
    }
    Ok(out)
}

fn finish(p: Pending, domain: DomainLabel, out: &mut ParsedCorpus) {
    let len = p.tokens.len();
    let tags = if p.tagged == Some(true) {
        if is_well_formed(&p.tags) {
            Some(p.tags)
        } else {
            out.repairs.push(Repair {
                sentence: out.sentences.len(),
                line: p.first_line,
            });
            let segs = segments_from_tags(&p.tags);
            Some(unified_tags_from_segments(&segs, len).expect("decoded spans are valid"))
        }
    } else {
        None
    };
    out.sentences.push(Sentence {
        tokens: p.tokens,
        unified_tags: tags,
        opinion_labels: vec![OpinionLabel::NotOpinion; len],
        domain,
    });
}

/// Render sentences with the given tags in the same format `parse_conll` reads.
pub fn write_conll(sentences: &[Sentence], tags: &[Vec<UnifiedTag>]) -> String {
    let mut s = String::new();
    for (sent, tags) in sentences.iter().zip(tags) {
        for (tok, tag) in sent.tokens.iter().zip(tags) {
            let _ = writeln!(s, "{tok}\t{tag}");
        }
        s.push('\n');
    }
    s
}
