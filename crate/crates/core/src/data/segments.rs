//! Span decoding and encoding for BIEOS tag sequences.

use serde::{Deserialize, Serialize};

use super::tags::{BoundaryTag, Position, Sentiment, SpanTag, UnifiedTag};
use crate::error::{Error, Result};

/// Inclusive token span with an optional sentiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub sentiment: Option<Sentiment>,
}

impl Segment {
    pub fn new(start: usize, end: usize, sentiment: Option<Sentiment>) -> Self {
        Segment {
            start,
            end,
            sentiment,
        }
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

/// Decode spans left to right. Ill-formed input is repaired: an I or E with no
/// open span opens one; a B or S inside an open span closes it at the previous
/// token; O closes an open span; a span still open at the end closes at the
/// last token. A span takes the sentiment of its first tag.
pub fn segments_from_tags<T: SpanTag>(tags: &[T]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut open: Option<(usize, Option<Sentiment>)> = None;
    for (i, t) in tags.iter().enumerate() {
        match t.position() {
            None => {
                if let Some((s, sent)) = open.take() {
                    out.push(Segment::new(s, i - 1, sent));
                }
            }
            Some(Position::B) => {
                if let Some((s, sent)) = open.take() {
                    out.push(Segment::new(s, i - 1, sent));
                }
                open = Some((i, t.sentiment()));
            }
            Some(Position::I) => {
                if open.is_none() {
                    open = Some((i, t.sentiment()));
                }
            }
            Some(Position::E) => {
                let (s, sent) = open.take().unwrap_or((i, t.sentiment()));
                out.push(Segment::new(s, i, sent));
            }
            Some(Position::S) => {
                if let Some((s, sent)) = open.take() {
                    out.push(Segment::new(s, i - 1, sent));
                }
                out.push(Segment::new(i, i, t.sentiment()));
            }
        }
    }
    if let Some((s, sent)) = open {
        out.push(Segment::new(s, tags.len() - 1, sent));
    }
    out
}

fn check_segments(segments: &[Segment], len: usize) -> Result<()> {
    let mut sorted: Vec<&Segment> = segments.iter().collect();
    sorted.sort();
    let mut next_free = 0usize;
    for s in sorted {
        if s.start > s.end || s.end >= len {
            return Err(Error::InvalidSegment {
                start: s.start,
                end: s.end,
                len,
            });
        }
        if s.start < next_free {
            return Err(Error::OverlappingSegments(s.start));
        }
        next_free = s.end + 1;
    }
    Ok(())
}

fn encode_positions(segments: &[Segment], len: usize) -> Result<Vec<Option<(Position, Option<Sentiment>)>>> {
    check_segments(segments, len)?;
    let mut out = vec![None; len];
    for s in segments {
        if s.start == s.end {
            out[s.start] = Some((Position::S, s.sentiment));
        } else {
            out[s.start] = Some((Position::B, s.sentiment));
            for slot in &mut out[s.start + 1..s.end] {
                *slot = Some((Position::I, s.sentiment));
            }
            out[s.end] = Some((Position::E, s.sentiment));
        }
    }
    Ok(out)
}

/// Encode spans as unified tags; every span must carry a sentiment.
pub fn unified_tags_from_segments(segments: &[Segment], len: usize) -> Result<Vec<UnifiedTag>> {
    encode_positions(segments, len)?
        .into_iter()
        .map(|slot| match slot {
            None => Ok(UnifiedTag::O),
            Some((p, Some(s))) => Ok(UnifiedTag::Aspect(p, s)),
            Some((_, None)) => {
                let seg = segments.iter().find(|s| s.sentiment.is_none()).unwrap();
                Err(Error::MissingSentiment(seg.start, seg.end))
            }
        })
        .collect()
}

/// Encode spans as boundary tags; sentiments are ignored.
pub fn boundary_tags_from_segments(segments: &[Segment], len: usize) -> Result<Vec<BoundaryTag>> {
    Ok(encode_positions(segments, len)?
        .into_iter()
        .map(|slot| BoundaryTag::from_position(slot.map(|(p, _)| p)))
        .collect())
}

/// Whether a unified sequence is already well formed (decoding then
/// re-encoding reproduces it exactly).
pub fn is_well_formed(tags: &[UnifiedTag]) -> bool {
    let segs = segments_from_tags(tags);
    matches!(unified_tags_from_segments(&segs, tags.len()), Ok(t) if t == tags)
}
